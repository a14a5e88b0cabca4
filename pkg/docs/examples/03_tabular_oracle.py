"""Exact checks on tiny MDPs.

1. A state value equals the expected reward under the discounted occupancy,
   scaled by the total discount mass.
2. The in-batch contrastive loss, trained on a chain, ranks future states
   like the log ratio of future occupancy to the stationary marginal.
"""
import numpy as np

from progrl import oracle

rng = np.random.default_rng(0)
worst = 0.0
for i in range(50):
    mdp = oracle.random_mdp(rng, horizon=None if i % 2 else 20)
    V, _ = oracle.value_direct(mdp)
    worst = max(worst, np.abs(V - oracle.value_via_occupancy(mdp)).max())
print(f"value vs occupancy over 50 MDPs: max difference {worst:.1e}")

chain = oracle.chain_mdp(n_states=5, p_right=0.6, gamma=0.9)
print("\nfuture occupancy of the chain:")
print(np.round(oracle.future_occupancy(chain), 3))

res = oracle.nce_ratio_check(chain)
print(f"\nSpearman correlation per anchor: {np.round(res.per_anchor, 3)}")
print(f"mean {res.mean_correlation:.3f} (before training {res.initial_correlation:.3f})")
