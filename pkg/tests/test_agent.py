import numpy as np
import pytest

from progrl import agent
from progrl import diffcore as dc
from progrl import minirogue as mr
from progrl.pretrain import EncoderSpec, IN_CHANNELS, featurize
from progrl.progress import ProgressSpec

TINY = dict(budget=256, n_envs=4, rollout_len=8, eval_interval=128, eval_episodes=2,
            dungeon=mr.DungeonConfig(horizon=40))


@pytest.fixture(scope="module")
def encoder():
    return EncoderSpec().init(5, dtype="float32")


@pytest.fixture(scope="module")
def progress_params():
    return ProgressSpec().init(6, dtype="float32", zero_head=False)


def test_returns_frozen_values():
    rewards = np.array([[1.0], [0.0], [2.0]])
    dones = np.array([[0.0], [1.0], [0.0]])
    values = np.zeros((3, 1))
    ret, adv = agent.compute_returns_advantages(rewards, values, dones, np.array([10.0]), 0.5, normalize=False)
    # t=2: 2 + 0.5*10 = 7; t=1 ends the episode: 0; t=0: 1 + 0.5*0 = 1
    np.testing.assert_allclose(ret[:, 0], [1.0, 0.0, 7.0])
    np.testing.assert_allclose(adv, ret)
    _, adv_n = agent.compute_returns_advantages(rewards, values, dones, np.array([10.0]), 0.5)
    assert abs(adv_n.mean()) < 1e-12 and adv_n.std() == pytest.approx(1.0, rel=1e-6)


def test_shape_rewards():
    buf = agent.RolloutBuffer.empty(2, 3, 4, 4)
    buf.raw_rewards[:] = 1.0
    buf.shape_mask[1] = True
    calls = []

    def g(tp, sp, tn, sn):
        calls.append(len(tp))
        return np.full(len(tp), 2.0)

    agent.shape_rewards(buf, g, 0.5)
    np.testing.assert_array_equal(buf.shaped_rewards, [[1, 1, 1], [2, 2, 2]])
    assert calls == [3]
    agent.shape_rewards(buf, g, 0.0)
    np.testing.assert_array_equal(buf.shaped_rewards, 1.0)
    assert calls == [3], "g must not be evaluated when lambda is zero"


def test_running_mean_std_matches_numpy(rng):
    rms = agent.RunningMeanStd()
    chunks = [rng.normal(3.0, 2.0, size=n) for n in (5, 17, 1, 40)]
    for c in chunks:
        rms.update(c)
    allx = np.concatenate(chunks)
    assert rms.mean == pytest.approx(allx.mean(), rel=1e-4)
    assert rms.var == pytest.approx(allx.var(), rel=1e-4)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = agent.clip_by_global_norm(g, 1.0)
    assert np.sqrt(out["a"] ** 2 + out["b"] ** 2)[0] == pytest.approx(1.0, rel=1e-5)
    assert agent.clip_by_global_norm(g, None) is g


def test_sample_actions_follow_policy(rng):
    logits = np.log(np.array([[0.7, 0.2, 0.1, 1e-9, 1e-9, 1e-9]] * 20000))
    actions, logp = agent.sample_actions(logits, rng)
    freq = np.bincount(actions, minlength=6) / len(actions)
    np.testing.assert_allclose(freq[:3], [0.7, 0.2, 0.1], atol=0.015)
    np.testing.assert_allclose(logp, np.log([0.7, 0.2, 0.1, 1e-9, 1e-9, 1e-9])[actions], rtol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        agent.AgentConfig(arm="mystery")
    with pytest.raises(ValueError):
        agent.AgentConfig(shaping_lambda=-1.0)
    with pytest.raises(ValueError):
        agent.AgentConfig(shaping_k=0)
    with pytest.raises(ValueError):
        agent.AgentConfig(task="depth9")


@pytest.mark.parametrize("arm,source,frozen,shaping", [
    ("base", None, False, False), ("pretrain", "encoder", True, False), ("ele", None, False, True),
    ("pretrain_ele", "encoder", True, True), ("pm_torso_init", "progress", True, True),
    ("pretrain_finetune", "encoder", False, False)])
def test_arm_semantics(arm, source, frozen, shaping):
    cfg = agent.AgentConfig(arm=arm)
    assert (cfg.torso_source, cfg.frozen, cfg.shaping) == (source, frozen, shaping)


def test_missing_checkpoints_raise(encoder):
    with pytest.raises(dc.ConfigError):
        agent.build_params(agent.AgentConfig(arm="pretrain"), 0)
    with pytest.raises(dc.ConfigError):
        agent.build_params(agent.AgentConfig(arm="pretrain_ele"), 0, encoder=encoder)


def test_torso_import(encoder, progress_params):
    net, p = agent.build_params(agent.AgentConfig(arm="pretrain", dtype="float32"), 0, encoder=encoder)
    for name in net.torso_names():
        assert p[name].tobytes() == encoder[name].tobytes()
    net, p = agent.build_params(agent.AgentConfig(arm="pm_torso_init", dtype="float32"), 0,
                                progress=progress_params)
    np.testing.assert_array_equal(p["torso.c1.W"], progress_params["torso.c1.W"][..., IN_CHANNELS:])
    np.testing.assert_array_equal(p["torso.fc.W"], progress_params["torso.fc.W"])


@pytest.mark.parametrize("arm,frozen", [("pretrain", True), ("pm_torso_init", True), ("pretrain_finetune", False)])
def test_freeze_contract_bit_exact(arm, frozen, encoder, progress_params):
    cfg = agent.AgentConfig(task="score", arm=arm, **{**TINY, "budget": 100 * 4 * 2, "rollout_len": 2,
                                                      "eval_interval": 10**6})
    net, p0 = agent.build_params(cfg, 0, encoder, progress_params)
    before = {n: p0[n].tobytes() for n in net.torso_names()}
    updates = []
    params, _ = agent.train_online(cfg, 0, encoder, progress_params, on_update=lambda p: updates.append(1))
    assert len(updates) == 100
    same = [params[n].tobytes() == before[n] for n in net.torso_names()]
    assert all(same) if frozen else not any(same)
    assert params["trunk.W"].tobytes() != p0["trunk.W"].tobytes()


def test_shaping_lag_is_k_steps_within_episode(monkeypatch, progress_params):
    cfg = agent.AgentConfig(task="score", arm="ele", shaping_k=3, **{**TINY, "dungeon": mr.DungeonConfig(horizon=10)})
    seen = []
    real = agent.shape_rewards

    def spy(buf, fn, lam):
        seen.append((buf.shape_mask.copy(), buf.lag_status.copy(), buf.next_status.copy()))
        return real(buf, fn, lam)

    monkeypatch.setattr(agent, "shape_rewards", spy)
    agent.train_online(cfg, 0, progress=progress_params)
    assert seen
    for mask, lag, nxt in seen:
        steps_next = np.rint(nxt[..., 2] * 10)
        steps_lag = np.rint(lag[..., 2] * 10)
        np.testing.assert_array_equal(steps_next[mask] - steps_lag[mask], 3)
        # ring buffer restarts each episode: no lagged pair before step k
        np.testing.assert_array_equal(mask, steps_next >= 3)


def test_metrics_rows_and_determinism(tmp_path, encoder, progress_params):
    cfg = agent.AgentConfig(task="depth2", arm="pretrain_ele", **TINY)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _, rows = agent.train_online(cfg, 3, encoder, progress_params, metrics=a)
    agent.train_online(cfg, 3, encoder, progress_params, metrics=b)
    assert a.read_bytes() == b.read_bytes()
    assert [r["env_steps"] for r in rows] == [0, 128, 256]
    assert list(rows[0]) == agent.METRIC_COLUMNS
    back = agent.read_metrics(a)
    assert back[1]["eval_mean_return"] == rows[1]["eval_mean_return"]
    c = tmp_path / "c.csv"
    agent.train_online(cfg, 4, encoder, progress_params, metrics=c)
    assert c.read_bytes() != a.read_bytes()


def test_evaluate_returns_one_value_per_episode(encoder):
    cfg = agent.AgentConfig(task="score", **TINY)
    net, params = agent.build_params(cfg, 0)
    out = agent.evaluate(net, params, cfg, np.random.default_rng(0))
    assert out.shape == (2,) and np.all(out >= 0)


def test_learns_contextless_bandit():
    # reward 1 for one fixed action in any state: the policy should concentrate on it
    net = agent.PolicyValueNet()
    params = net.init(0)
    cfg = agent.AgentConfig()
    rng = np.random.default_rng(0)
    obs = [mr.reset(mr.DungeonConfig(seed=i), mr.TaskSpec.parse("score"))[1] for i in range(64)]
    x = featurize(np.stack([o.tiles for o in obs]), np.stack([o.status for o in obs]))
    for _ in range(150):
        logits, values, _ = net.forward(params, x)
        actions, _ = agent.sample_actions(logits, rng)
        rewards = (actions == mr.RIGHT).astype(float)
        adv = rewards - values
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        agent.a2c_update(net, params, x, actions, adv, rewards, cfg)
    logits, _, _ = net.forward(params, x)
    p = np.exp(agent.log_softmax(logits))
    assert p[:, mr.RIGHT].min() > 0.9


def test_divergence_raises():
    net = agent.PolicyValueNet()
    params = net.init(0)
    x = np.zeros((2, 11, 11, IN_CHANNELS))
    with pytest.raises(dc.DivergenceError):
        agent.a2c_update(net, params, x, np.array([0, 1]), np.array([np.nan, 0.0]), np.zeros(2),
                         agent.AgentConfig())
