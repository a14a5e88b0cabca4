import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from progrl import diffcore as dc
from progrl import minirogue as mr
from progrl import progress
from progrl.pretrain import IN_CHANNELS


def test_target_frozen_values():
    assert progress.progress_target(0) == 0.0
    assert progress.progress_target(1) == pytest.approx(math.log(2), abs=1e-15)
    assert progress.progress_target(-3) == pytest.approx(-math.log(4), abs=1e-15)
    np.testing.assert_allclose(progress.progress_target(np.array([99, -99])), [4.605170185988092, -4.605170185988092])


@given(st.integers(-10**6, 10**6))
def test_target_antisymmetric(dt):
    assert progress.progress_target(-dt) == -progress.progress_target(dt)
    assert progress.progress_target(np.array([dt]))[0] == pytest.approx(progress.progress_target(dt), rel=1e-15)


def test_pair_features_centred_on_second_agent():
    ta = np.full((1, 12, 12), mr.FLOOR, dtype=np.uint8)
    tb = ta.copy()
    ta[0, 2, 2] = mr.AGENT
    tb[0, 4, 5] = mr.AGENT
    st_ = np.zeros((1, 3))
    x = progress.pair_features(ta, st_, tb, st_)
    assert x.shape == (1, 11, 11, 2 * IN_CHANNELS)
    # second view: agent at the centre; first view: old agent 2 up, 3 left of it
    assert x[0, 5, 5, IN_CHANNELS + mr.AGENT] == 1.0
    assert x[0, 3, 2, mr.AGENT] == 1.0


def test_zero_head_predicts_zero(rng):
    spec = progress.ProgressSpec()
    params = spec.init(0)
    x = rng.random((3, 11, 11, 2 * IN_CHANNELS))
    np.testing.assert_array_equal(progress.predict(spec, params, x), 0.0)


def test_ele_loss_value(rng):
    spec = progress.ProgressSpec()
    params = spec.init(0)
    x = rng.random((2, 11, 11, 2 * IN_CHANNELS))
    loss, grads = progress.ele_loss(spec, params, x, np.array([3, -7]))
    assert loss == pytest.approx((math.log(4) ** 2 + math.log(8) ** 2) / 2)
    assert set(grads) == set(params.names())


def test_single_and_batch_reward_agree(small_dataset, rng):
    spec = progress.ProgressSpec()
    params = spec.init(0, zero_head=False)
    ep = small_dataset.episodes[0]
    single = progress.progress_reward(spec, params, ep.observation(0), ep.observation(4))
    batch = progress.batch_progress_reward(spec, params, ep.tiles[[0]], ep.status[[0]], ep.tiles[[4]], ep.status[[4]])
    assert single == pytest.approx(float(batch[0]), rel=1e-12)


def test_short_training_reduces_mse(tmp_path, small_dataset):
    cfg = progress.ProgressConfig(steps=200, log_interval=100, lr=1e-3, eval_pairs=512)
    params, rows = progress.train_progress(small_dataset, cfg, seed=0, checkpoint=tmp_path / "p.ckpt",
                                           metrics=tmp_path / "p.csv")
    assert rows[-1]["heldout_mse"] < rows[0]["heldout_mse"]
    loaded, header = dc.load_checkpoint(tmp_path / "p.ckpt")
    assert header["meta"]["signed"] is True
    assert all(loaded[n].tobytes() == params[n].tobytes() for n in params.names())


def test_config_validation():
    with pytest.raises(ValueError):
        progress.ProgressConfig(steps=0)
