import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progrl import diffcore as dc


def conv_reference(x, W, b):
    """Direct 3x3 same-padding convolution, loop form."""
    n, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, W.shape[0]))
    for i in range(h):
        for j in range(w):
            patch = xp[:, i:i + 3, j:j + 3, :]
            out[:, i, j, :] = np.einsum("nabc,oabc->no", patch, W) + b
    return out


def test_conv_matches_loop_reference(rng):
    stack = [dc.conv2d("c", 3, 4)]
    params = dc.init_params(stack, rng)
    params["c.b"] = rng.standard_normal(4)
    x = rng.standard_normal((2, 5, 6, 3))
    out, _ = dc.forward(stack, params, x)
    np.testing.assert_allclose(out, conv_reference(x, params["c.W"], params["c.b"]), atol=1e-12)


def test_dense_accepts_unbatched_vector(rng):
    stack = [dc.dense("d", 3, 2)]
    params = dc.init_params(stack, rng)
    x = rng.standard_normal(3)
    y, tape = dc.forward(stack, params, x)
    assert y.shape == (2,)
    np.testing.assert_allclose(y, params["d.W"] @ x)
    grads, gx = dc.backward(stack, params, tape, np.ones(2))
    assert gx.shape == (3,)
    np.testing.assert_allclose(grads["d.b"], np.ones(2))


def test_shape_mismatch_raises(rng):
    stack = [dc.dense("d", 3, 2)]
    params = dc.init_params(stack, rng)
    with pytest.raises(dc.ConfigError):
        dc.forward(stack, params, np.zeros((4, 5)))
    conv = [dc.conv2d("c", 2, 2)]
    cparams = dc.init_params(conv, rng)
    with pytest.raises(dc.ConfigError):
        dc.forward(conv, cparams, np.zeros((1, 4, 4, 3)))


def test_backward_rejects_short_tape(rng):
    stack = [dc.dense("a", 2, 2), dc.relu()]
    params = dc.init_params(stack, rng)
    _, (sq, tape) = dc.forward(stack, params, np.ones((1, 2)))
    with pytest.raises(dc.ConfigError):
        dc.backward(stack, params, (sq, tape[:1]), np.ones((1, 2)))


def test_duplicate_parameter_rejected():
    with pytest.raises(dc.ConfigError):
        dc.init_params([dc.dense("d", 2, 2), dc.dense("d", 2, 2)], np.random.default_rng(0))


def test_empty_batch_runs(rng):
    stack = [dc.conv2d("c", 2, 3), dc.relu(), dc.flatten(), dc.dense("d", 3 * 4 * 4, 2)]
    params = dc.init_params(stack, rng)
    out, tape = dc.forward(stack, params, np.zeros((0, 4, 4, 2)))
    assert out.shape == (0, 2)
    grads, gx = dc.backward(stack, params, tape, np.zeros((0, 2)))
    assert gx.shape == (0, 4, 4, 2)
    assert np.all(grads["c.W"] == 0)


def test_softmax_cross_entropy_frozen_values():
    loss, grad = dc.softmax_cross_entropy(np.array([0.0, 0.0, 0.0, 0.0]), 2)
    assert loss == pytest.approx(np.log(4.0), abs=1e-15)
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])


def test_softmax_cross_entropy_stable_for_large_logits():
    loss, grad = dc.softmax_cross_entropy_rows(np.array([[1e4, 0.0], [0.0, 1e4]]), np.array([0, 0]))
    assert np.isfinite(loss) and loss == pytest.approx(0.5e4)
    assert np.all(np.isfinite(grad))


def test_adam_first_step_moves_by_lr():
    store = dc.ParamStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    dc.adam_step(store, {"w": np.array([0.5, -4.0, 0.0])}, lr=0.1)
    np.testing.assert_allclose(store["w"], [0.9, -1.9, 3.0], atol=1e-7)
    assert store.entries["w"].step == 1


def test_adam_minimises_quadratic():
    store = dc.ParamStore()
    store.add("w", np.array([5.0, -3.0]))
    for _ in range(2000):
        dc.adam_step(store, {"w": 2.0 * store["w"]}, lr=0.05)
    assert np.max(np.abs(store["w"])) < 1e-3


def test_relative_error_floor():
    assert dc.relative_error(0.0, 1e-11) < 1e-4
    assert dc.relative_error(1.0, 1.1) == pytest.approx(0.1 / 2.1)


def test_finite_diff_check_detects_wrong_gradient(rng):
    stack = [dc.dense("d", 3, 2)]
    params = dc.init_params(stack, rng)
    x = rng.standard_normal((4, 3))
    head = rng.standard_normal((4, 2))
    out, tape = dc.forward(stack, params, x)
    grads, _ = dc.backward(stack, params, tape, head)
    grads["d.W"] = grads["d.W"] * 1.01

    def loss():
        return float(np.sum(dc.forward(stack, params, x)[0] * head))

    assert dc.check_gradients(loss, params, grads) > 1e-3


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, rng, dtype):
    stack = [dc.conv2d("c", 2, 3), dc.flatten(), dc.dense("d", 27, 4)]
    params = dc.init_params(stack, rng, dtype=dtype)
    params["d.b"] = rng.standard_normal(4)
    path = tmp_path / "m.ckpt"
    dc.save_checkpoint(path, params, 7, {"model": "test"})
    loaded, header = dc.load_checkpoint(path)
    assert header["rng_seed"] == 7 and header["meta"] == {"model": "test"}
    assert loaded.names() == params.names()
    for name in params.names():
        assert loaded[name].dtype == params[name].dtype
        assert loaded[name].tobytes() == params[name].tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_text('{"format": "other"}')
    with pytest.raises(dc.ConfigError):
        dc.load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5),
       c_in=st.integers(1, 3), c_out=st.integers(1, 3), seed=st.integers(0, 2**31 - 1))
def test_conv_gradients_any_shape(n, h, w, c_in, c_out, seed):
    r = np.random.default_rng(seed)
    stack = [dc.conv2d("c", c_in, c_out)]
    params = dc.init_params(stack, r)
    x = r.standard_normal((n, h, w, c_in))
    assert dc.finite_diff_check(stack, params, x, eps=1e-6, seed=seed) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0))
def test_relu_dense_linearity_in_positive_scale(seed, scale):
    # relu networks without biases are positively homogeneous
    r = np.random.default_rng(seed)
    stack = [dc.dense("a", 3, 4), dc.relu(), dc.dense("b", 4, 2)]
    params = dc.init_params(stack, r)
    x = r.standard_normal((2, 3))
    y1, _ = dc.forward(stack, params, x)
    y2, _ = dc.forward(stack, params, scale * x)
    np.testing.assert_allclose(y2, scale * y1, rtol=1e-10, atol=1e-12)
