import numpy as np
import pytest

from boxcalib import autodiff as ad

from _util import kernel_gradient_errors, numeric_grad, rel_error

ERRORS = kernel_gradient_errors()


@pytest.mark.parametrize("kernel", sorted(ERRORS))
def test_kernel_matches_finite_differences(kernel):
    assert ERRORS[kernel] < 1e-5


def test_conv_layer_accumulates_gradients():
    rng = np.random.default_rng(0)
    conv = ad.Conv2d("c", 2, 3, 3, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 2, 4, 4))
    dy = rng.normal(size=(1, 3, 4, 4))
    conv.forward(x)
    conv.backward(dy)
    g1 = conv.weight.grad.copy()
    conv.forward(x)
    conv.backward(dy)
    assert np.allclose(conv.weight.grad, 2 * g1)
    conv.weight.zero_grad()
    assert not conv.weight.grad.any()


def test_conv_identity_kernel():
    x = np.arange(2 * 4 * 5, dtype=float).reshape(1, 2, 4, 5)
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
    y, _ = ad.conv2d_forward(x, w, np.array([0.5, -1.0]))
    assert np.allclose(y[0, 0], x[0, 0] + 0.5) and np.allclose(y[0, 1], x[0, 1] - 1.0)


def test_conv_shift_kernel_zero_pads():
    # weight at (ky, kx) = (1, 2) reads the right-hand neighbor
    x = np.arange(12, dtype=float).reshape(1, 1, 3, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0
    y, _ = ad.conv2d_forward(x, w)
    assert y[0, 0].tolist() == [[1, 2, 3, 0], [5, 6, 7, 0], [9, 10, 11, 0]]


@pytest.mark.parametrize("call", [
    lambda: ad.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 3, 3, 3))),
    lambda: ad.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((3, 2, 3, 3))),
    lambda: ad.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((3, 2, 5, 5))),
    lambda: ad.maxpool_forward(np.zeros((1, 1, 3, 4))),
    lambda: ad.mul_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 4, 4))),
    lambda: ad.concat_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 2, 2))),
])
def test_shape_errors(call):
    with pytest.raises(ad.ShapeError):
        call()


def test_maxpool_tie_goes_to_first_element():
    x = np.array([[[[2.0, 2.0], [2.0, 1.0]]]])
    y, cache = ad.maxpool_forward(x)
    assert y[0, 0, 0, 0] == 2.0
    dx = ad.maxpool_backward(np.ones_like(y), cache)
    assert dx[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]
    x = np.array([[[[0.0, 1.0], [1.0, 1.0]]]])
    dx = ad.maxpool_backward(np.ones((1, 1, 1, 1)), ad.maxpool_forward(x)[1])
    assert dx[0, 0].tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_relu_gradient_at_zero_is_zero():
    x = np.array([-1.0, 0.0, 2.0])
    y, cache = ad.relu_forward(x)
    assert ad.relu_backward(np.ones(3), cache).tolist() == [0.0, 0.0, 1.0]


def test_softmax_sums_to_one_and_is_stable():
    x = np.array([[[[1000.0]], [[999.0]], [[-1000.0]]]])
    y, _ = ad.softmax_forward(x)
    assert np.isfinite(y).all() and np.isclose(y.sum(), 1.0)
    rng = np.random.default_rng(0)
    y, _ = ad.softmax_forward(rng.normal(size=(2, 7, 3, 3)) * 10)
    assert np.allclose(y.sum(axis=1), 1.0)


def test_sigmoid_extremes():
    y, _ = ad.sigmoid_forward(np.array([-800.0, 0.0, 800.0]))
    assert y.tolist() == [0.0, 0.5, 1.0]


def test_upsample_backward_sums_blocks():
    dx = ad.upsample_backward(np.ones((1, 1, 4, 4)), (1, 1, 2, 2))
    assert np.all(dx == 4)


def test_xavier_variance():
    rng = np.random.default_rng(0)
    shape = (100, 40, 5, 5)  # 1e5 draws
    w = ad.xavier_init(shape, rng, np.float64)
    expected = 2.0 / (40 * 25 + 100 * 25)
    assert abs(w.var() / expected - 1) < 0.02
    assert abs(w.mean()) < 3 * np.sqrt(expected / w.size)


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    state = ad.OptimizerState(lr=0.1)
    ad.adam_step([p], [np.zeros(2)], state)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_times_sign():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([3.0, -0.01, 1e-3])
    state = ad.OptimizerState(lr=0.1, eps=1e-12)
    ad.adam_step([p], [g], state)
    # bias correction makes the first update lr * g / |g|
    assert np.allclose(p, [0.9, -1.9, 0.4])
    assert state.step == 1


def test_adam_second_step_matches_hand_computation():
    p = np.array([0.0])
    state = ad.OptimizerState(lr=1.0, beta1=0.5, beta2=0.5, eps=0.0)
    ad.adam_step([p], [np.array([1.0])], state)
    ad.adam_step([p], [np.array([3.0])], state)
    m = (0.25 * 1 + 0.5 * 3) / 0.75     # 7/3
    v = (0.25 * 1 + 0.5 * 9) / 0.75     # 19/3
    assert np.isclose(p[0], -1.0 - m / np.sqrt(v))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
               "b": np.float32(rng.normal(size=(5,)))}
    ad.save_checkpoint(tmp_path / "c.bxck", tensors)
    raw = (tmp_path / "c.bxck").read_bytes()
    assert raw[:4] == b"BXCK" and raw[4:12] == b"\x01\x00\x00\x00\x02\x00\x00\x00"
    back = ad.load_checkpoint(tmp_path / "c.bxck")
    assert list(back) == ["a.weight", "b"]
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="not a checkpoint"):
        ad.load_checkpoint(tmp_path / "x")
    ad.save_checkpoint(tmp_path / "y", {"w": np.ones((4, 4), np.float32)})
    data = (tmp_path / "y").read_bytes()
    (tmp_path / "z").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        ad.load_checkpoint(tmp_path / "z")


def test_numeric_grad_helper_on_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((x ** 2).sum()), x)
    assert rel_error(g, 2 * x) < 1e-9
