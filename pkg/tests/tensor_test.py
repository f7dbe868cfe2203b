import numpy as np
import pytest

from gccpm.tensor import (
    Adam,
    AdamState,
    ConvSpec,
    Tensor,
    adam_step,
    add,
    backward,
    concat,
    conv2d,
    finite_diff_check,
    mul,
    no_grad,
    pool2d,
    relu,
    shape_only,
    total,
    upsample,
    weighted_squared_error,
)
from gccpm.metrics import stage_loss

GRAD_TOL = 1e-4
EPS = 1e-5
SEEDS = range(10)


def _param(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _cotangent(rng, shape):
    """Random weights turning a tensor output into a scalar with generic gradients."""
    return Tensor(rng.standard_normal(shape))


def _random_conv(seed):
    rng = np.random.default_rng(seed)
    groups = int(rng.choice([1, 2]))
    spec = ConvSpec(
        groups * int(rng.integers(1, 3)),
        groups * int(rng.integers(1, 3)),
        int(rng.choice([1, 3])),
        stride=int(rng.integers(1, 3)),
        dilation=int(rng.integers(1, 3)),
        groups=groups,
        padding=int(rng.integers(0, 2)),
        has_bias=bool(rng.integers(0, 2)),
    )
    size = int(rng.integers(5, 8))
    return rng, spec, size


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradients(float64, seed):
    rng, spec, size = _random_conv(seed)
    x = _param(rng, (2, spec.in_channels, size, size))
    w = _param(rng, spec.weight_shape)
    ho, wo = spec.output_hw(size, size)
    cot = _cotangent(rng, (2, spec.out_channels, ho, wo))
    if spec.has_bias:
        b = _param(rng, (spec.out_channels,))
        err = finite_diff_check(
            lambda x, w, b: total(mul(conv2d(x, w, b, spec), cot)), [x, w, b], EPS
        )
    else:
        err = finite_diff_check(
            lambda x, w: total(mul(conv2d(x, w, None, spec), cot)), [x, w], EPS
        )
    assert err < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_avg_pool_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    kernel = int(rng.integers(2, 4))
    stride = int(rng.integers(1, kernel + 1))
    padding = int(rng.integers(0, 2)) if kernel > 2 else 0
    size = int(rng.integers(kernel + 1, 9))
    x = _param(rng, (1, 2, size, size))
    out = pool2d(x, "avg", kernel, stride, padding)
    cot = _cotangent(rng, out.shape)
    err = finite_diff_check(
        lambda x: total(mul(pool2d(x, "avg", kernel, stride, padding), cot)), [x], EPS
    )
    assert err < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_max_pool_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    kernel = int(rng.integers(2, 4))
    size = int(rng.integers(kernel + 1, 9))
    # distinct values at least 0.1 apart, so no perturbation changes the winner
    values = rng.permutation(2 * size * size).reshape(1, 2, size, size) * 0.1
    x = Tensor(values.astype(np.float64), requires_grad=True)
    out = pool2d(x, "max", kernel, 1)
    cot = _cotangent(rng, out.shape)
    err = finite_diff_check(lambda x: total(mul(pool2d(x, "max", kernel, 1), cot)), [x], EPS)
    assert err < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_gradients(float64, seed, mode):
    rng = np.random.default_rng(seed)
    factor = int(rng.integers(2, 4))
    size = int(rng.integers(2, 5))
    x = _param(rng, (1, 2, size, size))
    cot = _cotangent(rng, (1, 2, size * factor, size * factor))
    err = finite_diff_check(lambda x: total(mul(upsample(x, factor, mode), cot)), [x], EPS)
    assert err < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_pointwise_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    # keep relu inputs away from the kink
    magnitude = 0.1 + np.abs(rng.standard_normal(shape))
    a = Tensor(np.where(rng.random(shape) < 0.5, -magnitude, magnitude), requires_grad=True)
    b = _param(rng, shape)
    c = _param(rng, shape[:1] + (int(rng.integers(1, 3)),) + shape[2:])
    cot = _cotangent(rng, shape[:1] + (shape[1] + c.shape[1],) + shape[2:])
    err = finite_diff_check(
        lambda a, b, c: total(mul(concat([add(relu(a), mul(a, b)), mul(c, 2.5)]), cot)),
        [a, b, c],
        EPS,
    )
    assert err < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_stage_loss_gradients(float64, seed):
    rng = np.random.default_rng(seed)
    n, k, h = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
    stages = [_param(rng, (n, k, h, h)) for _ in range(int(rng.integers(1, 4)))]
    target = rng.random((n, k, h, h))
    weights = (rng.random((n, k)) < 0.7).astype(np.float64)
    err = finite_diff_check(lambda *s: stage_loss(list(s), target, weights), stages, EPS)
    assert err < GRAD_TOL


def test_weighted_squared_error_ignores_zero_weight_maps():
    pred = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    loss = weighted_squared_error(pred, np.zeros((1, 2, 2, 2)), np.array([[1.0, 0.0]]))
    assert loss.item() == pytest.approx(4.0)
    backward(loss)
    assert np.all(pred.grad[0, 1] == 0)
    assert np.all(pred.grad[0, 0] == 2.0)


@pytest.mark.parametrize("rate", [2, 3, 4])
def test_dilated_conv_equals_zero_inserted_kernel(float64, rate):
    rng = np.random.default_rng(rate)
    x = Tensor(rng.standard_normal((2, 3, 15, 15)))
    w = rng.standard_normal((4, 3, 3, 3))
    b = Tensor(rng.standard_normal(4))
    dilated = conv2d(x, Tensor(w), b, ConvSpec.same(3, 4, 3, dilation=rate))
    span = 2 * rate + 1
    sparse = np.zeros((4, 3, span, span))
    sparse[:, :, ::rate, ::rate] = w
    dense = conv2d(x, Tensor(sparse), b, ConvSpec.same(3, 4, span))
    np.testing.assert_allclose(dilated.data, dense.data, rtol=0, atol=1e-12)


def test_conv_matches_direct_loop(float64):
    rng = np.random.default_rng(5)
    spec = ConvSpec(2, 3, 3, stride=2, dilation=2, padding=2)
    x = rng.standard_normal((1, 2, 9, 9))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), spec).data
    padded = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    ho, wo = spec.output_hw(9, 9)
    expected = np.zeros((1, 3, ho, wo))
    for o in range(3):
        for i in range(ho):
            for j in range(wo):
                patch = padded[0, :, i * 2 : i * 2 + 5 : 2, j * 2 : j * 2 + 5 : 2]
                expected[0, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = mul(w, 2.0)
    assert not out.requires_grad
    assert out.parents == ()


def test_shape_only_allocates_nothing():
    with shape_only():
        x = Tensor(np.broadcast_to(np.zeros(()), (1, 1024, 32, 32)))
        w = Tensor(np.broadcast_to(np.zeros(()), (1024, 1024, 3, 3)))
        out = conv2d(x, w, None, ConvSpec.same(1024, 1024, 3, has_bias=False))
    assert out.shape == (1, 1024, 32, 32)


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError, match="equal shapes"):
        add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))), None, ConvSpec(3, 1, 1))


def test_first_adam_step_moves_by_lr():
    params = [np.array([1.0, -2.0, 3.0])]
    grads = [np.array([0.5, -4.0, 1e-3])]
    new, state = adam_step(params, grads, AdamState.zeros_like(params), lr=0.01)
    np.testing.assert_allclose(np.abs(new[0] - params[0]), 0.01, rtol=1e-4)
    assert state.step == 1
    # inputs untouched
    assert params[0].tolist() == [1.0, -2.0, 3.0]


def test_adam_minimises_a_quadratic(float64):
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    optimizer = Adam([w], lr=0.1)
    for _ in range(300):
        optimizer.zero_grad()
        backward(total(mul(w, w)))
        optimizer.step()
    assert np.abs(w.data).max() < 0.05


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        Adam([Tensor(np.zeros(1), requires_grad=True)], lr=0.0)


def _loop_conv(x, w, b, spec):
    """Direct evaluation of the dilated, grouped sum, one output value at a time."""
    (ph, pw), (sh, sw), rate = spec.padding, spec.stride, spec.dilation
    kh, kw = spec.kernel
    n, c, h, wd = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = spec.output_hw(h, wd)
    cg, og = c // spec.groups, spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, ho, wo))
    for img in range(n):
        for o in range(spec.out_channels):
            first = (o // og) * cg
            for i in range(ho):
                for j in range(wo):
                    value = 0.0 if b is None else b[o]
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                value += (
                                    padded[img, first + ci, i * sh + u * rate, j * sw + v * rate]
                                    * w[o, ci, u, v]
                                )
                    out[img, o, i, j] = value
    return out


@pytest.mark.parametrize(
    "spec",
    [
        ConvSpec(4, 4, 3, groups=4, padding=1),
        ConvSpec(4, 4, 3, groups=4, stride=2, dilation=2, padding=2),
        ConvSpec(4, 6, 3, groups=2, padding=1, has_bias=False),
        ConvSpec(6, 3, (1, 3), groups=3, stride=(2, 1), padding=(0, 1)),
        ConvSpec(2, 4, 3, groups=2, dilation=3, padding=3),
    ],
)
def test_grouped_conv_matches_direct_loop(float64, spec):
    rng = np.random.default_rng(spec.out_channels)
    x = rng.standard_normal((2, spec.in_channels, 7, 8))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(spec.out_channels) if spec.has_bias else None
    out = conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), spec).data
    np.testing.assert_allclose(out, _loop_conv(x, w, b, spec), rtol=0, atol=1e-12)


@pytest.mark.parametrize("size", [5, 8, 11])
@pytest.mark.parametrize("kernel", [1, 3, 5])
@pytest.mark.parametrize("stride", [1, 2, 3])
@pytest.mark.parametrize("dilation", [1, 2])
@pytest.mark.parametrize("padding", [0, 2])
def test_conv_output_extent(size, kernel, stride, dilation, padding):
    spec = ConvSpec(1, 2, kernel, stride=stride, dilation=dilation, padding=padding)
    extent = (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    x = Tensor(np.zeros((1, 1, size, size)))
    w = Tensor(np.zeros(spec.weight_shape))
    b = Tensor(np.zeros(2))
    if extent < 1:
        with pytest.raises(ValueError, match="not positive"):
            conv2d(x, w, b, spec)
        return
    assert conv2d(x, w, b, spec).shape == (1, 2, extent, extent)


def test_forward_is_bit_identical_on_repeat():
    rng = np.random.default_rng(12)
    spec = ConvSpec(3, 5, 3, stride=2, dilation=2, padding=2)
    x = Tensor(rng.standard_normal((2, 3, 9, 9)).astype(np.float32))
    w = Tensor(rng.standard_normal(spec.weight_shape).astype(np.float32))
    b = Tensor(rng.standard_normal(5).astype(np.float32))
    first = relu(pool2d(conv2d(x, w, b, spec), "max", 2, 1)).data
    second = relu(pool2d(conv2d(x, w, b, spec), "max", 2, 1)).data
    assert first.tobytes() == second.tobytes()
