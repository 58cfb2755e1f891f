import numpy as np
import pytest

from src.errors import InvalidGroupsError, ShapeMismatchError, SlopeLengthMismatchError
from src.network import functional as F
from src.network.functional import ActivationKind
from src.network.layers import Activation, Conv2d, LayerSpec, Node


def _adjoint_check(x, w, stride, dilation, groups):
    rng = np.random.default_rng(7)
    out, cache = F.conv2d_forward(x, w, None, stride, None, dilation, groups)
    g = rng.normal(size=out.shape).astype(np.float32)
    gx, gw, gb = F.conv2d_backward(g, cache)
    assert gb is None
    lhs = float(np.sum(out.astype(np.float64) * g))
    assert float(np.sum(x.astype(np.float64) * gx)) == pytest.approx(lhs, rel=1e-4, abs=1e-4)
    assert float(np.sum(w.astype(np.float64) * gw)) == pytest.approx(lhs, rel=1e-4, abs=1e-4)


def test_conv_ones_kernel_counts_neighbours():
    x = np.ones((1, 1, 5, 5), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out, _ = F.conv2d_forward(x, w)
    y = out[0, 0]
    assert y[2, 2] == 9
    assert y[0, 2] == 6
    assert y[0, 0] == 4
    assert y.shape == (5, 5)


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=(1, 4, 1, 1)).astype(np.float32)
    out, _ = F.conv2d_forward(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    expected[n, o, i, j] = np.sum(xp[n, :, 2 * i: 2 * i + 3, 2 * j: 2 * j + 3] * w[o]) + b[0, o, 0, 0]
    np.testing.assert_allclose(out, expected, rtol=1e-4, atol=1e-4)


def _naive_conv(x, w, b, stride, padding, dilation, groups):
    n, c_in, h, wd = x.shape
    c_out, c_per_group, k, _ = w.shape
    og = c_out // groups
    oh = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, c_out, oh, ow))
    for o in range(c_out):
        group = o // og
        channels = slice(group * c_per_group, (group + 1) * c_per_group)
        for i in range(oh):
            for j in range(ow):
                acc = np.zeros(n)
                for u in range(k):
                    for v in range(k):
                        r = i * stride + u * dilation
                        c = j * stride + v * dilation
                        acc += xp[:, channels, r, c] @ w[o, :, u, v].astype(np.float64)
                out[:, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


@pytest.mark.parametrize("seed", range(200))
def test_conv_matches_naive_oracle_on_random_geometry(seed):
    rng = np.random.default_rng(seed)
    groups = int(rng.integers(1, 4))
    c_in = groups * int(rng.integers(1, 3))
    c_out = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.integers(1, 4))
    dilation = int(rng.integers(1, 4))
    padding = int(rng.integers(0, dilation * (k - 1) + 1))
    reach = dilation * (k - 1) + 1 - 2 * padding
    h = int(rng.integers(max(reach, 1), 10))
    w_size = int(rng.integers(max(reach, 1), 10))
    x = rng.uniform(-1, 1, size=(int(rng.integers(1, 3)), c_in, h, w_size)).astype(np.float32)
    w = rng.uniform(-1, 1, size=(c_out, c_in // groups, k, k)).astype(np.float32)
    b = rng.uniform(-1, 1, size=c_out).astype(np.float32) if rng.random() < 0.5 else None

    out, _ = F.conv2d_forward(x, w, None if b is None else b.reshape(1, c_out, 1, 1), stride, padding, dilation, groups)
    expected = _naive_conv(x, w, b, stride, padding, dilation, groups)
    assert out.shape == expected.shape
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)


def test_dilated_ones_kernel_counts_reachable_taps():
    x = np.ones((1, 1, 5, 5), dtype=np.float32)
    w = np.ones((1, 1, 3, 3), dtype=np.float32)
    out, _ = F.conv2d_forward(x, w, padding=2, dilation=2)
    per_axis = np.array([2, 2, 3, 2, 2], dtype=np.float32)
    np.testing.assert_array_equal(out[0, 0], np.outer(per_axis, per_axis))


@pytest.mark.parametrize(
    "stride,dilation,groups,c_in,c_out",
    [(1, 1, 1, 3, 4), (2, 1, 1, 3, 4), (1, 2, 1, 2, 2), (1, 1, 4, 4, 4), (2, 1, 2, 4, 6)],
)
def test_conv_backward_is_the_adjoint(stride, dilation, groups, c_in, c_out):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, c_in, 7, 7)).astype(np.float32)
    w = rng.normal(size=(c_out, c_in // groups, 3, 3)).astype(np.float32)
    _adjoint_check(x, w, stride, dilation, groups)


def test_conv_bias_gradient_sums_the_output_gradient():
    x = np.ones((2, 1, 4, 4), dtype=np.float32)
    w = np.ones((3, 1, 1, 1), dtype=np.float32)
    out, cache = F.conv2d_forward(x, w, np.zeros((1, 3, 1, 1), np.float32))
    _, _, gb = F.conv2d_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(gb.ravel(), [32, 32, 32])


def test_conv_rejects_bad_groups_and_channels():
    with pytest.raises(InvalidGroupsError):
        Conv2d(6, 4, groups=4)
    with pytest.raises(ShapeMismatchError):
        F.conv2d_forward(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 1, 1), np.float32))
    with pytest.raises(InvalidGroupsError):
        F.conv2d_forward(np.zeros((1, 3, 4, 4), np.float32), np.zeros((2, 1, 1, 1), np.float32), groups=2)


def test_activation_values():
    x = np.array([-1.0, 0.0, 2.0], dtype=np.float32).reshape(1, 1, 1, 3)
    relu, _ = F.activation_forward(x, ActivationKind.RELU)
    elu, _ = F.activation_forward(x, ActivationKind.ELU)
    prelu, _ = F.activation_forward(x, ActivationKind.PRELU, np.array([0.25], np.float32))
    hs, _ = F.activation_forward(np.array([1.0, -4.0, 4.0], np.float32).reshape(1, 1, 1, 3), ActivationKind.HARDSWISH)
    np.testing.assert_allclose(relu.ravel(), [0, 0, 2])
    np.testing.assert_allclose(elu.ravel(), [np.expm1(-1.0), 0, 2], rtol=1e-6)
    np.testing.assert_allclose(prelu.ravel(), [-0.25, 0, 2])
    np.testing.assert_allclose(hs.ravel(), [4.0 / 6.0, 0, 4], rtol=1e-6)


@pytest.mark.parametrize("kind", [ActivationKind.ELU, ActivationKind.HARDSWISH, ActivationKind.PRELU])
def test_activation_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(2)
    x = rng.uniform(-2.5, 2.5, size=(1, 2, 3, 3))
    x[np.abs(x) < 0.05] = 0.5
    slope = np.array([0.1, 0.3]) if kind is ActivationKind.PRELU else None
    g = rng.normal(size=x.shape)
    _, cache = F.activation_forward(x, kind, slope)
    grad, _ = F.activation_backward(g, cache)
    eps = 1e-4

    def f(v):
        return np.asarray(F.activation_forward(v, kind, slope)[0], dtype=np.float64)

    numeric = (f(x + eps) - f(x - eps)) / (2 * eps) * g
    np.testing.assert_allclose(grad, numeric, rtol=1e-2, atol=1e-2)


def test_prelu_slope_gradient():
    x = np.array([-2.0, 3.0, -1.0], dtype=np.float32).reshape(1, 1, 1, 3)
    _, cache = F.activation_forward(x, ActivationKind.PRELU, np.array([0.5], np.float32))
    grad, grad_slope = F.activation_backward(np.ones_like(x), cache)
    np.testing.assert_allclose(grad.ravel(), [0.5, 1.0, 0.5])
    assert grad_slope.ravel().tolist() == [-3.0]


def test_prelu_slope_length_is_checked():
    with pytest.raises(SlopeLengthMismatchError):
        F.activation_forward(np.zeros((1, 3, 2, 2), np.float32), ActivationKind.PRELU, np.ones(2, np.float32))
    with pytest.raises(SlopeLengthMismatchError):
        Activation(ActivationKind.PRELU, 0)


def test_batchnorm_training_normalises_and_reports_running_stats():
    rng = np.random.default_rng(3)
    x = rng.normal(5.0, 2.0, size=(4, 2, 8, 8)).astype(np.float32)
    mean = np.zeros((1, 2, 1, 1), np.float32)
    var = np.ones((1, 2, 1, 1), np.float32)
    y, cache = F.batchnorm_forward(x, np.ones(2, np.float32), np.zeros(2, np.float32), mean, var, training=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
    np.testing.assert_allclose(y.std(axis=(0, 2, 3)), 1.0, atol=1e-3)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(var, 1.0)

    new_mean, new_var = F.batchnorm_running_stats(mean, var, cache)
    np.testing.assert_allclose(new_mean.ravel(), 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-4)
    unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(new_var.ravel(), 0.9 + 0.1 * unbiased, rtol=1e-4)


def test_batchnorm_inference_has_no_running_update():
    x = np.ones((1, 2, 2, 2), np.float32)
    _, cache = F.batchnorm_forward(x, np.ones(2), np.zeros(2), np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1)))
    assert F.batchnorm_running_stats(np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1)), cache) is None


def test_batchnorm_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 3, 3))
    gamma = np.array([1.5, 0.5])
    beta = np.array([0.1, -0.2])
    g = rng.normal(size=x.shape)

    def loss(v):
        y, _ = F.batchnorm_forward(v, gamma, beta, np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1)), training=True)
        return float(np.sum(y.astype(np.float64) * g))

    _, cache = F.batchnorm_forward(x, gamma, beta, np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1)), training=True)
    gx, _, _ = F.batchnorm_backward(g, cache)
    eps = 1e-3
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (0, 1, 1, 2)]:
        bump = np.zeros_like(x)
        bump[idx] = eps
        numeric = (loss(x + bump) - loss(x - bump)) / (2 * eps)
        assert gx[idx] == pytest.approx(numeric, rel=2e-2, abs=2e-2)


def test_bilinear_half_pixel_weights():
    m = F.bilinear_matrix(4, 2)
    np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])
    y, _ = F.upsample_forward(np.array([0.0, 1.0], np.float32).reshape(1, 1, 1, 2), 1, 4)
    np.testing.assert_allclose(y.ravel(), [0, 0.25, 0.75, 1])


def test_upsample_backward_is_the_adjoint():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 3, 5)).astype(np.float32)
    y, cache = F.upsample_forward(x, 7, 4)
    g = rng.normal(size=y.shape).astype(np.float32)
    gx = F.upsample_backward(g, cache)
    assert float(np.sum(y * g)) == pytest.approx(float(np.sum(x * gx)), rel=1e-4)


def test_concat_requires_matching_spatial_shape():
    with pytest.raises(ShapeMismatchError):
        F.concat_forward([np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3))])
    out, cache = F.concat_forward([np.zeros((1, 1, 2, 2)), np.ones((1, 2, 2, 2))])
    parts = F.concat_backward(out, cache)
    assert [p.shape[1] for p in parts] == [1, 2]


def test_layer_specs_round_trip_through_dicts():
    node = Node("a", Activation(ActivationKind.PRELU, 4, 1.0), ("input",))
    assert Node.from_dict(node.to_dict()) == node
    with pytest.raises(ValueError):
        LayerSpec.from_dict({"kind": "mystery"})


def _away_from_kinks(x):
    near = np.minimum(np.abs(x), np.minimum(np.abs(x - 3.0), np.abs(x + 3.0))) < 0.05
    return np.where(near, x + 0.25, x)


def _conv_case(rng):
    groups = int(rng.choice([1, 2]))
    stride = int(rng.choice([1, 2]))
    dilation = int(rng.choice([1, 2]))
    inputs = {
        "x": rng.normal(size=(2, 4, 6, 6)),
        "w": rng.normal(size=(4, 4 // groups, 3, 3)),
        "b": rng.normal(size=(1, 4, 1, 1)),
    }

    def forward(p):
        return F.conv2d_forward(p["x"], p["w"], p["b"], stride, None, dilation, groups)

    def backward(g, cache):
        gx, gw, gb = F.conv2d_backward(g, cache)
        return {"x": gx, "w": gw, "b": gb}

    return inputs, forward, backward


def _batchnorm_case(rng):
    inputs = {"x": rng.normal(1.0, 2.0, size=(2, 3, 3, 3)), "gamma": rng.uniform(0.5, 1.5, 3), "beta": rng.normal(size=3)}

    def forward(p):
        return F.batchnorm_forward(
            p["x"], p["gamma"], p["beta"], np.zeros((1, 3, 1, 1)), np.ones((1, 3, 1, 1)), training=True
        )

    def backward(g, cache):
        gx, ggamma, gbeta = F.batchnorm_backward(g, cache)
        return {"x": gx, "gamma": ggamma, "beta": gbeta}

    return inputs, forward, backward


def _activation_case(kind):
    def build(rng):
        inputs = {"x": _away_from_kinks(rng.uniform(-4.0, 4.0, size=(2, 3, 3, 3)))}
        if kind is ActivationKind.PRELU:
            inputs["slope"] = rng.uniform(0.05, 0.5, 3)

        def forward(p):
            return F.activation_forward(p["x"], kind, p.get("slope"))

        def backward(g, cache):
            gx, gslope = F.activation_backward(g, cache)
            return {"x": gx, "slope": gslope}

        return inputs, forward, backward

    return build


def _upsample_case(rng):
    inputs = {"x": rng.normal(size=(1, 2, 3, 5))}
    return inputs, lambda p: F.upsample_forward(p["x"], 7, 4), lambda g, cache: {"x": F.upsample_backward(g, cache)}


def _pool_case(rng):
    inputs = {"x": rng.normal(size=(2, 3, 4, 5))}
    return (
        inputs,
        lambda p: F.global_avg_pool_forward(p["x"]),
        lambda g, cache: {"x": F.global_avg_pool_backward(g, cache)},
    )


_GRADIENT_CASES = {
    "conv": _conv_case,
    "batchnorm": _batchnorm_case,
    "relu": _activation_case(ActivationKind.RELU),
    "elu": _activation_case(ActivationKind.ELU),
    "prelu": _activation_case(ActivationKind.PRELU),
    "hardswish": _activation_case(ActivationKind.HARDSWISH),
    "upsample": _upsample_case,
    "pool": _pool_case,
}


@pytest.mark.parametrize("seed", range(7))
@pytest.mark.parametrize("layer", sorted(_GRADIENT_CASES))
def test_backward_matches_central_differences(layer, seed):
    rng = np.random.default_rng([seed, len(layer)])
    inputs, forward, backward = _GRADIENT_CASES[layer](rng)
    out, cache = forward(inputs)
    g = rng.normal(size=out.shape)
    analytic = backward(g.astype(np.float32), cache)

    def loss(p):
        return float(np.sum(forward(p)[0].astype(np.float64) * g))

    eps = 1e-2
    for name, value in inputs.items():
        grad = np.asarray(analytic[name], dtype=np.float64).reshape(value.shape)
        for flat in rng.choice(value.size, size=min(4, value.size), replace=False):
            idx = np.unravel_index(flat, value.shape)
            bumped = dict(inputs)
            bumped[name] = value.copy()
            bumped[name][idx] += eps
            up = loss(bumped)
            bumped[name][idx] -= 2 * eps
            numeric = (up - loss(bumped)) / (2 * eps)
            assert abs(grad[idx] - numeric) <= 1e-3 * max(1.0, abs(numeric)), (name, idx, grad[idx], numeric)
