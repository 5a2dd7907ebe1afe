import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from calsal import autodiff as ad
from calsal.autodiff import LayerSpec, ShapeError, TapeError

from helpers import max_rel_error, random_net, score_function


def _layer(kind, rng, in_shape, **params):
    """A random instance of ``kind`` for per-sample input ``in_shape`` (float64 weights)."""
    if kind == "conv2d":
        k, cout = params.pop("k", 3), params.pop("cout", 2)
        w = rng.normal(size=(k, k, in_shape[2], cout))
        return LayerSpec("conv2d", params, {"W": w, "b": rng.normal(size=cout)})
    if kind == "dense":
        dout = params.pop("dout", 3)
        return LayerSpec("dense", {}, {"W": rng.normal(size=(in_shape[0], dout)), "b": rng.normal(size=dout)})
    if kind == "affine":
        c = in_shape[0]
        return LayerSpec("affine", {}, {"W": rng.normal(size=(c, c)), "b": rng.normal(size=c)})
    return LayerSpec(kind, params)


def _check_layer_gradient(layer, x, rng):
    r = rng.normal(size=ad.apply_layer(layer, x).shape)

    def f(v):
        return float(np.sum(r * ad.apply_layer(layer, v)))

    xv = ad.variable(x[None], np.float64)
    out = ad.total(ad.mul(ad.layer_graph(layer, xv), ad.constant(r[None])))
    grad = ad.gradient(out, xv)[0]
    fd = ad.finite_difference_gradient(f, x, 1e-4)
    return max_rel_error(grad, fd)


# ---------------------------------------------------------------------------
# forward examples

def test_relu_example():
    out = ad.apply_layer(LayerSpec("relu"), np.array([-1.0, 0.0, 2.0], dtype=np.float32))
    assert out.tolist() == [0.0, 0.0, 2.0]


def test_softmax_uniform_example():
    out = ad.apply_layer(LayerSpec("softmax"), np.zeros(3, dtype=np.float32))
    np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)


@given(hnp.arrays(np.float32, (5, 7, 1), elements=st.floats(0, 1, width=32)))
def test_identity_kernel_conv_returns_image(img):
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    w[1, 1, 0, 0] = 1.0
    layer = LayerSpec("conv2d", {"stride": 1, "padding": 1}, {"W": w, "b": np.zeros(1, dtype=np.float32)})
    np.testing.assert_array_equal(ad.apply_layer(layer, img), img)


def test_shape_mismatch_names_layer_and_shapes():
    w = np.zeros((3, 3, 2, 4), dtype=np.float32)
    layer = LayerSpec("conv2d", {"padding": 1}, {"W": w, "b": np.zeros(4, dtype=np.float32)})
    with pytest.raises(ShapeError) as err:
        ad.apply_layer(layer, np.zeros((5, 5, 3), dtype=np.float32), index=4)
    msg = str(err.value)
    assert "layer 4" in msg and "(5, 5, 3)" in msg and "2)" in msg


def test_unknown_layer_kind_rejected():
    with pytest.raises(ValueError):
        LayerSpec("dropout")


def test_conv_stride_and_padding_shapes():
    rng = np.random.default_rng(0)
    layer = _layer("conv2d", rng, (7, 6, 2), k=3, cout=4, stride=2, padding=1)
    assert ad.apply_layer(layer, rng.normal(size=(7, 6, 2))).shape == (4, 3, 4)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 5, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = ad.conv2d_forward(x, w, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[n, i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                  elements=st.floats(-50, 50)))
def test_softmax_is_a_probability_vector(z):
    p = ad.softmax(ad.constant(z)).value
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_float32_large_logits_stay_finite():
    p = ad.apply_layer(LayerSpec("softmax"), np.array([1000.0, 0.0, -1000.0], dtype=np.float32))
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-6


def test_apply_layer_is_pure():
    rng = np.random.default_rng(2)
    layer = _layer("conv2d", rng, (6, 6, 3), k=3, cout=5, padding=1)
    x = rng.random((6, 6, 3)).astype(np.float32)
    a, b = ad.apply_layer(layer, x), ad.apply_layer(layer, x)
    assert a.tobytes() == b.tobytes()


def test_float32_inputs_stay_float32():
    rng = np.random.default_rng(3)
    net = random_net(3, dtype=np.float32)
    logits, scores = net.graph(ad.constant(rng.random((2, 6, 6, 2)).astype(np.float32)))
    assert logits.value.dtype == np.float32 and scores.value.dtype == np.float32


# ---------------------------------------------------------------------------
# gradient examples

def test_gradient_of_sum_of_squares():
    x = ad.variable([1.0, 2.0], np.float64)
    g = ad.gradient(ad.total(x * x), x)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_gradient_of_softmax_component():
    x = ad.variable([[0.0, 0.0]], np.float64)
    g = ad.gradient(ad.softmax(x)[0, 0], x)
    np.testing.assert_allclose(g[0], [0.25, -0.25], atol=1e-12)


def test_relu_gradient_at_zero_is_zero():
    x = ad.variable([-1.0, 0.0, 1.0], np.float64)
    g = ad.gradient(ad.total(ad.relu(x)), x)
    assert g.tolist() == [0.0, 0.0, 1.0]


def test_gradient_rejects_leaf_not_on_tape():
    x = ad.variable([1.0], np.float64)
    other = ad.variable([2.0], np.float64)
    with pytest.raises(TapeError):
        ad.gradient(ad.total(x * x), other)


def test_gradient_rejects_non_scalar_output():
    x = ad.variable([1.0, 2.0], np.float64)
    with pytest.raises(TapeError):
        ad.gradient(x * x, x)


def test_gradient_accumulates_over_shared_nodes():
    x = ad.variable([3.0], np.float64)
    y = x * x
    g = ad.gradient(ad.total(y + y), x)
    np.testing.assert_allclose(g, [12.0])


def test_gradient_is_deterministic():
    net = random_net(5)
    x = np.random.default_rng(5).random((6, 6, 2))
    grads = []
    for _ in range(2):
        xv = ad.variable(x[None], np.float64)
        grads.append(ad.gradient(net.graph(xv)[1][0, 1], xv))
    assert grads[0].tobytes() == grads[1].tobytes()


def test_maxpool_tie_routes_to_first_maximum():
    x = ad.variable(np.ones((1, 2, 2, 1)), np.float64)
    g = ad.gradient(ad.total(ad.maxpool2d(x, 2, 2)), x)
    assert g.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


# ---------------------------------------------------------------------------
# finite differences

def test_finite_difference_square():
    g = ad.finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-3)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_constant():
    g = ad.finite_difference_gradient(lambda v: 7.0, np.ones((2, 3)), 1e-4)
    assert np.all(g == 0)


def test_finite_difference_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda v: 0.0, np.ones(2), 0.0)


# ---------------------------------------------------------------------------
# per-layer gradient property

LAYER_CASES = [
    ("conv2d", (5, 5, 2), dict(k=3, cout=2, stride=1, padding=1)),
    ("conv2d", (6, 5, 2), dict(k=2, cout=3, stride=2, padding=0)),
    ("conv2d", (5, 6, 1), dict(k=3, cout=2, stride=2, padding=1)),
    ("dense", (6,), {}),
    ("affine", (4,), {}),
    ("relu", (3, 4, 2), {}),
    ("maxpool2d", (4, 6, 2), dict(kernel=2, stride=2)),
    ("maxpool2d", (5, 5, 1), dict(kernel=3, stride=1)),
    ("avgpool2d", (4, 4, 3), dict(kernel=2, stride=2)),
    ("avgpool2d", (5, 5, 1), dict(kernel=3, stride=2)),
    ("flatten", (2, 3, 2), {}),
    ("softmax", (5,), {}),
    ("log", (5,), dict(floor=1e-12)),
    ("scale", (3, 2), dict(factor=-2.5)),
]


@pytest.mark.parametrize("kind,shape,params", LAYER_CASES, ids=[f"{c[0]}-{i}" for i, c in enumerate(LAYER_CASES)])
@given(seed=st.integers(0, 10_000))
def test_layer_gradient_matches_finite_differences(kind, shape, params, seed):
    rng = np.random.default_rng(seed)
    layer = _layer(kind, rng, shape, **dict(params))
    if kind == "log":
        x = rng.uniform(0.1, 2.0, size=shape)
    else:
        x = rng.normal(size=shape)
        if kind in ("relu", "maxpool2d"):
            # keep clear of kinks and ties so central differences are exact enough
            x = np.sign(x) * (np.abs(x) + 0.01) + rng.permutation(x.size).reshape(shape) * 1e-3
    assert _check_layer_gradient(layer, x, rng) < 1e-3


@given(seed=st.integers(0, 10_000))
def test_random_network_input_gradient_matches_finite_differences(seed):
    net = random_net(seed)
    x = np.random.default_rng(seed).random((6, 6, 2))
    xv = ad.variable(x[None], np.float64)
    grad = ad.gradient(net.graph(xv)[1][0, 0], xv)[0]
    fd = ad.finite_difference_gradient(score_function(net, 0), x, 1e-4)
    assert max_rel_error(grad, fd) < 1e-3


def test_weight_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    net = random_net(7)
    x = rng.random((2, 6, 6, 2))
    conv = net.layers[0]
    w0 = conv.weights["W"].copy()

    def f(w):
        conv.weights["W"] = w
        return float(net.graph(ad.constant(x))[1].value[:, 0].sum())

    params = [{k: ad.variable(v, np.float64) for k, v in layer.weights.items()} for layer in net.layers]
    _, scores = net.graph(ad.constant(x), params)
    grad = ad.gradient(ad.total(scores[:, 0]), params[0]["W"])
    fd = ad.finite_difference_gradient(f, w0.copy(), 1e-5)
    conv.weights["W"] = w0
    assert max_rel_error(grad, fd) < 1e-3
