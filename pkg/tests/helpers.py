"""Independent oracles and small model builders shared by the tests."""

import numpy as np

from calsal import autodiff as ad
from calsal.autodiff import LayerSpec
from calsal.data import Dataset, SynthSpec, generate_synthetic_dataset
from calsal.model import ClassifierModel, TrainConfig, default_architecture, train_classifier


# ---------------------------------------------------------------------------
# model builders

def _conv(rng, k, cin, cout, stride, pad, dtype):
    w = rng.normal(0, 1 / np.sqrt(k * k * cin), size=(k, k, cin, cout)).astype(dtype)
    b = rng.normal(0, 0.1, size=cout).astype(dtype)
    return LayerSpec("conv2d", {"stride": stride, "padding": pad}, {"W": w, "b": b})


def _dense(rng, din, dout, dtype, bias=True):
    w = rng.normal(0, 1 / np.sqrt(din), size=(din, dout)).astype(dtype)
    b = rng.normal(0, 0.1, size=dout).astype(dtype) if bias else np.zeros(dout, dtype=dtype)
    return LayerSpec("dense", {}, {"W": w, "b": b})


def random_net(seed, dtype=np.float64, input_shape=(6, 6, 2), n_classes=3, bias=True) -> ClassifierModel:
    """A random conv net drawing kernel size, stride, padding, pooling kind and depth from ``seed``."""
    rng = np.random.default_rng(seed)
    c = input_shape[2]
    layers = []
    shape = tuple(input_shape)

    def push(layer):
        nonlocal shape
        layers.append(layer)
        shape = ad.output_shape(layer, shape)

    k, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    pad = min(pad, k // 2)  # no output position that sees padding only
    push(_conv(rng, k, c, int(rng.integers(2, 5)), stride, pad, dtype))
    push(LayerSpec("relu"))
    pool = rng.choice(["max", "avg", "none"])
    if pool != "none" and min(shape[:2]) >= 2:
        push(LayerSpec(f"{pool}pool2d", {"kernel": 2, "stride": 2}))
    if rng.random() < 0.5 and min(shape[:2]) >= 2:
        push(_conv(rng, 2, shape[2], int(rng.integers(2, 4)), 1, int(rng.integers(0, 2)), dtype))
        push(LayerSpec("relu"))
    push(LayerSpec("flatten"))
    hidden = int(rng.integers(3, 7))
    push(_dense(rng, shape[0], hidden, dtype, bias))
    push(LayerSpec("relu"))
    push(_dense(rng, hidden, n_classes, dtype, bias))
    layers.append(LayerSpec("softmax"))
    if not bias:
        for layer in layers:
            if "b" in layer.weights:
                layer.weights["b"][:] = 0
    return ClassifierModel(layers, input_shape)


def linear_model(W, b, input_shape=None) -> ClassifierModel:
    """flatten + dense(W, b) + softmax; ``W`` is ``(D, C)``."""
    W = np.asarray(W)
    input_shape = input_shape or (W.shape[0],)
    layers = [LayerSpec("flatten")] if len(input_shape) > 1 else []
    layers += [LayerSpec("dense", {}, {"W": W, "b": np.asarray(b, dtype=W.dtype)}), LayerSpec("softmax")]
    return ClassifierModel(layers, input_shape)


def constant_model(input_shape=(8, 8, 3), n_classes=2, bias=None, dtype=np.float32) -> ClassifierModel:
    """Scores independent of the input: all dense weights zero."""
    d = int(np.prod(input_shape))
    b = np.zeros(n_classes) if bias is None else np.asarray(bias)
    return linear_model(np.zeros((d, n_classes), dtype=dtype), b.astype(dtype), input_shape)


def square_model(box, shape=(16, 16, 3), gain=20.0, offset=10.0) -> ClassifierModel:
    """Two-class model whose class-0 logit is ``gain * mean(box pixels) - offset``."""
    h, w, c = shape
    r0, c0, r1, c1 = box
    weights = np.zeros((h, w, c, 2), dtype=np.float32)
    weights[r0:r1, c0:c1, :, 0] = gain / ((r1 - r0) * (c1 - c0) * c)
    return linear_model(weights.reshape(-1, 2), np.array([-offset, 0.0], dtype=np.float32), shape)


def train_toy_cnn(seed=0):
    spec = SynthSpec(n_classes=2, image_size=(16, 16, 3), per_class=150, noise=0.2, shape_size=(5, 8))
    data = generate_synthetic_dataset(spec, seed)
    model = default_architecture((16, 16, 3), 2, seed, widths=(8, 16))
    model = train_classifier(TrainConfig(epochs=4, batch_size=32, lr=3e-3, seed=seed), data, model)
    return model, data


def square_dataset(n, seed, size=16, side=5):
    """Half the images hold one bright square on a dark textured background (class 0)."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 0.35, size=(n, size, size, 3)).astype(np.float32)
    labels = np.arange(n) % 2
    boxes = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        r, c = rng.integers(0, size - side + 1, size=2)
        boxes[i] = (r, c, r + side, c + side)
        if labels[i] == 0:
            images[i, r:r + side, c:c + side] = 1.0
    return Dataset(images, labels, 2, boxes)


def train_square_detector(seed=0):
    """Accurate but short of softmax saturation, where the score gradient vanishes."""
    data = square_dataset(400, seed)
    model = default_architecture((16, 16, 3), 2, seed, widths=(8, 16))
    model = train_classifier(TrainConfig(epochs=3, batch_size=32, lr=3e-3, seed=seed), data, model)
    return model, square_dataset(40, seed + 1)


# ---------------------------------------------------------------------------
# gradient oracle helpers

def max_rel_error(grad, fd, floor=1e-5):
    grad, fd = np.asarray(grad, dtype=np.float64), np.asarray(fd, dtype=np.float64)
    return float(np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), floor)))


def score_function(model, class_index, at="score"):
    """Scalar ``x -> F(x)_c`` (or the logit) evaluated in the input's own precision."""
    def f(x):
        logits, scores = model.graph(ad.constant(np.asarray(x)[None]))
        return float((scores if at == "score" else logits).value[0, class_index])
    return f


# ---------------------------------------------------------------------------
# calibration samplers and oracles

def calibrated_logits(n, n_classes=5, seed=0, scale=2.0):
    """Logits whose softmax is the true posterior: labels are drawn from it."""
    rng = np.random.default_rng(seed)
    z = rng.normal(0, scale, size=(n, n_classes))
    p = ad.softmax_array(z)
    u = rng.random(n)[:, None]
    labels = (u > np.cumsum(p, axis=1)).sum(axis=1)
    return z, np.minimum(labels, n_classes - 1)


def calibrated_confidences(n, seed=0, lo=0.5):
    """Confidence ``u ~ U[lo, 1]``, correct with probability ``u``."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(lo, 1.0, size=n)
    return u, rng.random(n) < u


def ece_direct(confidences, correct, n_bins=15):
    """Binned ECE by explicit per-bin loops over ``(lo, hi]`` bins (0 joins the first bin)."""
    n = len(confidences)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [i for i in range(n)
                   if (lo < confidences[i] <= hi) or (b == 0 and confidences[i] == 0.0)]
        if members:
            acc = sum(float(correct[i]) for i in members) / len(members)
            conf = sum(float(confidences[i]) for i in members) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total


# ---------------------------------------------------------------------------
# evaluation oracles

def ssim_bruteforce(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def otsu_exhaustive(values, bins=256):
    """Try every threshold ``k / bins`` and keep the lowest maximiser of the between-class variance."""
    levels = np.minimum(np.floor(np.asarray(values, dtype=np.float64).ravel() * bins), bins - 1)
    if len(np.unique(levels)) < 2:
        return 1.0
    best, best_k = -1.0, None
    for k in range(1, bins):
        low, high = levels[levels < k], levels[levels >= k]
        if len(low) == 0 or len(high) == 0:
            continue
        w0, w1 = len(low) / len(levels), len(high) / len(levels)
        between = w0 * w1 * (low.mean() - high.mean()) ** 2
        if between > best:
            best, best_k = between, k
    return best_k / bins


def tv_loops(values, threshold):
    h, w = values.shape
    count = 0
    for i in range(h):
        for j in range(w):
            here = values[i, j] >= threshold
            if i + 1 < h and here != (values[i + 1, j] >= threshold):
                count += 1
            if j + 1 < w and here != (values[i, j + 1] >= threshold):
                count += 1
    return count


def refined_riemann(fn, steps, refine=10):
    """Midpoint Riemann sum of ``fn`` on [0, 1] at ``refine`` times the curve resolution."""
    fine_n = steps * refine
    mids = (np.arange(fine_n) + 0.5) / fine_n
    return float(np.mean(fn(mids)))
