"""Comparison metrics for saliency maps: SSIM, deletion curves, BTR, Otsu-TV, Lipschitz stability."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .model import predict_batch
from .saliency import SaliencyMap, explain
from .segmentation import slic_superpixels

SSIM_K1, SSIM_K2 = 0.01, 0.03


def _values(m):
    return np.asarray(m.values if isinstance(m, SaliencyMap) else m, dtype=np.float64)


# ---------------------------------------------------------------------------
# SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-inside Gaussian windows.

    The window shrinks to the largest odd size that fits maps smaller than 11 pixels.
    """
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    size = min(window, *x.shape)
    size -= 1 - size % 2
    kern = gaussian_window(size, sigma)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2

    def local(img):
        view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
        return np.tensordot(view, kern, axes=([2, 3], [0, 1]))

    mx, my = local(x), local(y)
    vx = local(x * x) - mx * mx
    vy = local(y * y) - my * my
    cxy = local(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


# ---------------------------------------------------------------------------
# deletion

@dataclass
class DeletionCurve:
    fractions: np.ndarray
    scores: np.ndarray
    area: float
    predicted_class: int = -1
    clean_score: float = float("nan")


def deletion_area(curve) -> float:
    """Trapezoidal area under normalised score versus deleted fraction."""
    f = np.asarray(curve.fractions if hasattr(curve, "fractions") else curve[0], dtype=np.float64)
    s = np.asarray(curve.scores if hasattr(curve, "scores") else curve[1], dtype=np.float64)
    return float(np.sum((f[1:] - f[:-1]) * (s[1:] + s[:-1]) / 2))


def blurred_image(x, size: int = 11, sigma: float = 10.0) -> np.ndarray:
    """Gaussian blur with a ``size x size`` kernel and edge-replicated borders, per channel."""
    x = np.asarray(x, dtype=np.float64)
    radius = size // 2
    sig = (sigma, sigma) + (0,) * (x.ndim - 2)
    return ndimage.gaussian_filter(x, sigma=sig, truncate=radius / sigma, mode="nearest").astype(np.float32)


def deletion_order(saliency) -> np.ndarray:
    """Pixel indices (row-major) by decreasing saliency; ties keep row-major order."""
    return np.argsort(-_values(saliency).ravel(), kind="stable")


def deletion_images(x, order, steps: int = 100, blurred=None) -> np.ndarray:
    """``(steps + 1, H, W, C)`` images with the first ``round(t HW / steps)`` ranked pixels blurred."""
    x = np.asarray(x, dtype=np.float32)
    h, w = x.shape[:2]
    blurred = blurred_image(x) if blurred is None else blurred
    rank = np.empty(h * w, dtype=np.int64)
    rank[order] = np.arange(h * w)
    counts = np.round(np.arange(steps + 1) * (h * w) / steps).astype(np.int64)
    gone = (rank[None, :] < counts[:, None]).reshape(steps + 1, h, w, 1)
    return np.where(gone, blurred[None], x[None])


def curve_from_scores(fractions, scores, predicted_class, clean_score) -> DeletionCurve:
    norm = np.asarray(scores, dtype=np.float64) / clean_score
    curve = DeletionCurve(np.asarray(fractions, dtype=np.float64), norm, 0.0, int(predicted_class), float(clean_score))
    curve.area = deletion_area(curve)
    return curve


def deletion_curve(model, x, saliency, steps: int = 100) -> DeletionCurve:
    """Normalised score of the clean-image predicted class as top-ranked pixels are blurred out."""
    x = np.asarray(x, dtype=np.float32)
    if _values(saliency).shape != x.shape[:2]:
        raise ValueError("saliency shape does not match the image")
    images = deletion_images(x, deletion_order(saliency), steps)
    _, scores, _ = predict_batch(model, images)
    c = int(np.argmax(scores[0]))
    return curve_from_scores(np.arange(steps + 1) / steps, scores[:, c], c, scores[0, c])


def random_order_images(x, segmentation, seed, orders: int = 5, blurred=None):
    """Images deleting whole segments in ``orders`` random orders.

    Returns ``(images, fractions)`` with ``orders * (K + 1)`` images; fraction
    is the share of pixels removed after each segment.
    """
    x = np.asarray(x, dtype=np.float32)
    blurred = blurred_image(x) if blurred is None else blurred
    labels = segmentation.labels
    K = segmentation.K
    sizes = np.bincount(labels.ravel(), minlength=K)
    rng = np.random.default_rng(seed)
    images, fractions = [], []
    for _ in range(orders):
        perm = rng.permutation(K)
        pos = np.empty(K, dtype=np.int64)
        pos[perm] = np.arange(K)
        seg_rank = pos[labels]  # step at which each pixel's segment goes
        gone = seg_rank[None] < np.arange(K + 1)[:, None, None]
        images.append(np.where(gone[..., None], blurred[None], x[None]))
        fractions.append(np.concatenate([[0.0], np.cumsum(sizes[perm]) / labels.size]))
    return np.concatenate(images), np.array(fractions)


def average_random_curves(scores, fractions, steps: int = 100) -> DeletionCurve:
    """Resample each order's normalised curve onto ``t / steps`` and average pointwise.

    ``scores`` is ``(orders * (K + 1), C)``; the first row of each order is the
    clean image, which fixes the explained (predicted) class.
    """
    orders, n = fractions.shape
    scores = np.asarray(scores, dtype=np.float64).reshape(orders, n, -1)
    c = int(np.argmax(scores[0, 0]))
    clean = scores[0, 0, c]
    grid = np.arange(steps + 1) / steps
    curves = [np.interp(grid, fractions[o], scores[o, :, c] / clean) for o in range(orders)]
    curve = DeletionCurve(grid, np.mean(curves, axis=0), 0.0, c, float(clean))
    curve.area = deletion_area(curve)
    return curve


def random_baseline_curve(model, x, seed: int = 0, orders: int = 5, target_k: int = 100,
                          steps: int = 100, segmentation=None) -> DeletionCurve:
    """Deletion curve for random superpixel orders, averaged over ``orders`` permutations."""
    seg = segmentation or slic_superpixels(x, target_k)
    images, fractions = random_order_images(x, seg, seed, orders)
    _, scores, _ = predict_batch(model, images)
    return average_random_curves(scores, fractions, steps)


# ---------------------------------------------------------------------------
# per-sample records and BTR

@dataclass
class EvalRecord:
    sample_id: int
    method: str
    variant: str
    label: int = -1
    predicted_class: int = -1
    ssim: float = float("nan")
    deletion_area: float = float("nan")
    random_area: float = float("nan")
    otsu_threshold: float = float("nan")
    otsu_tv: int = -1
    extra: dict = field(default_factory=dict)


def btr_ratio(records, method: str, variant: str) -> float:
    """Share of samples whose deletion area is strictly below the random-baseline area."""
    chosen = [r for r in records if r.method == method and r.variant == variant]
    if not chosen:
        raise ValueError(f"no records for method={method!r}, variant={variant!r}")
    wins = sum(1 for r in chosen if r.deletion_area < r.random_area)
    return wins / len(chosen)


# ---------------------------------------------------------------------------
# Otsu-binarised total variation

OTSU_BINS = 256


def histogram_bins(values, bins: int = OTSU_BINS) -> np.ndarray:
    """Bin index ``floor(v * bins)`` with 1.0 folded into the last bin."""
    return np.minimum(np.floor(np.asarray(values, dtype=np.float64) * bins), bins - 1).astype(np.int64)


def otsu_threshold(saliency, bins: int = OTSU_BINS) -> float:
    """Threshold maximising between-class variance on a ``bins``-bin histogram of [0, 1].

    Returns the lower edge of the first foreground bin, so ``v >= t`` selects
    the foreground. Ties go to the lowest threshold; a map occupying one bin
    returns 1.0.
    """
    v = _values(saliency)
    if v.min() < 0 or v.max() > 1:
        raise ValueError("saliency values must lie in [0, 1]")
    hist = np.bincount(histogram_bins(v, bins).ravel(), minlength=bins).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return 1.0
    n = hist.sum()
    levels = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(hist)[:-1]  # pixels below threshold k = 1..bins-1
    s0 = np.cumsum(hist * levels)[:-1]
    w1 = n - w0
    s1 = (hist * levels).sum() - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        between = (w0 / n) * (w1 / n) * (s1 / w1 - s0 / w0) ** 2
    between[(w0 == 0) | (w1 == 0)] = -np.inf
    k = int(np.argmax(between)) + 1
    return k / bins


def binary_total_variation(saliency, threshold: float) -> int:
    """Number of 4-neighbour pixel pairs whose binarised (``v >= threshold``) values differ."""
    b = _values(saliency) >= threshold
    return int(np.count_nonzero(b[1:, :] != b[:-1, :]) + np.count_nonzero(b[:, 1:] != b[:, :-1]))


def otsu_tv(saliency) -> tuple[float, int]:
    t = otsu_threshold(saliency)
    return t, binary_total_variation(saliency, t)


# ---------------------------------------------------------------------------
# stability

def ball_perturbations(rng, shape, radius, count):
    """Gaussian directions with radii drawn uniformly in volume from the L2 ball."""
    d = int(np.prod(shape))
    out = []
    while len(out) < count:
        g = rng.standard_normal(shape)
        norm = np.linalg.norm(g)
        if norm == 0:
            continue
        out.append(g / norm * radius * rng.random() ** (1.0 / d))
    return out


def lipschitz_estimate(model, method, x, radius: float = 0.05, neighbors: int = 40, seed: int = 0,
                       method_cfg=None, class_index: int | None = None) -> float:
    """Largest ratio ``||S(x) - S(x')|| / ||x - x'||`` over perturbed copies ``x'`` of ``x``.

    ``method`` is a registered method name or a callable with the method
    signature. The explained class is fixed to the clean prediction and the
    method seed is shared by ``x`` and its neighbours.
    """
    if radius <= 0 or neighbors < 1:
        raise ValueError("radius must be positive and neighbors >= 1")
    x = np.asarray(x, dtype=np.float32)
    fn = (lambda m, img, c: explain(method, m, img, c, method_cfg, seed)) if isinstance(method, str) \
        else (lambda m, img, c: method(m, img, c, method_cfg, seed))
    if class_index is None:
        _, scores, _ = predict_batch(model, x[None])
        class_index = int(np.argmax(scores[0]))
    base = _values(fn(model, x, class_index))
    rng = np.random.default_rng(seed)
    best = 0.0
    done = 0
    while done < neighbors:
        delta = ball_perturbations(rng, x.shape, radius, 1)[0]
        xp = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
        dist = np.linalg.norm(xp.astype(np.float64) - x)
        if dist == 0:
            continue  # clamping removed the whole perturbation: resample
        other = _values(fn(model, xp, class_index))
        best = max(best, float(np.linalg.norm(base - other) / dist))
        done += 1
    return best
