"""Saliency methods: Sensitivity, Integrated Gradients, RISE, Meaningful Perturbation, LRP.

Every method takes a model variant (a plain classifier or a
:class:`~calsal.calibration.CalibratedModel`), an image ``(H, W, C)`` and
the class to explain, and returns a :class:`SaliencyMap` whose values are
min-max normalised to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import Adam, batch_input_gradient, predict_batch


@dataclass
class SaliencyMap:
    values: np.ndarray
    explained_class: int
    method: str
    variant: str
    raw: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def normalize_minmax(raw) -> np.ndarray:
    """Rescale to [0, 1]; a constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def variant_tag(model) -> str:
    return getattr(model, "tag", "uncalibrated")


def make_map(raw, class_index, method, model, **info) -> SaliencyMap:
    return SaliencyMap(normalize_minmax(raw), int(class_index), method, variant_tag(model), raw, info)


# ---------------------------------------------------------------------------
# gradient methods

def sensitivity(model, x, class_index: int, absolute: bool = False) -> SaliencyMap:
    """Channel sum of the gradient of the class score with respect to the input."""
    grad = batch_input_gradient(model, np.asarray(x)[None], [class_index], "score")[0]
    raw = np.abs(grad).sum(axis=-1) if absolute else grad.sum(axis=-1, dtype=np.float64)
    return make_map(raw, class_index, "sensitivity", model)


@dataclass
class IgConfig:
    steps: int = 30
    references: tuple = ("black", "white")

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("IG needs at least one step")


def reference_image(name, shape) -> np.ndarray:
    if name == "black":
        return np.zeros(shape, dtype=np.float32)
    if name == "white":
        return np.ones(shape, dtype=np.float32)
    raise ValueError(f"unknown IG reference {name!r}")


def ig_attribution(model, x, class_index, reference, steps) -> np.ndarray:
    """Per-feature IG attribution ``(H, W, C)`` against one reference (right Riemann sum)."""
    x = np.asarray(x, dtype=np.float32)
    diff = x.astype(np.float64) - reference
    alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    path = (reference[None] + alphas[:, None, None, None] * diff[None]).astype(x.dtype)
    grads = batch_input_gradient(model, path, np.full(steps, class_index), "score")
    return diff * grads.astype(np.float64).mean(axis=0)


def integrated_gradients(model, x, class_index: int, cfg: IgConfig | None = None) -> SaliencyMap:
    """Average over references of the channel-summed path attributions."""
    cfg = cfg or IgConfig()
    maps = {}
    for name in cfg.references:
        ref = reference_image(name, np.shape(x)).astype(np.float64)
        maps[name] = ig_attribution(model, x, class_index, ref, cfg.steps).sum(axis=-1)
    raw = np.mean([maps[n] for n in cfg.references], axis=0)
    return make_map(raw, class_index, "integrated_gradients", model,
                    per_reference={n: float(m.sum()) for n, m in maps.items()})


# ---------------------------------------------------------------------------
# RISE

@dataclass
class RiseConfig:
    n_masks: int = 4000
    grid: int = 8
    p: float = 0.6

    def __post_init__(self):
        if self.n_masks < 1:
            raise ValueError("RISE needs at least one mask")
        if not 0 < self.p < 1:
            raise ValueError("keep probability must lie in (0, 1)")


def _keys_weights(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0))


def bicubic_matrix(n_out: int, n_in: int) -> np.ndarray:
    """``(n_out, n_in)`` bicubic (Keys, a=-0.5) resampling matrix, pixel-centre aligned, edges clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = _keys_weights(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bernoulli_grids(rng, n, grid, p) -> np.ndarray:
    """``(n, grid, grid)`` binary grids whose every cell is marginally Bernoulli(p).

    Draws are stratified per cell: each cell is kept in ``floor(p n)`` or
    ``floor(p n) + 1`` of the ``n`` grids (the latter with probability
    ``frac(p n)``), at random positions. Cells are independent of each other,
    and the per-cell keep count no longer fluctuates, which removes most of
    the sampling noise from the mask average.
    """
    base = int(np.floor(p * n))
    extra = rng.random((grid, grid)) < p * n - base
    keep = base + extra
    ranks = np.argsort(rng.random((n, grid, grid)), axis=0, kind="stable").argsort(axis=0, kind="stable")
    return (ranks < keep[None]).astype(np.float64)


def rise_masks(cfg: RiseConfig, size, seed) -> np.ndarray:
    """``(N, H, W)`` masks: Bernoulli(p) grids upsampled bicubically and clipped to [0, 1]."""
    h, w = size
    rng = np.random.default_rng(seed)
    grids = bernoulli_grids(rng, cfg.n_masks, cfg.grid, cfg.p)
    rows, cols = bicubic_matrix(h, cfg.grid), bicubic_matrix(w, cfg.grid)
    up = np.einsum("hi,nij,wj->nhw", rows, grids, cols, optimize=True)
    return np.clip(up, 0.0, 1.0).astype(np.float32)


def rise_from_scores(scores, masks, p) -> np.ndarray:
    """Score-weighted mask sum ``(1 / (p N)) sum_j score_j m_j``."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.tensordot(scores, masks.astype(np.float64), axes=(0, 0)) / (p * len(masks))


def masked_inputs(x, masks):
    return np.asarray(x, dtype=np.float32)[None] * masks[..., None]


def rise(model, x, class_index: int, cfg: RiseConfig | None = None, seed: int = 0,
         masks: np.ndarray | None = None) -> SaliencyMap:
    """RISE saliency; ``masks`` overrides sampling (used to inject degenerate masks)."""
    cfg = cfg or RiseConfig()
    if masks is None:
        masks = rise_masks(cfg, np.shape(x)[:2], seed)
    _, scores, _ = predict_batch(model, masked_inputs(x, masks))
    raw = rise_from_scores(scores[:, class_index], masks, cfg.p)
    return make_map(raw, class_index, "rise", model, seed=seed)


# ---------------------------------------------------------------------------
# Meaningful Perturbation

@dataclass
class MpConfig:
    """L1 weight, TV weight, Adam learning rate and step count.

    Both penalties are averaged over pixels, so the weights do not depend on
    the image resolution.
    """

    l1: float = 0.1
    tv: float = 0.4
    lr: float = 0.1
    steps: int = 600
    checkpoint_every: int = 50

    def __post_init__(self):
        if min(self.l1, self.tv, self.lr) <= 0 or self.steps < 1:
            raise ValueError("MP coefficients, learning rate and steps must be positive")


def mp_objective(model, xs, classes, masks: ad.Variable, cfg: MpConfig):
    """Per-sample objective node ``(B,)`` and its sum for a batch of masks ``(B, H, W)``."""
    b, h, w = masks.shape
    perturbed = ad.mul(ad.constant(xs), ad.reshape(masks, (b, h, w, 1)))
    _, scores = model.graph(perturbed)
    score = ad.pick(scores, classes)
    l1 = ad.total(1.0 - masks, axis=(1, 2))
    tv = ad.total(ad.absolute(masks[:, 1:, :] - masks[:, :-1, :]), axis=(1, 2)) + \
        ad.total(ad.absolute(masks[:, :, 1:] - masks[:, :, :-1]), axis=(1, 2))
    per_sample = score + (l1 * cfg.l1 + tv * cfg.tv) * (1.0 / (h * w))
    return per_sample, ad.total(per_sample)


def optimize_masks(model, xs, classes, cfg: MpConfig):
    """Projected Adam on masks for a batch; returns ``(best masks, objective history (steps+1, B))``.

    The history holds the objective of every iterate. Constant-step Adam
    oscillates slightly near the optimum, so the best iterate seen for each
    sample is returned rather than the last one. Samples do not interact: Adam is coordinate-wise and each mask only enters
    its own objective term.
    """
    xs = np.asarray(xs, dtype=np.float32)
    classes = np.asarray(classes)
    masks = np.ones(xs.shape[:3], dtype=np.float32)
    best = masks.copy()
    best_value = np.full(len(xs), np.inf)
    opt = Adam([masks], lr=cfg.lr)
    history = []
    for step in range(cfg.steps + 1):
        mv = ad.variable(masks)
        per_sample, obj = mp_objective(model, xs, classes, mv, cfg)
        value = per_sample.value.astype(np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"MP objective became non-finite at step {step}")
        history.append(value)
        better = value < best_value
        best[better] = masks[better]
        best_value[better] = value[better]
        if step == cfg.steps:
            break
        opt.step([ad.gradient(obj, mv)])
        np.clip(masks, 0.0, 1.0, out=masks)
    return best, np.array(history)


def meaningful_perturbation(model, x, class_index: int, cfg: MpConfig | None = None, seed: int = 0) -> SaliencyMap:
    """Optimise a deletion mask from ``m = 1``; saliency is ``1 - m``.

    The optimisation is deterministic (fixed start); ``seed`` is recorded only.
    """
    cfg = cfg or MpConfig()
    masks, history = optimize_masks(model, np.asarray(x)[None], [class_index], cfg)
    return mp_result(model, masks[0], history[:, 0], class_index, cfg, seed)


def mp_result(model, mask, history, class_index, cfg, seed=0) -> SaliencyMap:
    """Wrap an optimised mask; checkpoints track the best objective found so far."""
    incumbent = np.minimum.accumulate(history)
    return make_map(1.0 - mask.astype(np.float64), class_index, "meaningful_perturbation", model,
                    seed=seed, objective=float(incumbent[-1]),
                    checkpoints=incumbent[:: cfg.checkpoint_every].tolist(),
                    raw_checkpoints=history[:: cfg.checkpoint_every].tolist(), mask=mask)


# ---------------------------------------------------------------------------
# LRP

@dataclass
class LrpConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _stabilise(z, eps):
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def lrp_relevance(model, x, class_index: int, cfg: LrpConfig | None = None):
    """Input relevance ``(H, W, C)`` and the root relevance it was propagated from.

    The root is the variant's score for ``class_index``, placed at that
    class's logit of the base network; any calibration map only sets this
    magnitude. Biases neither receive nor absorb relevance, so each linear
    layer conserves relevance up to the stabiliser.
    """
    cfg = cfg or LrpConfig()
    base = getattr(model, "base", model)
    layers = base.layers[:-1]
    for i, layer in enumerate(layers):
        if layer.kind not in ("conv2d", "dense", "relu", "maxpool2d", "avgpool2d", "flatten", "scale"):
            raise ValueError(f"LRP does not support layer {i} of kind {layer.kind!r}")
    acts = [np.asarray(x, dtype=np.float64)[None]]
    pool_idx = {}
    for i, layer in enumerate(layers):
        a = acts[-1]
        if layer.kind == "maxpool2d":
            k = layer.params["kernel"]
            out = ad.maxpool_forward(a, k, layer.params.get("stride", k))
            pool_idx[i] = out
        else:
            out = ad.layer_graph(layer, ad.constant(a)).value
        acts.append(np.asarray(out, dtype=np.float64))
    _, scores, _ = predict_batch(model, np.asarray(x, dtype=np.float32)[None])
    root = float(scores[0, class_index])
    rel = np.zeros_like(acts[-1])
    rel[0, class_index] = root
    for i in range(len(layers) - 1, -1, -1):
        layer, a = layers[i], acts[i]
        kind = layer.kind
        if kind == "dense":
            w = layer.weights["W"].astype(np.float64)
            s = rel / _stabilise(a @ w, cfg.epsilon)
            rel = a * (s @ w.T)
        elif kind == "conv2d":
            w = layer.weights["W"].astype(np.float64)
            stride, pad = layer.params.get("stride", 1), layer.params.get("padding", 0)
            z = ad.conv2d_forward(a, w, None, stride, pad)
            s = rel / _stabilise(z, cfg.epsilon)
            rel = a * ad.conv2d_backward_input(s, w, a.shape, stride, pad)
        elif kind == "maxpool2d":
            k = layer.params["kernel"]
            rel = ad.maxpool_route(rel, a, pool_idx[i], k, layer.params.get("stride", k))
        elif kind == "avgpool2d":
            k = layer.params["kernel"]
            rel = ad.avgpool_backward(rel, a.shape, k, layer.params.get("stride", k))
        elif kind == "flatten":
            rel = rel.reshape(a.shape)
        # relu and scale pass relevance through unchanged
    return rel[0], root


def lrp(model, x, class_index: int, cfg: LrpConfig | None = None) -> SaliencyMap:
    rel, root = lrp_relevance(model, x, class_index, cfg)
    return make_map(rel.sum(axis=-1), class_index, "lrp", model, root=root, total=float(rel.sum()))


METHODS = {
    "sensitivity": lambda model, x, c, cfg=None, seed=0: sensitivity(model, x, c, **(cfg or {})),
    "integrated_gradients": lambda model, x, c, cfg=None, seed=0: integrated_gradients(model, x, c, cfg),
    "rise": lambda model, x, c, cfg=None, seed=0: rise(model, x, c, cfg, seed),
    "meaningful_perturbation": lambda model, x, c, cfg=None, seed=0: meaningful_perturbation(model, x, c, cfg, seed),
    "lrp": lambda model, x, c, cfg=None, seed=0: lrp(model, x, c, cfg),
}


def register_method(name, fn):
    """Add a method ``fn(model, x, class_index, cfg=None, seed=0) -> SaliencyMap``."""
    METHODS[name] = fn


def explain(method: str, model, x, class_index: int, cfg=None, seed: int = 0) -> SaliencyMap:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown saliency method {method!r}") from None
    return fn(model, x, class_index, cfg, seed)
