"""Post-hoc calibrators and confidence-calibration error estimators."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .model import Adam

GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass
class Identity:
    """The do-nothing calibrator, used as a control variant."""

    def graph(self, logits: Variable) -> Variable:
        return logits


@dataclass
class TemperatureScaler:
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"temperature must be positive, got {self.T}")

    def graph(self, logits: Variable) -> Variable:
        return ad.scale(logits, 1.0 / self.T)


@dataclass
class DirichletMap:
    """``softmax(W ln(max(p, eps_log)) + b)`` on a probability vector ``p``."""

    W: np.ndarray
    b: np.ndarray
    eps_log: float = 1e-12

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("Dirichlet parameters must be finite")

    @classmethod
    def identity(cls, n_classes: int, eps_log: float = 1e-12) -> "DirichletMap":
        return cls(np.eye(n_classes), np.zeros(n_classes), eps_log)

    def graph(self, logits: Variable) -> Variable:
        dtype = logits.value.dtype
        log_scores = ad.log(ad.softmax(logits), self.eps_log)
        return ad.affine(log_scores, ad.constant(self.W.astype(dtype)), ad.constant(self.b.astype(dtype)))


class CalibratedModel:
    """A classifier whose scores pass through a calibration map.

    Exposes the same ``graph``/``n_classes``/``input_shape`` surface as
    :class:`calsal.model.ClassifierModel`, so ``predict`` and
    ``input_gradient`` work on it unchanged and gradients flow through the map.
    """

    def __init__(self, base, calibrator=None, tag: str | None = None):
        self.base = base
        self.calibrator = calibrator if calibrator is not None else Identity()
        self.tag = tag or _default_tag(self.calibrator)

    @property
    def n_classes(self):
        return self.base.n_classes

    @property
    def input_shape(self):
        return self.base.input_shape

    @property
    def layers(self):
        return self.base.layers

    def calibrated_logits(self, base_logits: Variable) -> Variable:
        return self.calibrator.graph(base_logits)

    def graph(self, x: Variable, params=None):
        logits = self.calibrator.graph(self.base.logits_graph(x))
        return logits, ad.softmax(logits)

    def logits_graph(self, x: Variable, params=None):
        return self.graph(x)[0]

    def scores_from_base_logits(self, base_logits: np.ndarray) -> np.ndarray:
        """Calibrated scores for precomputed base-model logits ``(N, C)``."""
        return ad.softmax(self.calibrator.graph(ad.constant(base_logits))).value

    def base_logits(self, xs):
        return self.base.base_logits(xs)


def _default_tag(calibrator):
    return {Identity: "identity", TemperatureScaler: "temperature", DirichletMap: "dirichlet"}.get(
        type(calibrator), type(calibrator).__name__.lower())


def as_variant(model, tag="uncalibrated") -> CalibratedModel:
    if isinstance(model, CalibratedModel):
        return model
    return CalibratedModel(model, Identity(), tag)


# ---------------------------------------------------------------------------
# temperature scaling

def nll(logits: np.ndarray, labels, T: float = 1.0) -> float:
    """Mean negative log-likelihood of ``softmax(logits / T)``."""
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(log_norm - z[np.arange(len(z)), np.asarray(labels)]))


def _golden_section(f, lo, hi, tol):
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2


def fit_temperature(logits, labels, lo: float = 0.05, hi: float = 20.0, tol: float = 1e-4) -> TemperatureScaler:
    """Temperature minimising holdout NLL, by golden-section search on ``[lo, hi]``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise ValueError("need at least 2 holdout samples")
    if len(np.unique(labels)) < 2:
        raise ValueError("degenerate holdout set: only one class present")
    T = _golden_section(lambda t: nll(logits, labels, t), lo, hi, tol)
    # within tolerance of an optimum at 1 the bracket midpoint can be a hair worse than 1 itself
    if lo <= 1.0 <= hi and nll(logits, labels, 1.0) < nll(logits, labels, T):
        T = 1.0
    return TemperatureScaler(T)


def apply_temperature(scaler: TemperatureScaler, logits) -> np.ndarray:
    return ad.softmax_array(np.asarray(logits, dtype=np.float64) / scaler.T)


# ---------------------------------------------------------------------------
# Dirichlet calibration

@dataclass
class RegConfig:
    off_diagonal: float = 1e-3
    bias: float = 1e-3
    lr: float = 1e-2
    steps: int = 2000
    patience: int = 50
    min_rel_improvement: float = 1e-7
    eps_log: float = 1e-12


def _dirichlet_objective(log_scores, labels, W, b, reg):
    z = ad.affine(ad.constant(log_scores), W, b)
    data_nll = ad.neg(ad.mean(ad.pick(ad.log_softmax(z), labels)))
    off = W * ad.constant(1.0 - np.eye(W.shape[0]))
    penalty = ad.total(off * off) * reg.off_diagonal + ad.total(b * b) * reg.bias
    return data_nll + penalty, data_nll


def fit_dirichlet(scores, labels, reg: RegConfig | None = None) -> DirichletMap:
    """Fit ``(W, b)`` by full-batch Adam from ``(I, 0)``.

    Minimises mean NLL plus L2 penalties on off-diagonal ``W`` and on ``b``.
    The best iterate seen is returned, so the result never scores worse than
    the identity starting point.
    """
    reg = reg or RegConfig()
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = scores.shape[1]
    log_scores = np.log(np.maximum(scores, reg.eps_log))
    W = np.eye(n_classes)
    b = np.zeros(n_classes)
    opt = Adam([W, b], lr=reg.lr)
    best = (math.inf, W.copy(), b.copy())
    window = []
    for step in range(reg.steps):
        Wv, bv = ad.variable(W, np.float64), ad.variable(b, np.float64)
        obj, _ = _dirichlet_objective(log_scores, labels, Wv, bv, reg)
        value = float(obj.value)
        if not math.isfinite(value):
            raise FloatingPointError(f"Dirichlet objective became {value} at step {step}")
        if value < best[0]:
            best = (value, W.copy(), b.copy())
        window.append(value)
        if len(window) > reg.patience:
            old = window.pop(0)
            if (old - value) / max(abs(old), 1e-300) < reg.min_rel_improvement:
                break
        opt.step(ad.gradient(obj, [Wv, bv]))
    return DirichletMap(best[1], best[2], reg.eps_log)


def apply_dirichlet(dmap: DirichletMap, scores) -> np.ndarray:
    log_scores = np.log(np.maximum(np.asarray(scores, dtype=np.float64), dmap.eps_log))
    return ad.softmax_array(log_scores @ dmap.W.T + dmap.b)


def dirichlet_nll(dmap: DirichletMap, scores, labels) -> float:
    probs = apply_dirichlet(dmap, scores)
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(probs)), np.asarray(labels)], 1e-300))))


# ---------------------------------------------------------------------------
# calibration error

def ece_binned(confidences, correct, n_bins: int = 15) -> float:
    """Binned confidence ECE over equal-width bins ``(lo, hi]`` (0 falls in the first bin)."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("empty input")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correct differ in length")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=n_bins)
    filled = counts > 0
    gaps = np.abs(acc_sum[filled] - conf_sum[filled]) / counts[filled]
    return float(np.sum(counts[filled] / conf.size * gaps))


@dataclass
class ReliabilityCurve:
    grid: np.ndarray
    accuracy: np.ndarray
    density: np.ndarray

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0]) if len(self.grid) > 1 else 0.0


def silverman_bandwidth(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return 1.06 * values.std(ddof=1) * len(values) ** (-1 / 5)


def reliability_curve(confidences, correct, n_grid: int = 1000) -> ReliabilityCurve:
    """Kernel (Nadaraya-Watson) estimate of accuracy given confidence, plus the confidence density.

    Bandwidth follows Silverman's rule. Raises ``ValueError`` for fewer than
    10 samples or zero spread in the confidences.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size < 10:
        raise ValueError("need at least 10 samples")
    h = silverman_bandwidth(conf)
    if np.ptp(conf) == 0 or not h > 0:
        if np.ptp(conf) == 0:
            return ReliabilityCurve(np.array([conf[0]]), np.array([corr.mean()]), np.array([1.0]))
        raise ValueError("zero bandwidth")
    lo = conf.min()
    grid = np.linspace(lo, 1.0, n_grid) if lo < 1.0 else np.array([1.0])
    acc = np.empty_like(grid)
    dens = np.empty_like(grid)
    for start in range(0, len(grid), 100):
        g = grid[start:start + 100]
        k = np.exp(-0.5 * ((g[:, None] - conf[None, :]) / h) ** 2)
        ksum = k.sum(axis=1)
        dens[start:start + 100] = ksum / (conf.size * h * math.sqrt(2 * math.pi))
        with np.errstate(invalid="ignore", divide="ignore"):
            acc[start:start + 100] = np.where(ksum > 0, (k @ corr) / ksum, 0.0)
    return ReliabilityCurve(grid, acc, dens)


def ece_density(confidences, correct, n_grid: int = 1000) -> float:
    """Kernel-smoothed confidence ECE: sum of ``|g(s) - s| p(s) ds`` on a uniform grid."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size < 10:
        raise ValueError("need at least 10 samples")
    # a kernel narrower than the grid spacing is not resolved by the Riemann sum
    step = (1.0 - conf.min()) / (n_grid - 1)
    if np.ptp(conf) == 0 or not silverman_bandwidth(conf) >= step:
        warnings.warn("confidences have (near) zero variance; falling back to binned ECE", RuntimeWarning)
        return ece_binned(conf, correct)
    curve = reliability_curve(conf, correct, n_grid)
    return float(np.sum(np.abs(curve.accuracy - curve.grid) * curve.density) * curve.step)


def confidence_and_correct(scores, labels):
    scores = np.asarray(scores)
    pred = scores.argmax(axis=1)
    return scores.max(axis=1), pred == np.asarray(labels)


# ---------------------------------------------------------------------------
# calibrator files

def calibrator_to_json(calibrator, provenance: dict | None = None) -> str:
    """JSON with a ``kind`` tag, the parameters and free-form provenance."""
    if isinstance(calibrator, TemperatureScaler):
        data = {"kind": "temperature", "T": calibrator.T}
    elif isinstance(calibrator, DirichletMap):
        data = {"kind": "dirichlet", "W": calibrator.W.tolist(), "b": calibrator.b.tolist(),
                "eps_log": calibrator.eps_log}
    elif isinstance(calibrator, Identity):
        data = {"kind": "identity"}
    else:
        raise TypeError(f"cannot serialise {type(calibrator).__name__}")
    data["provenance"] = provenance or {}
    return json.dumps(data, sort_keys=True, indent=1)


def calibrator_from_json(text: str):
    data = json.loads(text)
    kind = data.get("kind")
    if kind == "temperature":
        return TemperatureScaler(float(data["T"]))
    if kind == "dirichlet":
        return DirichletMap(np.array(data["W"]), np.array(data["b"]), float(data["eps_log"]))
    if kind == "identity":
        return Identity()
    raise ValueError(f"unknown calibrator kind {kind!r}")
