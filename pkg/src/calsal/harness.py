"""Experiment orchestration: configuration, seeding, the evaluation protocol and report files.

A run splits the data, trains or loads the classifier, fits the calibrators
on the calibration split and then, for every evaluation sample, method and
model variant, computes the saliency map and its metrics. Everything written
depends only on the configuration (which includes the master seed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import shutil
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__
from . import plotting
from .calibration import (CalibratedModel, Identity, RegConfig, TemperatureScaler,
                          calibrator_to_json, confidence_and_correct, ece_binned, ece_density,
                          fit_dirichlet, fit_temperature, reliability_curve)
from .data import Dataset, SynthSpec, generate_synthetic_dataset, load_image_dataset
from .evaluation import (average_random_curves, blurred_image, curve_from_scores, deletion_images,
                         deletion_order, lipschitz_estimate, otsu_tv, random_order_images, ssim)
from .model import TrainConfig, load_model, save_model, train_classifier
from .saliency import (METHODS, IgConfig, LrpConfig, MpConfig, RiseConfig, explain, make_map,
                       masked_inputs, mp_result, optimize_masks, rise_from_scores, rise_masks)
from .segmentation import slic_superpixels

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1
CALIBRATORS = ("temperature", "dirichlet", "identity")
CHUNK = 25  # evaluation samples per work unit (fixed, so results do not depend on --jobs)
LONG_RUN_METHODS = ("rise", "meaningful_perturbation")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration

@dataclass
class SynthConfig:
    n_classes: int = 2
    image_size: tuple = (32, 32, 3)
    noise: float = 0.3
    shape_size: tuple = (10, 16)
    background: float = 0.5


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "directory"
    directory: str = ""
    labels_csv: str = "labels.csv"
    synthetic: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class SplitConfig:
    train: int = 2000
    calibration: int = 500
    evaluation: int = 500


@dataclass
class ModelConfig:
    path: str = ""  # load this model instead of training one
    architecture: str = "default"
    widths: tuple = (16, 32)
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3


@dataclass
class CalibrationConfig:
    calibrators: tuple = ("temperature", "dirichlet")
    ece_bins: int = 15
    dirichlet_off_diagonal: float = 1e-3
    dirichlet_bias: float = 1e-3
    dirichlet_steps: int = 2000


@dataclass
class SensitivityConfig:
    absolute: bool = False


@dataclass
class MethodsConfig:
    names: tuple = ("sensitivity", "integrated_gradients", "rise", "meaningful_perturbation")
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    integrated_gradients: IgConfig = field(default_factory=IgConfig)
    rise: RiseConfig = field(default_factory=lambda: RiseConfig(n_masks=1000))
    meaningful_perturbation: MpConfig = field(default_factory=lambda: MpConfig(steps=300))
    lrp: LrpConfig = field(default_factory=LrpConfig)

    def config_for(self, name):
        if name == "sensitivity":
            return dataclasses.asdict(self.sensitivity)
        return getattr(self, name, None)


@dataclass
class MetricsConfig:
    ssim: bool = True
    deletion: bool = True
    random_baseline: bool = True
    otsu_tv: bool = True
    deletion_steps: int = 100
    baseline_orders: int = 5
    superpixels: int = 100
    compactness: float = 10.0


@dataclass
class SweepConfig:
    temperatures: tuple = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    include_fitted: bool = True
    methods: tuple = ("sensitivity", "integrated_gradients")
    n_samples: int = 0  # 0 means the whole evaluation split


@dataclass
class StabilityConfig:
    enabled: bool = False  # also run during ``evaluate``
    n_points: int = 50
    neighbors: int = 40
    radius: float = 0.05
    methods: tuple = ("sensitivity", "integrated_gradients")
    long_run: bool = False


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "calsal-out"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    methods: MethodsConfig = field(default_factory=MethodsConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a table, got {type(data).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{where}.{name}" if where else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected true/false, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected a number, got {value!r}")
            kwargs[name] = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{key}: expected a string, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key}: expected a list, got {value!r}")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    config = _build(ExperimentConfig, data, "")
    validate_config(config)
    return config


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def config_to_dict(config: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return plain(dataclasses.asdict(config))


def config_hash(config) -> str:
    data = config if isinstance(config, dict) else config_to_dict(config)
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def validate_config(config: ExperimentConfig, stability: bool | None = None) -> None:
    """Raise :class:`ConfigError` on the first problem; ``stability`` forces the stability checks."""
    s = config.split
    if min(s.calibration, s.evaluation) < 1 or s.train < 0:
        raise ConfigError("split sizes must be positive")
    if s.evaluation < 10:
        raise ConfigError("the evaluation split needs at least 10 samples for the ECE estimates")
    if not config.model.path and s.train < 1:
        raise ConfigError("a training split is needed when no model path is given")
    if config.model.path and not Path(config.model.path).is_file():
        raise ConfigError(f"model.path {config.model.path!r} does not exist")
    if config.data.source not in ("synthetic", "directory"):
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {config.data.source!r}")
    if config.data.source == "directory" and not Path(config.data.directory).is_dir():
        raise ConfigError(f"data.directory {config.data.directory!r} is not a directory")
    syn = config.data.synthetic
    if len(syn.image_size) != 3 or len(syn.shape_size) != 2:
        raise ConfigError("data.synthetic.image_size needs 3 entries and shape_size 2")
    if config.seed < 0 or config.seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    for name in config.calibration.calibrators:
        if name not in CALIBRATORS:
            raise ConfigError(f"unknown calibrator {name!r}; known: {', '.join(CALIBRATORS)}")
    if len(set(config.calibration.calibrators)) != len(config.calibration.calibrators):
        raise ConfigError("calibrators listed twice")
    for key, names in (("methods.names", config.methods.names), ("sweep.methods", config.sweep.methods),
                       ("stability.methods", config.stability.methods)):
        for name in names:
            if name not in METHODS:
                raise ConfigError(f"{key}: unknown method {name!r}; known: {', '.join(sorted(METHODS))}")
    if any(not t > 0 for t in config.sweep.temperatures):
        raise ConfigError("sweep temperatures must be positive")
    if config.sweep.n_samples < 0 or config.sweep.n_samples > s.evaluation:
        raise ConfigError("sweep.n_samples must lie in [0, evaluation split size]")
    st = config.stability
    if (st.enabled if stability is None else stability) and not 1 <= st.n_points <= s.evaluation:
        raise ConfigError("stability.n_points must lie in [1, evaluation split size]")
    if st.neighbors < 1 or not st.radius > 0:
        raise ConfigError("stability needs neighbors >= 1 and radius > 0")
    slow = [m for m in st.methods if m in LONG_RUN_METHODS]
    if slow and not st.long_run:
        raise ConfigError(f"stability for {', '.join(slow)} needs stability.long_run = true")
    m = config.metrics
    if m.deletion_steps < 1 or m.baseline_orders < 1 or m.superpixels < 1:
        raise ConfigError("metric step, order and superpixel counts must be positive")


# ---------------------------------------------------------------------------
# seeding

def derive_seed(master: int, *tags) -> int:
    """A 63-bit seed from the master seed and integer or string tags."""
    words = [int(master) & 0xFFFFFFFF, int(master) >> 32]
    for tag in tags:
        words.append(tag if isinstance(tag, int) else zlib.crc32(str(tag).encode()))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) & 0x7FFFFFFF) << 32


# ---------------------------------------------------------------------------
# pipeline stages

@dataclass
class Splits:
    train: Dataset | None
    calibration: Dataset
    evaluation: Dataset


@dataclass
class Context:
    """Everything the per-sample work needs; shipped to worker processes."""

    config: ExperimentConfig
    base: object
    variants: list  # of CalibratedModel, uncalibrated first
    images: np.ndarray
    labels: np.ndarray
    base_logits: np.ndarray  # clean evaluation images


def make_splits(config: ExperimentConfig) -> Splits:
    s = config.split
    need_train = 0 if config.model.path else s.train
    if config.data.source == "synthetic":
        syn = config.data.synthetic
        spec = SynthSpec(syn.n_classes, tuple(syn.image_size), 0, syn.noise, tuple(syn.shape_size), syn.background)
        train = None
        if need_train:
            spec.per_class = math.ceil(need_train / syn.n_classes)
            pool = generate_synthetic_dataset(spec, derive_seed(config.seed, "data", "train"))
            train = pool.subset(np.arange(need_train))
        spec.per_class = math.ceil((s.calibration + s.evaluation) / syn.n_classes)
        test = generate_synthetic_dataset(spec, derive_seed(config.seed, "data", "test"))
        cal = test.subset(np.arange(s.calibration))
        ev = test.subset(np.arange(s.calibration, s.calibration + s.evaluation))
        return Splits(train, cal, ev)
    data = load_image_dataset(config.data.directory, config.data.labels_csv)
    total = need_train + s.calibration + s.evaluation
    if total > len(data):
        raise ConfigError(f"splits need {total} images but the directory holds {len(data)}")
    order = np.random.default_rng(derive_seed(config.seed, "data", "split")).permutation(len(data))
    train = data.subset(order[:need_train]) if need_train else None
    cal = data.subset(order[need_train:need_train + s.calibration])
    ev = data.subset(order[need_train + s.calibration:total])
    return Splits(train, cal, ev)


def obtain_model(config: ExperimentConfig, splits: Splits):
    if config.model.path:
        return load_model(config.model.path)
    m = config.model
    tc = TrainConfig(m.epochs, m.batch_size, m.lr, derive_seed(config.seed, "train") % 2 ** 31,
                     m.architecture, tuple(m.widths))
    return train_classifier(tc, splits.train)


def fit_calibrators(config: ExperimentConfig, base, calibration: Dataset) -> list:
    """Variants in report order: ``uncalibrated`` first, then the configured calibrators."""
    logits = base.base_logits(calibration.images)
    variants = [CalibratedModel(base, Identity(), "uncalibrated")]
    c = config.calibration
    for name in c.calibrators:
        if name == "identity":
            cal = Identity()
        elif name == "temperature":
            cal = fit_temperature(logits, calibration.labels)
        else:
            scores = CalibratedModel(base).scores_from_base_logits(logits).astype(np.float64)
            reg = RegConfig(off_diagonal=c.dirichlet_off_diagonal, bias=c.dirichlet_bias, steps=c.dirichlet_steps)
            cal = fit_dirichlet(scores, calibration.labels, reg)
        variants.append(CalibratedModel(base, cal, name))
    return variants


def dataset_hash(data: Dataset) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(data.images, dtype="<f4").tobytes())
    digest.update(np.ascontiguousarray(data.labels, dtype="<i8").tobytes())
    return digest.hexdigest()


def calibrator_params(variant, seed=None, calibration_hash="") -> dict:
    """The calibrator file content of ``variant`` as a dict."""
    return json.loads(calibrator_to_json(variant.calibrator, {"seed": seed, "calibration_set_sha256": calibration_hash}))


def calibration_table(config, variants, images, labels, base_logits=None):
    """ECE/NLL/accuracy rows and reliability-curve rows per variant."""
    base_logits = variants[0].base_logits(images) if base_logits is None else base_logits
    rows, curves = [], []
    for v in variants:
        scores = v.scores_from_base_logits(base_logits).astype(np.float64)
        conf, correct = confidence_and_correct(scores, labels)
        rel = reliability_curve(conf, correct)
        logp = np.log(np.maximum(scores[np.arange(len(labels)), labels], 1e-300))
        rows.append({
            "variant": v.tag,
            "temperature": v.calibrator.T if isinstance(v.calibrator, TemperatureScaler) else float("nan"),
            "accuracy": float(np.mean(correct)),
            "mean_confidence": float(np.mean(conf)),
            "nll": float(-np.mean(logp)),
            "ece_binned": ece_binned(conf, correct, config.calibration.ece_bins),
            "ece_density": ece_density(conf, correct),
        })
        curves.extend({"variant": v.tag, "confidence": g, "accuracy": a, "density": d}
                      for g, a, d in zip(rel.grid, rel.accuracy, rel.density))
    return rows, curves


# ---------------------------------------------------------------------------
# per-sample evaluation

def _scores(variant, base_logits):
    return variant.scores_from_base_logits(base_logits).astype(np.float64)


def evaluate_chunk(ctx: Context, indices, methods, want_ssim=True, want_baseline=True, want_otsu=True):
    """Rows and mean-curve contributions for evaluation samples ``indices``.

    RISE masks and baseline segment orders are seeded per (sample, method),
    not per variant, so every variant is judged on the same random draws and
    the base-model logits of those images are computed once.
    """
    cfg = ctx.config
    steps = cfg.metrics.deletion_steps
    variants = ctx.variants
    xs = ctx.images[indices]
    clean = {v.tag: _scores(v, ctx.base_logits[indices]) for v in variants}
    classes = {v.tag: clean[v.tag].argmax(axis=1) for v in variants}
    # variants with an identity calibrator compute exactly what the uncalibrated model does
    twin = {v.tag: "identity" if isinstance(v.calibrator, Identity) else v.tag for v in variants}
    mp_maps = {}
    if "meaningful_perturbation" in methods:
        mcfg = cfg.methods.meaningful_perturbation
        solved = {}
        for v in variants:
            if twin[v.tag] not in solved:
                solved[twin[v.tag]] = optimize_masks(v, xs, classes[v.tag], mcfg)
            masks, history = solved[twin[v.tag]]
            for j, i in enumerate(indices):
                seed = derive_seed(cfg.seed, int(i), "meaningful_perturbation")
                mp_maps[(int(i), v.tag)] = mp_result(v, masks[j], history[:, j], int(classes[v.tag][j]), mcfg, seed)
    rows, curves = [], []
    for j, i in enumerate(indices):
        i = int(i)
        x = xs[j]
        blurred = blurred_image(x)
        baseline = {}
        if want_baseline:
            seed = derive_seed(cfg.seed, i, "random_baseline")
            seg = slic_superpixels(x, cfg.metrics.superpixels, cfg.metrics.compactness)
            imgs, fractions = random_order_images(x, seg, seed, cfg.metrics.baseline_orders, blurred)
            logits = ctx.base.base_logits(imgs)
            for v in variants:
                baseline[v.tag] = average_random_curves(_scores(v, logits), fractions, steps)
                curves.append(("random_baseline", v.tag, i, baseline[v.tag].scores))
        deletion_cache = {}
        for method in methods:
            seed = derive_seed(cfg.seed, i, method)
            maps = {}
            if method == "rise":
                rcfg = cfg.methods.rise
                masks = rise_masks(rcfg, x.shape[:2], seed)
                logits = ctx.base.base_logits(masked_inputs(x, masks))
                for v in variants:
                    c = int(classes[v.tag][j])
                    raw = rise_from_scores(_scores(v, logits)[:, c], masks, rcfg.p)
                    maps[v.tag] = make_map(raw, c, "rise", v, seed=seed)
            elif method == "meaningful_perturbation":
                maps = {v.tag: mp_maps[(i, v.tag)] for v in variants}
            else:
                done = {}
                for v in variants:
                    if twin[v.tag] in done:
                        maps[v.tag] = dataclasses.replace(done[twin[v.tag]], variant=v.tag)
                        continue
                    maps[v.tag] = explain(method, v, x, int(classes[v.tag][j]), cfg.methods.config_for(method), seed)
                    done[twin[v.tag]] = maps[v.tag]
            reference = maps.get("uncalibrated")
            for v in variants:
                smap = maps[v.tag]
                c = int(classes[v.tag][j])
                key = smap.values.tobytes()
                if key not in deletion_cache:
                    images = deletion_images(x, deletion_order(smap.values), steps, blurred)
                    deletion_cache[key] = ctx.base.base_logits(images)
                scores = _scores(v, deletion_cache[key])
                curve = curve_from_scores(np.arange(steps + 1) / steps, scores[:, c], c, scores[0, c])
                curves.append((method, v.tag, i, curve.scores))
                row = {
                    "sample_id": i,
                    "method": method,
                    "variant": v.tag,
                    "label": int(ctx.labels[i]),
                    "explained_class": c,
                    "clean_score": float(clean[v.tag][j, c]),
                    "ssim_vs_uncalibrated": ssim(reference.values, smap.values)
                    if want_ssim and reference is not None else float("nan"),
                    "deletion_area": curve.area,
                    "random_area": baseline[v.tag].area if baseline else float("nan"),
                    "otsu_threshold": float("nan"),
                    "otsu_tv": -1,
                    "seed": seed,
                }
                row["better_than_random"] = int(row["deletion_area"] < row["random_area"]) if baseline else -1
                if want_otsu:
                    row["otsu_threshold"], row["otsu_tv"] = otsu_tv(smap.values)
                rows.append(row)
    return rows, curves


def _chunks(n):
    return [np.arange(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]


_WORKER_CTX = None


def _worker(args):
    return evaluate_chunk(_WORKER_CTX, *args)


def run_chunks(ctx: Context, n_samples, methods, jobs=1, **want):
    """Evaluate samples ``0..n_samples-1`` chunk by chunk; results come back in sample order."""
    jobs_args = [(idx, methods, want.get("want_ssim", True), want.get("want_baseline", True),
                  want.get("want_otsu", True)) for idx in _chunks(n_samples)]
    if jobs <= 1 or len(jobs_args) <= 1:
        results = [evaluate_chunk(ctx, *a) for a in jobs_args]
    else:
        global _WORKER_CTX
        _WORKER_CTX = ctx
        try:
            with ProcessPoolExecutor(jobs, mp_context=get_context("fork")) as pool:
                results = list(pool.map(_worker, jobs_args))
        finally:
            _WORKER_CTX = None
    rows = [r for chunk_rows, _ in results for r in chunk_rows]
    curves = [c for _, chunk_curves in results for c in chunk_curves]
    return rows, curves


# ---------------------------------------------------------------------------
# formatting and aggregation

PER_SAMPLE_COLUMNS = ("sample_id", "method", "variant", "label", "explained_class", "clean_score",
                      "ssim_vs_uncalibrated", "deletion_area", "random_area", "better_than_random",
                      "otsu_threshold", "otsu_tv", "seed")
AGGREGATE_COLUMNS = ("method", "variant", "n_samples", "mean_deletion_area", "mean_random_area", "btr",
                     "mean_otsu_tv", "ssim_min", "ssim_q1", "ssim_median", "ssim_q3", "ssim_max", "ssim_mean",
                     "lipschitz_min", "lipschitz_q1", "lipschitz_median", "lipschitz_q3", "lipschitz_max")
CALIBRATION_COLUMNS = ("variant", "temperature", "accuracy", "mean_confidence", "nll", "ece_binned", "ece_density")
RELIABILITY_COLUMNS = ("variant", "confidence", "accuracy", "density")
CURVE_COLUMNS = ("method", "variant", "fraction", "mean_score")
SWEEP_COLUMNS = ("temperature", "is_fitted", "ece_binned", "ece_density", "method", "mean_deletion_area")
STABILITY_COLUMNS = ("sample_id", "method", "variant", "lipschitz")
SUMMARY_COLUMNS = ("method", "variant", "n_points", "min", "q1", "median", "q3", "max")


def fmt(value, digits: int = 9) -> str:
    """CSV cell: floats with ``digits`` significant digits, everything else via ``str``."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), f".{digits}g")
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def csv_text(columns, rows, digits: int = 9) -> str:
    lines = [",".join(columns)] + [",".join(fmt(r[c], digits) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def read_csv(path) -> list:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v):
    return float(fmt(v)) if not isinstance(v, str) else float(v)


def box_summary(values):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (float("nan"),) * 5
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return tuple(float(a) for a in q)


def aggregate_rows(rows, lipschitz=None):
    """Per (method, variant) aggregates from per-sample rows, using their CSV-rounded values.

    ``lipschitz`` optionally maps (method, variant) to per-point estimates.
    """
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["variant"]), []).append(r)
    out = []
    for (method, variant), rs in groups.items():
        area = [_num(r["deletion_area"]) for r in rs]
        rnd = [_num(r["random_area"]) for r in rs]
        btr = [int(r["better_than_random"]) for r in rs]
        tv = [int(r["otsu_tv"]) for r in rs]
        sims = [_num(r["ssim_vs_uncalibrated"]) for r in rs]
        s_box = box_summary(sims)
        finite_sims = [s for s in sims if math.isfinite(s)]
        l_box = box_summary([_num(x) for x in (lipschitz or {}).get((method, variant), [])])
        out.append({
            "method": method, "variant": variant, "n_samples": len(rs),
            "mean_deletion_area": float(np.mean(area)),
            "mean_random_area": float(np.mean(rnd)),
            "btr": float(np.mean(btr)) if min(btr) >= 0 else float("nan"),
            "mean_otsu_tv": float(np.mean(tv)) if min(tv) >= 0 else float("nan"),
            "ssim_min": s_box[0], "ssim_q1": s_box[1], "ssim_median": s_box[2], "ssim_q3": s_box[3],
            "ssim_max": s_box[4],
            "ssim_mean": float(np.mean(finite_sims)) if finite_sims else float("nan"),
            "lipschitz_min": l_box[0], "lipschitz_q1": l_box[1], "lipschitz_median": l_box[2],
            "lipschitz_q3": l_box[3], "lipschitz_max": l_box[4],
        })
    return out


def mean_curves(curves, steps):
    """Pointwise mean curve per (method, variant), accumulated in sample order."""
    sums, counts = {}, {}
    for method, variant, _, values in curves:
        key = (method, variant)
        sums[key] = sums.get(key, 0.0) + np.asarray(values, dtype=np.float64)
        counts[key] = counts.get(key, 0) + 1
    rows = []
    for key, total in sums.items():
        mean = total / counts[key]
        rows.extend({"method": key[0], "variant": key[1], "fraction": t / steps, "mean_score": float(s)}
                    for t, s in enumerate(mean))
    return rows


# ---------------------------------------------------------------------------
# bundle and report

@dataclass
class ReportBundle:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    reliability: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    calibrators: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    stability_points: list = field(default_factory=list)
    stability_summary: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    model: object = None


class Run:
    """Staging directory for one pipeline invocation.

    Files are written into ``<out>/.staging-<pid>`` and moved into ``out`` on
    success; on failure the staging directory becomes ``<out>/failed-<timestamp>``.
    """

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            probe = self.out / f".probe-{os.getpid()}"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise PipelineError("report", OSError(f"output directory {self.out} is not writable: {exc}")) from None
        self.staging = self.out / f".staging-{os.getpid()}"
        if self.staging.exists():
            shutil.rmtree(self.staging)
        self.staging.mkdir()
        self.stage = "setup"
        self.log = []

    def enter(self, stage):
        self.stage = stage
        self.log.append(stage)
        (self.staging / "stages.log").write_text("\n".join(self.log) + "\n")

    def write(self, name, text):
        path = self.staging / name
        path.parent.mkdir(parents=True, exist_ok=True)
        mode = "wb" if isinstance(text, bytes) else "w"
        with open(path, mode) as fh:
            fh.write(text)

    def commit(self):
        (self.staging / "stages.log").unlink(missing_ok=True)
        for path in sorted(self.staging.rglob("*")):
            if path.is_file():
                target = self.out / path.relative_to(self.staging)
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(path, target)
        shutil.rmtree(self.staging)

    def quarantine(self) -> Path:
        target = self.out / time.strftime("failed-%Y%m%d-%H%M%S")
        n = 1
        while target.exists():
            target = self.out / time.strftime(f"failed-%Y%m%d-%H%M%S-{n}")
            n += 1
        os.replace(self.staging, target)
        return target

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            self.commit()
            return False
        self.quarantine()
        if isinstance(exc, (ConfigError, PipelineError)):
            return False
        raise PipelineError(self.stage, exc) from exc


def _prepare(config, run, jobs=1):
    run.enter("data")
    splits = make_splits(config)
    run.enter("model")
    base = obtain_model(config, splits)
    run.enter("calibration")
    variants = fit_calibrators(config, base, splits.calibration)
    ev = splits.evaluation
    ctx = Context(config, base, variants, ev.images.astype(np.float32), ev.labels, base.base_logits(ev.images))
    return splits, ctx


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> ReportBundle:
    """The full protocol; writes the report into ``out_dir`` (default ``config.output_dir``)."""
    validate_config(config)
    out_dir = Path(out_dir or config.output_dir)
    with Run(out_dir) as run:
        t0 = time.perf_counter()
        splits, ctx = _prepare(config, run, jobs)
        bundle = ReportBundle(config, model=ctx.base)
        bundle.timings["prepare_s"] = time.perf_counter() - t0
        run.enter("ece")
        bundle.calibration, bundle.reliability = calibration_table(config, ctx.variants, ctx.images, ctx.labels,
                                                                   ctx.base_logits)
        cal_hash = dataset_hash(splits.calibration)
        bundle.calibrators = {v.tag: calibrator_params(v, config.seed, cal_hash) for v in ctx.variants}
        run.enter("saliency")
        m = config.metrics
        rows, curves = run_chunks(ctx, len(ctx.labels), tuple(config.methods.names), jobs,
                                  want_ssim=m.ssim, want_baseline=m.random_baseline, want_otsu=m.otsu_tv)
        lipschitz = None
        if config.stability.enabled:
            run.enter("stability")
            bundle.stability_points, bundle.stability_summary = _stability(config, ctx)
            lipschitz = _lipschitz_by_group(bundle.stability_points)
        run.enter("aggregate")
        bundle.rows = rows
        bundle.aggregates = aggregate_rows(rows, lipschitz)
        bundle.curves = mean_curves(curves, m.deletion_steps)
        bundle.seeds = {"master": config.seed, "train": derive_seed(config.seed, "train") % 2 ** 31,
                        "data_train": derive_seed(config.seed, "data", "train"),
                        "data_test": derive_seed(config.seed, "data", "test")}
        bundle.timings["total_s"] = time.perf_counter() - t0
        run.enter("report")
        _write_bundle(bundle, run)
        if not config.model.path:
            save_model(ctx.base, run.staging / "model.ctim")
    return bundle


def emit_report(bundle: ReportBundle, out_dir) -> list:
    """Write every CSV, SVG and the manifest of ``bundle``; returns the file names."""
    with Run(out_dir) as run:
        run.enter("report")
        names = _write_bundle(bundle, run)
    return names


def _lipschitz_by_group(points):
    out = {}
    for p in points:
        out.setdefault((p["method"], p["variant"]), []).append(p["lipschitz"])
    return out


def manifest(bundle: ReportBundle) -> dict:
    cfg = config_to_dict(bundle.config)
    return {"toolkit": "calsal", "version": __version__, "config": cfg, "config_hash": config_hash(cfg),
            "seeds": bundle.seeds, "calibrators": bundle.calibrators}


def _write_bundle(bundle: ReportBundle, run: Run) -> list:
    files = {}
    if bundle.rows:
        files["per_sample.csv"] = csv_text(PER_SAMPLE_COLUMNS, bundle.rows)
        # full precision, so the aggregates match means of the per-sample CSV to float rounding
        files["aggregate.csv"] = csv_text(AGGREGATE_COLUMNS, bundle.aggregates, 17)
        files["deletion_curves.csv"] = csv_text(CURVE_COLUMNS, bundle.curves)
    if bundle.calibration:
        files["calibration.csv"] = csv_text(CALIBRATION_COLUMNS, bundle.calibration)
        files["reliability.csv"] = csv_text(RELIABILITY_COLUMNS, bundle.reliability)
    if bundle.sweep:
        files["sweep.csv"] = csv_text(SWEEP_COLUMNS, bundle.sweep, 17)
    if bundle.stability_points:
        files["stability_points.csv"] = csv_text(STABILITY_COLUMNS, bundle.stability_points)
        files["stability_summary.csv"] = csv_text(SUMMARY_COLUMNS, bundle.stability_summary, 17)
    files.update(render_plots(bundle))
    for tag, params in bundle.calibrators.items():
        if tag != "uncalibrated":
            files[f"calibrator_{tag}.json"] = json.dumps(params, sort_keys=True, indent=1) + "\n"
    files["manifest.json"] = json.dumps(manifest(bundle), sort_keys=True, indent=1) + "\n"
    for name, text in files.items():
        run.write(name, text)
    return sorted(files)


def render_plots(bundle: ReportBundle) -> dict:
    """SVG text per file name; every plotted number comes from one of the bundle's CSV tables."""
    out = {}
    if bundle.reliability:
        series = {}
        for r in bundle.reliability:
            xs, ys = series.setdefault(r["variant"], ([], []))
            xs.append(_num(r["confidence"]))
            ys.append(_num(r["accuracy"]))
        series["perfect calibration"] = ([0.0, 1.0], [0.0, 1.0])
        out["reliability.svg"] = plotting.line_plot(series, "Reliability curves", "confidence", "accuracy",
                                                    dashed=("perfect calibration",))
    if bundle.curves:
        by_method = {}
        for r in bundle.curves:
            xs, ys = by_method.setdefault(r["method"], {}).setdefault(r["variant"], ([], []))
            xs.append(_num(r["fraction"]))
            ys.append(_num(r["mean_score"]))
        baseline = by_method.pop("random_baseline", {})
        for method, series in by_method.items():
            series = dict(series)
            series.update({f"random ({v})": s for v, s in baseline.items()})
            out[f"deletion_{method}.svg"] = plotting.line_plot(
                series, f"Mean deletion curve: {method}", "fraction deleted", "normalised score",
                dashed=tuple(f"random ({v})" for v in baseline))
    if bundle.rows:
        methods = list(dict.fromkeys(r["method"] for r in bundle.rows))
        variants = list(dict.fromkeys(r["variant"] for r in bundle.rows))
        for method in methods:
            for variant in variants:
                if variant == "uncalibrated":
                    continue
                sims = [_num(r["ssim_vs_uncalibrated"]) for r in bundle.rows
                        if r["method"] == method and r["variant"] == variant]
                sims = [s for s in sims if math.isfinite(s)]
                if sims:
                    out[f"ssim_{method}_{variant}.svg"] = plotting.histogram(
                        sims, f"SSIM vs uncalibrated: {method}, {variant}", "SSIM", 20, (min(min(sims), 0.0), 1.0))
        for column, title in (("mean_deletion_area", "Mean deletion area"), ("btr", "Better than random"),
                              ("mean_otsu_tv", "Mean Otsu TV")):
            groups = {}
            for a in bundle.aggregates:
                value = _num(a[column])
                if math.isfinite(value):
                    groups.setdefault(a["method"], {})[a["variant"]] = value
            if groups:
                out[f"bars_{column}.svg"] = plotting.bar_chart(groups, title, column)
    if bundle.sweep:
        out.update(sweep_plots(bundle.sweep))
    if bundle.stability_summary:
        groups = {f"{s['method']}/{s['variant']}": tuple(_num(s[k]) for k in ("min", "q1", "median", "q3", "max"))
                  for s in bundle.stability_summary}
        out["stability_box.svg"] = plotting.box_plot(groups, "Lipschitz estimates", "L")
    return out


# ---------------------------------------------------------------------------
# temperature sweep

def sweep_plots(rows) -> dict:
    by_method = {}
    marked_t, marked_e = [], []
    for r in rows:
        t, e, a = _num(r["temperature"]), _num(r["ece_binned"]), _num(r["mean_deletion_area"])
        s = by_method.setdefault(r["method"], ([], [], []))
        s[0].append(t)
        s[1].append(e)
        s[2].append(a)
        if int(r["is_fitted"]):
            marked_t.append((math.log2(t), a))
            marked_e.append((e, a))
    vs_t = {m: ([math.log2(t) for t in s[0]], s[2]) for m, s in by_method.items()}
    vs_e = {}
    for m, s in by_method.items():
        order = np.argsort(s[1], kind="stable")
        vs_e[m] = ([s[1][k] for k in order], [s[2][k] for k in order])
    return {
        "sweep_area_vs_temperature.svg": plotting.line_plot(vs_t, "Deletion area vs temperature", "log2 T",
                                                            "mean deletion area", marked=marked_t),
        "sweep_area_vs_ece.svg": plotting.line_plot(vs_e, "Deletion area vs ECE", "binned ECE",
                                                    "mean deletion area", marked=marked_e),
    }


def sweep_grid(config, fitted_T):
    grid = sorted(set(float(t) for t in config.sweep.temperatures) | ({fitted_T} if config.sweep.include_fitted else set()))
    return grid


def temperature_sweep(config: ExperimentConfig, grid=None, out_dir=None, jobs: int = 1) -> ReportBundle:
    """Deletion experiment and ECE for a temperature-scaled variant at each T of the grid.

    The fitted temperature is added to the grid when ``sweep.include_fitted``
    is set. ``is_fitted`` marks its rows.
    """
    validate_config(config)
    out_dir = Path(out_dir or config.output_dir)
    with Run(out_dir) as run:
        splits, ctx = _prepare(config, run, jobs)
        run.enter("sweep")
        fitted = fit_temperature(ctx.base.base_logits(splits.calibration.images), splits.calibration.labels).T
        temps = sweep_grid(config, fitted) if grid is None else sorted(set(grid) | {fitted})
        if any(not t > 0 for t in temps):
            raise ConfigError("sweep temperatures must be positive")
        n = config.sweep.n_samples or len(ctx.labels)
        bundle = ReportBundle(config, model=ctx.base)
        for T in temps:
            variant = CalibratedModel(ctx.base, TemperatureScaler(T), f"T={T:.6g}")
            scores = variant.scores_from_base_logits(ctx.base_logits).astype(np.float64)
            conf, correct = confidence_and_correct(scores, ctx.labels)
            sub = dataclasses.replace(ctx, variants=[variant])
            rows, _ = run_chunks(sub, n, tuple(config.sweep.methods), jobs,
                                 want_ssim=False, want_baseline=False, want_otsu=False)
            for method in config.sweep.methods:
                areas = [_num(r["deletion_area"]) for r in rows if r["method"] == method]
                bundle.sweep.append({
                    "temperature": float(T), "is_fitted": int(T == fitted),
                    "ece_binned": ece_binned(conf, correct, config.calibration.ece_bins),
                    "ece_density": ece_density(conf, correct),
                    "method": method, "mean_deletion_area": float(np.mean(areas)),
                })
        bundle.seeds = {"master": config.seed}
        bundle.calibrators = {"temperature": calibrator_params(
            CalibratedModel(ctx.base, TemperatureScaler(fitted)), config.seed, dataset_hash(splits.calibration))}
        run.enter("report")
        _write_bundle(bundle, run)
    return bundle


# ---------------------------------------------------------------------------
# stability

def _stability(config, ctx, methods=None):
    st = config.stability
    rng = np.random.default_rng(derive_seed(config.seed, "stability", "points"))
    points = np.sort(rng.choice(len(ctx.labels), size=st.n_points, replace=False))
    rows = []
    for method in methods or st.methods:
        for v in ctx.variants:
            classes = v.scores_from_base_logits(ctx.base_logits[points]).argmax(axis=1)
            for i, c in zip(points, classes):
                seed = derive_seed(config.seed, int(i), method, "stability")
                L = lipschitz_estimate(v, method, ctx.images[i], st.radius, st.neighbors, seed,
                                       config.methods.config_for(method), int(c))
                rows.append({"sample_id": int(i), "method": method, "variant": v.tag, "lipschitz": L})
    summary = []
    for (method, variant), values in _lipschitz_by_group(rows).items():
        box = box_summary([_num(x) for x in values])
        summary.append({"method": method, "variant": variant, "n_points": len(values),
                        "min": box[0], "q1": box[1], "median": box[2], "q3": box[3], "max": box[4]})
    return rows, summary


def stability_experiment(config: ExperimentConfig, n_points: int | None = None, out_dir=None,
                         methods=None) -> ReportBundle:
    """Lipschitz estimates on ``n_points`` evaluation samples chosen by the seed.

    ``methods`` overrides ``stability.methods`` (used to inject test methods).
    """
    if n_points is not None:
        config = dataclasses.replace(config, stability=dataclasses.replace(config.stability, n_points=n_points))
    validate_config(config, stability=True)
    out_dir = Path(out_dir or config.output_dir)
    with Run(out_dir) as run:
        _, ctx = _prepare(config, run)
        run.enter("stability")
        bundle = ReportBundle(config, model=ctx.base)
        bundle.stability_points, bundle.stability_summary = _stability(config, ctx, methods)
        bundle.seeds = {"master": config.seed}
        run.enter("report")
        _write_bundle(bundle, run)
    return bundle


# ---------------------------------------------------------------------------
# re-rendering an existing report

def bundle_from_dir(out_dir) -> ReportBundle:
    """Rebuild a bundle from the CSV files and manifest in ``out_dir`` (aggregates recomputed)."""
    out = Path(out_dir)
    man = json.loads((out / "manifest.json").read_text())
    config = config_from_dict(man["config"])
    bundle = ReportBundle(config, seeds=man.get("seeds", {}), calibrators=man.get("calibrators", {}))
    if (out / "per_sample.csv").exists():
        bundle.rows = read_csv(out / "per_sample.csv")
        lipschitz = None
        if (out / "stability_points.csv").exists():
            bundle.stability_points = read_csv(out / "stability_points.csv")
            lipschitz = _lipschitz_by_group(bundle.stability_points)
        bundle.aggregates = aggregate_rows(bundle.rows, lipschitz)
        bundle.curves = read_csv(out / "deletion_curves.csv")
    elif (out / "stability_points.csv").exists():
        bundle.stability_points = read_csv(out / "stability_points.csv")
    if bundle.stability_points:
        bundle.stability_summary = read_csv(out / "stability_summary.csv")
    for name, attr in (("calibration.csv", "calibration"), ("reliability.csv", "reliability"), ("sweep.csv", "sweep")):
        if (out / name).exists():
            setattr(bundle, attr, read_csv(out / name))
    return bundle
