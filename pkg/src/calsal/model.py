"""Classifier representation, training and the CTIM model file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import LayerSpec, Variable

MAGIC = b"CTIM"
VERSION = 1
PREDICT_CHUNK = 32


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class ClassifierModel:
    """An ordered stack of layers ending in a softmax over ``n_classes``.

    Args:
        layers: layer list; the last one must be ``softmax``.
        input_shape: per-sample ``(H, W, C_in)`` (or ``(D,)`` for vector inputs).
        meta: free-form metadata saved with the model (train accuracy, seed...).
    """

    def __init__(self, layers: list[LayerSpec], input_shape, meta: dict | None = None):
        if not layers:
            raise ValueError("a classifier needs at least one layer followed by softmax")
        if layers[-1].kind != "softmax":
            raise ValueError(f"last layer must be softmax, got {layers[-1].kind}")
        if len(layers) < 2:
            raise ValueError("a classifier needs at least one layer before the softmax")
        self.layers = layers
        self.input_shape = tuple(int(s) for s in input_shape)
        self.meta = dict(meta or {})
        shape = self.input_shape
        for i, layer in enumerate(layers):
            layer.input_shape = shape
            shape = ad.output_shape(layer, shape, i)
        if len(shape) != 1 or shape[0] < 2:
            raise ValueError(f"classifier output must be a vector of >= 2 scores, got {shape}")
        self.n_classes = shape[0]

    def logits_graph(self, x: Variable, params=None) -> Variable:
        out = x
        for i, layer in enumerate(self.layers[:-1]):
            out = ad.layer_graph(layer, out, None if params is None else params[i])
        return out

    def graph(self, x: Variable, params=None) -> tuple[Variable, Variable]:
        """Build ``(logits, scores)`` nodes for a batched input node."""
        logits = self.logits_graph(x, params)
        return logits, ad.softmax(logits)

    def base_logits(self, xs: np.ndarray) -> np.ndarray:
        """Batched pre-softmax outputs, evaluated in chunks without recording."""
        return _chunked(lambda b: self.logits_graph(ad.constant(b)).value, xs, self.input_shape)

    def weights(self) -> list[np.ndarray]:
        return [arr for layer in self.layers for arr in layer.weights.values()]


def _chunked(fn, xs, input_shape):
    xs = np.asarray(xs, dtype=np.float32)
    if xs.shape[1:] != tuple(input_shape):
        raise ad.ShapeError(f"model expects inputs of shape {tuple(input_shape)}, got {xs.shape[1:]}")
    parts = [fn(xs[i:i + PREDICT_CHUNK]) for i in range(0, len(xs), PREDICT_CHUNK)]
    return np.concatenate(parts, axis=0)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float32)
    if x.shape != tuple(model.input_shape):
        raise ad.ShapeError(f"model expects input shape {tuple(model.input_shape)}, got {x.shape}")
    return x


def predict(model, x):
    """Return ``(logits, scores, predicted_class)`` for one input.

    ``model`` is a :class:`ClassifierModel` or any calibrated wrapper with
    the same ``graph`` method. Ties in the argmax go to the lowest index.
    """
    x = _check_input(model, x)
    logits, scores = model.graph(ad.constant(x[None]))
    return logits.value[0], scores.value[0], int(np.argmax(scores.value[0]))


def predict_batch(model, xs):
    """Batched :func:`predict`: arrays of logits ``(N, C)``, scores ``(N, C)`` and classes ``(N,)``."""
    both = _chunked(
        lambda b: np.concatenate([v.value for v in model.graph(ad.constant(b))], axis=1),
        xs,
        model.input_shape,
    )
    c = both.shape[1] // 2
    logits, scores = both[:, :c], both[:, c:]
    return logits, scores, scores.argmax(axis=1)


def batch_input_gradient(model, xs, class_indices, at: str = "score") -> np.ndarray:
    """Per-sample gradient of the score (or logit) of ``class_indices[i]`` wrt ``xs[i]``."""
    if at not in ("score", "logit"):
        raise ValueError(f"at must be 'score' or 'logit', got {at!r}")
    class_indices = np.broadcast_to(np.asarray(class_indices), (len(xs),))
    if np.any(class_indices < 0) or np.any(class_indices >= model.n_classes):
        raise IndexError(f"class index out of range for {model.n_classes} classes")
    out = []
    for i in range(0, len(xs), PREDICT_CHUNK):
        xv = ad.variable(xs[i:i + PREDICT_CHUNK], dtype=np.asarray(xs).dtype)
        logits, scores = model.graph(xv)
        target = scores if at == "score" else logits
        # samples are independent, so the gradient of the sum splits per sample
        out.append(ad.gradient(ad.total(ad.pick(target, class_indices[i:i + PREDICT_CHUNK])), xv))
    return np.concatenate(out, axis=0)


def input_gradient(model, x, class_index: int, at: str = "score") -> np.ndarray:
    """Gradient of the chosen class score (or logit) with respect to the input image."""
    if not 0 <= class_index < model.n_classes:
        raise IndexError(f"class index {class_index} out of range for {model.n_classes} classes")
    x = np.asarray(x)
    if x.shape != tuple(model.input_shape):
        raise ad.ShapeError(f"model expects input shape {tuple(model.input_shape)}, got {x.shape}")
    dtype = x.dtype if x.dtype.kind == "f" else np.float32
    return batch_input_gradient(model, x[None].astype(dtype), [class_index], at)[0]


# ---------------------------------------------------------------------------
# architectures

def conv_layer(rng, k, cin, cout, padding=1):
    w = rng.normal(0.0, np.sqrt(2.0 / (k * k * cin)), size=(k, k, cin, cout)).astype(np.float32)
    return LayerSpec("conv2d", {"stride": 1, "padding": padding},
                     {"W": w, "b": np.zeros(cout, dtype=np.float32)})


def dense_layer(rng, din, dout):
    w = rng.normal(0.0, np.sqrt(2.0 / din), size=(din, dout)).astype(np.float32)
    return LayerSpec("dense", {}, {"W": w, "b": np.zeros(dout, dtype=np.float32)})


def default_architecture(input_shape=(32, 32, 3), n_classes=2, seed=0, widths=(16, 32)) -> ClassifierModel:
    """conv3x3-relu-maxpool-conv3x3-relu-maxpool-flatten-dense-softmax, He-initialised."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    c1, c2 = widths
    layers = [
        conv_layer(rng, 3, c, c1),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", {"kernel": 2, "stride": 2}),
        conv_layer(rng, 3, c1, c2),
        LayerSpec("relu"),
        LayerSpec("maxpool2d", {"kernel": 2, "stride": 2}),
        LayerSpec("flatten"),
        dense_layer(rng, (h // 4) * (w // 4) * c2, n_classes),
        LayerSpec("softmax"),
    ]
    return ClassifierModel(layers, input_shape)


def mlp_architecture(input_shape, n_classes=2, hidden=16, seed=0) -> ClassifierModel:
    rng = np.random.default_rng(seed)
    d = int(np.prod(input_shape))
    layers = [LayerSpec("flatten")] if len(input_shape) > 1 else []
    layers += [dense_layer(rng, d, hidden), LayerSpec("relu"),
               dense_layer(rng, hidden, n_classes), LayerSpec("softmax")]
    return ClassifierModel(layers, input_shape)


def sharpen(model: ClassifierModel, k: float) -> ClassifierModel:
    """Copy of ``model`` whose logits are multiplied by ``k`` (optimal temperature is then ``k``)."""
    layers = [_copy_layer(layer) for layer in model.layers[:-1]]
    layers += [LayerSpec("scale", {"factor": float(k)}), LayerSpec("softmax")]
    return ClassifierModel(layers, model.input_shape, {**model.meta, "sharpened_by": float(k)})


def _copy_layer(layer):
    return LayerSpec(layer.kind, dict(layer.params), {k: v.copy() for k, v in layer.weights.items()})


def copy_model(model: ClassifierModel) -> ClassifierModel:
    return ClassifierModel([_copy_layer(l) for l in model.layers], model.input_shape, model.meta)


# ---------------------------------------------------------------------------
# training

class Adam:
    """Plain Adam over a list of float arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    architecture: str = "default"
    widths: tuple = (16, 32)
    log_every: int = 0
    history: list = field(default_factory=list)


def cross_entropy(logits: Variable, labels) -> Variable:
    return ad.neg(ad.mean(ad.pick(ad.log_softmax(logits), labels)))


def accuracy(model, xs, labels) -> float:
    _, _, pred = predict_batch(model, xs)
    return float(np.mean(pred == np.asarray(labels)))


def train_classifier(config: TrainConfig, train, model: ClassifierModel | None = None) -> ClassifierModel:
    """Fit a classifier with cross-entropy and Adam on a deterministic minibatch schedule.

    ``train`` is a :class:`calsal.data.Dataset`. The returned model records
    ``train_accuracy`` in its metadata. Raises :class:`TrainingDiverged` if
    the loss becomes non-finite.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if model is None:
        shape = train.images.shape[1:]
        if config.architecture == "default":
            model = default_architecture(shape, train.n_classes, config.seed, tuple(config.widths))
        elif config.architecture == "mlp":
            model = mlp_architecture(shape, train.n_classes, seed=config.seed)
        else:
            raise ValueError(f"unknown architecture {config.architecture!r}")
    rng = np.random.default_rng(config.seed + 1)
    arrays = [[layer.weights[k] for k in layer.weights] for layer in model.layers]
    flat = [a for group in arrays for a in group]
    opt = Adam(flat, lr=config.lr)
    images = train.images.astype(np.float32)
    labels = np.asarray(train.labels)
    n = len(images)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            params = [{k: ad.variable(layer.weights[k]) for k in layer.weights} for layer in model.layers]
            logits = model.logits_graph(ad.constant(images[idx]), params[:-1])
            loss = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.value):
                raise TrainingDiverged(f"loss became {loss.value} at epoch {epoch}, batch starting {start}")
            leaves = [v for group in params for v in group.values()]
            grads = ad.gradient(loss, leaves)
            opt.step(grads)
            losses.append(float(loss.value))
        config.history.append(float(np.mean(losses)))
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"epoch {epoch + 1}: loss {config.history[-1]:.4f}")
    model.meta["train_accuracy"] = accuracy(model, images, labels)
    model.meta["seed"] = config.seed
    model.meta["epochs"] = config.epochs
    return model


# ---------------------------------------------------------------------------
# file format: "CTIM" | u16 version | u32 header length | JSON header | f32 blobs

def save_model(model: ClassifierModel, path) -> None:
    header = {
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "meta": model.meta,
        "layers": [
            {
                "kind": layer.kind,
                "params": layer.params,
                "weights": [{"name": k, "shape": list(v.shape)} for k, v in layer.weights.items()],
            }
            for layer in model.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for layer in model.layers:
            for arr in layer.weights.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> ClassifierModel:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 10:
        raise ModelFormatError(f"truncated header at offset {len(data)}")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version} at offset 4 (expected {VERSION})")
    offset = 10
    if len(data) < offset + hlen:
        raise ModelFormatError(f"truncated JSON header at offset {len(data)}, need {offset + hlen} bytes")
    header = json.loads(data[offset:offset + hlen].decode("utf-8"))
    offset += hlen
    layers = []
    for spec in header["layers"]:
        weights = {}
        for w in spec["weights"]:
            count = int(np.prod(w["shape"]))
            end = offset + 4 * count
            if end > len(data):
                raise ModelFormatError(
                    f"truncated weights '{w['name']}' of layer {len(layers)} at offset {offset}: "
                    f"need {end - offset} bytes, {len(data) - offset} left")
            weights[w["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset) \
                .reshape(w["shape"]).astype(np.float32)
            offset = end
        layers.append(LayerSpec(spec["kind"], spec["params"], weights))
    if offset != len(data):
        raise ModelFormatError(f"{len(data) - offset} trailing bytes at offset {offset}")
    return ClassifierModel(layers, header["input_shape"], header.get("meta"))
