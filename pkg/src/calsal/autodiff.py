"""Dense-array reverse-mode differentiation for small channel-last CNNs.

Arrays are plain ``numpy.ndarray`` objects (float32 by default). A
:class:`Variable` wraps an array and remembers how it was produced so that
:func:`gradient` can walk the recorded graph backwards.

Every op keeps the dtype of its input: float32 inputs give float32 outputs,
float64 inputs (used by the finite-difference checks) stay float64.
Matrix products and reductions accumulate in float64 and are rounded back.

Layout conventions: images are ``(N, H, W, C)``, conv weights are
``(k, k, C_in, C_out)``, dense weights are ``(D_in, D_out)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

F64 = np.float64

LAYER_KINDS = (
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "softmax",
    "log",
    "affine",
    "scale",
)


class ShapeError(ValueError):
    """Raised when an array does not fit the shape a layer declares."""


class TapeError(ValueError):
    """Raised when a gradient is requested for something off the tape."""


class Variable:
    """A node of the recorded computation.

    Attributes:
        value: forward value.
        grad: gradient accumulator, filled by :func:`gradient`.
        parents: input nodes.
        op: short op name, for debugging.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad or backward_fn is not None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Variable(op={self.op}, shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, as_variable(other, self.value.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_variable(other, self.value.dtype)))

    def __rsub__(self, other):
        return add(as_variable(other, self.value.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, as_variable(other, self.value.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def variable(value, dtype=np.float32, requires_grad=True) -> Variable:
    """Create a leaf node that gradients can be taken with respect to."""
    arr = np.array(value, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in tensor")
    return Variable(arr, requires_grad=requires_grad)


def constant(value, dtype=None) -> Variable:
    arr = np.asarray(value, dtype=dtype)
    return Variable(arr, requires_grad=False)


def as_variable(value, dtype) -> Variable:
    if isinstance(value, Variable):
        return value
    return constant(np.asarray(value, dtype=dtype))


def _node(value, parents, backward_fn, op) -> Variable:
    if any(p.requires_grad for p in parents):
        return Variable(value, parents, backward_fn, op)
    return Variable(value, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Variable, b: Variable) -> Variable:
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def neg(a: Variable) -> Variable:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a: Variable, b: Variable) -> Variable:
    out = a.value * b.value

    def backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _node(out, (a, b), backward, "mul")


def absolute(a: Variable) -> Variable:
    # sign(0) = 0: subgradient convention, same as relu
    return _node(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),), "abs")


def total(a: Variable, axis=None) -> Variable:
    """Sum over ``axis`` (all axes by default), accumulated in float64."""
    out = np.asarray(a.value.sum(axis=axis, dtype=F64), dtype=a.value.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.value.dtype),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).astype(a.value.dtype),)

    return _node(out, (a,), backward, "sum")


def mean(a: Variable, axis=None) -> Variable:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return total(a, axis) * (1.0 / n)


def getitem(a: Variable, index) -> Variable:
    out = a.value[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)

    def backward(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g  # a basic index never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward, "getitem")


Variable.__getitem__ = getitem


def pick(a: Variable, columns) -> Variable:
    """Select ``a[i, columns[i]]`` for every row ``i`` of a 2-D node."""
    rows = np.arange(a.shape[0])
    columns = np.asarray(columns)
    out = a.value[rows, columns]

    def backward(g):
        full = np.zeros_like(a.value)
        full[rows, columns] = g
        return (full,)

    return _node(out, (a,), backward, "pick")


def reshape(a: Variable, shape) -> Variable:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


# ---------------------------------------------------------------------------
# raw kernels (numpy in, numpy out) shared by the graph ops and by LRP

def conv2d_forward(x, w, b=None, stride=1, padding=0):
    """Channel-last 2-D cross-correlation with zero padding."""
    k = w.shape[0]
    n, h, wd, c = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x.astype(F64), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    w64 = w.astype(F64)
    if k * k * c <= 32:
        # few input channels: one contraction over sliding windows is cheapest
        view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        out = np.einsum("nhwcij,ijco->nhwo", view, w64, optimize=True)
    else:
        out = np.zeros((n, ho, wo, w.shape[3]), dtype=F64)
        for i in range(k):
            for j in range(k):
                out += xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] @ w64[i, j]
    if b is not None:
        out += b.astype(F64)
    return out.astype(x.dtype)


def conv2d_backward_input(g, w, x_shape, stride=1, padding=0):
    k = w.shape[0]
    if stride == 1 and padding <= k - 1:
        # full correlation with the flipped, transposed kernel
        flipped = np.transpose(w[::-1, ::-1], (0, 1, 3, 2))
        return conv2d_forward(g.astype(F64), flipped, None, 1, k - 1 - padding)
    n, h, wd, c = x_shape
    ho, wo = g.shape[1], g.shape[2]
    g64 = g.astype(F64)
    w64 = w.astype(F64)
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=F64)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g64 @ w64[i, j].T
    return dxp[:, padding:padding + h, padding:padding + wd, :]


def conv2d_backward_weight(g, x, k, stride=1, padding=0):
    ho, wo = g.shape[1], g.shape[2]
    xp = np.pad(x.astype(F64), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    g64 = g.astype(F64)
    dw = np.empty((k, k, x.shape[3], g.shape[3]), dtype=F64)
    for i in range(k):
        for j in range(k):
            patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            dw[i, j] = np.tensordot(patch, g64, axes=([0, 1, 2], [0, 1, 2]))
    return dw


def _pool_slices(x, k, stride):
    ho = (x.shape[1] - k) // stride + 1
    wo = (x.shape[2] - k) // stride + 1
    return [x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            for i in range(k) for j in range(k)]


def _tiled(x, k, stride):
    """``(N, Ho, k, Wo, k, C)`` view when pooling windows tile the input exactly, else None."""
    n, h, w, c = x.shape
    if stride != k or h % k or w % k:
        return None
    return x.reshape(n, h // k, k, w // k, k, c)


def maxpool_forward(x, k, stride):
    return np.maximum.reduce(_pool_slices(x, k, stride))


def maxpool_argmax(x, out, k, stride):
    """Window offset of the maximum per output cell; the first maximum wins ties."""
    idx = np.full(out.shape, -1, dtype=np.int64)
    for o, sl in enumerate(_pool_slices(x, k, stride)):
        idx[(idx < 0) & (sl == out)] = o
    return idx


def maxpool_backward(g, idx, x_shape, k, stride):
    dx = np.zeros(x_shape, dtype=F64)
    ho, wo = g.shape[1], g.shape[2]
    for o in range(k * k):
        i, j = divmod(o, k)
        dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(idx == o, g, 0.0)
    return dx


def maxpool_route(g, x, out, k, stride):
    """Send each output gradient to the first maximal input of its window."""
    tiles = _tiled(x, k, stride)
    if tiles is None:
        return maxpool_backward(g, maxpool_argmax(x, out, k, stride), x.shape, k, stride)
    dx = np.zeros(tiles.shape, dtype=F64)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(k):
        for j in range(k):
            hit = (tiles[:, :, i, :, j, :] == out) & ~taken
            dx[:, :, i, :, j, :] = np.where(hit, g, 0.0)
            taken |= hit
    return dx.reshape(x.shape)


def avgpool_forward(x, k, stride):
    return np.add.reduce([sl.astype(F64) for sl in _pool_slices(x, k, stride)]) / (k * k)


def avgpool_backward(g, x_shape, k, stride):
    dx = np.zeros(x_shape, dtype=F64)
    ho, wo = g.shape[1], g.shape[2]
    share = g.astype(F64) / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += share
    return dx


def softmax_array(z, axis=-1):
    z64 = np.asarray(z, dtype=F64)
    e = np.exp(z64 - z64.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.asarray(z).dtype)


# ---------------------------------------------------------------------------
# graph ops for layers

def conv2d(x: Variable, w: Variable, b: Variable | None, stride=1, padding=0) -> Variable:
    k = w.shape[0]
    out = conv2d_forward(x.value, w.value, None if b is None else b.value, stride, padding)
    dtype = x.value.dtype

    def backward(g):
        dx = conv2d_backward_input(g, w.value, x.shape, stride, padding).astype(dtype) \
            if x.requires_grad else None
        dw = conv2d_backward_weight(g, x.value, k, stride, padding).astype(w.value.dtype) \
            if w.requires_grad else None
        if b is None:
            return dx, dw
        db = g.sum(axis=(0, 1, 2), dtype=F64).astype(b.value.dtype) if b.requires_grad else None
        return dx, dw, db

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv2d")


def matmul(x: Variable, w: Variable) -> Variable:
    out = (x.value.astype(F64) @ w.value.astype(F64)).astype(x.value.dtype)

    def backward(g):
        g64 = g.astype(F64)
        dx = (g64 @ w.value.astype(F64).T).astype(x.value.dtype) if x.requires_grad else None
        dw = (x.value.astype(F64).T @ g64).astype(w.value.dtype) if w.requires_grad else None
        return dx, dw

    return _node(out, (x, w), backward, "matmul")


def dense(x: Variable, w: Variable, b: Variable | None) -> Variable:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def affine(x: Variable, w: Variable, b: Variable | None) -> Variable:
    """``y = W x + b`` applied to every row vector of ``x``."""
    out = (x.value.astype(F64) @ w.value.astype(F64).T).astype(x.value.dtype)

    def backward(g):
        g64 = g.astype(F64)
        dx = (g64 @ w.value.astype(F64)).astype(x.value.dtype) if x.requires_grad else None
        dw = (g64.T @ x.value.astype(F64)).astype(w.value.dtype) if w.requires_grad else None
        return dx, dw

    y = _node(out, (x, w), backward, "affine")
    return y if b is None else add(y, b)


def relu(x: Variable) -> Variable:
    out = np.maximum(x.value, 0)
    return _node(out, (x,), lambda g: (g * (x.value > 0),), "relu")


def maxpool2d(x: Variable, k: int, stride: int) -> Variable:
    out = maxpool_forward(x.value, k, stride)

    def backward(g):
        return (maxpool_route(g, x.value, out, k, stride).astype(x.value.dtype),)

    return _node(out, (x,), backward, "maxpool2d")


def avgpool2d(x: Variable, k: int, stride: int) -> Variable:
    out = avgpool_forward(x.value, k, stride).astype(x.value.dtype)

    def backward(g):
        return (avgpool_backward(g, x.shape, k, stride).astype(x.value.dtype),)

    return _node(out, (x,), backward, "avgpool2d")


def flatten(x: Variable) -> Variable:
    return reshape(x, (x.shape[0], -1))


def softmax(x: Variable) -> Variable:
    s = softmax_array(x.value)

    def backward(g):
        s64 = s.astype(F64)
        g64 = g.astype(F64)
        return ((s64 * (g64 - (g64 * s64).sum(axis=-1, keepdims=True))).astype(s.dtype),)

    return _node(s, (x,), backward, "softmax")


def log_softmax(x: Variable) -> Variable:
    z = x.value.astype(F64)
    shifted = z - z.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        g64 = g.astype(F64)
        return ((g64 - np.exp(out) * g64.sum(axis=-1, keepdims=True)).astype(x.value.dtype),)

    return _node(out.astype(x.value.dtype), (x,), backward, "log_softmax")


def log(x: Variable, floor: float = 0.0) -> Variable:
    """Natural log of ``max(x, floor)``; gradient is zero where the floor is active."""
    clipped = np.maximum(x.value, floor) if floor > 0 else x.value
    with np.errstate(divide="raise"):
        out = np.log(clipped.astype(F64)).astype(x.value.dtype)
    live = x.value > floor if floor > 0 else np.ones(x.shape, dtype=bool)

    def backward(g):
        return (np.where(live, g / clipped, 0).astype(x.value.dtype),)

    return _node(out, (x,), backward, "log")


def scale(x: Variable, factor: float) -> Variable:
    f = x.value.dtype.type(factor)
    return _node(x.value * f, (x,), lambda g: (g * f,), "scale")


# ---------------------------------------------------------------------------
# layers

@dataclass
class LayerSpec:
    """One layer of a classifier.

    ``params`` holds hyperparameters (``kernel``, ``stride``, ``padding``,
    ``in_channels``, ``out_channels``, ``in_features``, ``out_features``,
    ``floor``, ``factor``); ``weights`` maps ``"W"``/``"b"`` to arrays.
    ``input_shape`` is the per-sample input shape, filled in when the layer
    is placed in a model.
    """

    kind: str
    params: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    input_shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def _fail(index, layer, expected, got):
    where = f"layer {index} ({layer.kind})" if index is not None else f"layer ({layer.kind})"
    raise ShapeError(f"{where}: expected input shape {tuple(expected)}, got {tuple(got)}")


def output_shape(layer: LayerSpec, in_shape: Sequence[int], index: int | None = None) -> tuple:
    """Per-sample output shape of ``layer`` for per-sample input ``in_shape``."""
    in_shape = tuple(int(s) for s in in_shape)
    p = layer.params
    kind = layer.kind
    if kind == "conv2d":
        w = layer.weights["W"]
        k, s, pad = w.shape[0], p.get("stride", 1), p.get("padding", 0)
        if len(in_shape) != 3 or in_shape[2] != w.shape[2]:
            _fail(index, layer, ("H", "W", w.shape[2]), in_shape)
        ho = (in_shape[0] + 2 * pad - k) // s + 1
        wo = (in_shape[1] + 2 * pad - k) // s + 1
        if ho < 1 or wo < 1:
            _fail(index, layer, (f">={k - 2 * pad}", f">={k - 2 * pad}", w.shape[2]), in_shape)
        return (ho, wo, w.shape[3])
    if kind in ("maxpool2d", "avgpool2d"):
        k = p["kernel"]
        s = p.get("stride", k)
        if len(in_shape) != 3 or in_shape[0] < k or in_shape[1] < k:
            _fail(index, layer, (f">={k}", f">={k}", "C"), in_shape)
        return ((in_shape[0] - k) // s + 1, (in_shape[1] - k) // s + 1, in_shape[2])
    if kind == "dense":
        d = layer.weights["W"].shape[0]
        if in_shape != (d,):
            _fail(index, layer, (d,), in_shape)
        return (layer.weights["W"].shape[1],)
    if kind == "affine":
        c = layer.weights["W"].shape[1]
        if in_shape != (c,):
            _fail(index, layer, (c,), in_shape)
        return (layer.weights["W"].shape[0],)
    if kind == "flatten":
        return (int(np.prod(in_shape)),)
    if kind == "softmax" and len(in_shape) != 1:
        _fail(index, layer, ("C",), in_shape)
    return in_shape


def layer_graph(layer: LayerSpec, x: Variable, params: dict[str, Variable] | None = None) -> Variable:
    """Apply ``layer`` to a batched node ``x``.

    ``params`` optionally supplies weight nodes (for training); otherwise the
    layer's stored weights enter as constants.
    """
    if params is None:
        params = {name: constant(arr) for name, arr in layer.weights.items()}
    p = layer.params
    kind = layer.kind
    if kind == "conv2d":
        return conv2d(x, params["W"], params.get("b"), p.get("stride", 1), p.get("padding", 0))
    if kind == "dense":
        return dense(x, params["W"], params.get("b"))
    if kind == "affine":
        return affine(x, params["W"], params.get("b"))
    if kind == "relu":
        return relu(x)
    if kind == "maxpool2d":
        return maxpool2d(x, p["kernel"], p.get("stride", p["kernel"]))
    if kind == "avgpool2d":
        return avgpool2d(x, p["kernel"], p.get("stride", p["kernel"]))
    if kind == "flatten":
        return flatten(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "log":
        return log(x, p.get("floor", 0.0))
    return scale(x, p["factor"])


def apply_layer(layer: LayerSpec, x: np.ndarray, index: int | None = None) -> np.ndarray:
    """Evaluate one layer on a single sample or on a batch.

    ``x`` may have the layer's per-sample input shape or an extra leading
    batch axis. Raises :class:`ShapeError` naming the layer when it does not fit.
    """
    x = np.asarray(x)
    declared = layer.input_shape
    if declared is not None and x.shape == tuple(declared):
        batched = False
    elif declared is not None and x.shape[1:] == tuple(declared):
        batched = True
    elif declared is not None:
        _fail(index, layer, declared, x.shape)
    else:
        batched = _guess_batched(layer, x)
    sample_shape = x.shape[1:] if batched else x.shape
    output_shape(layer, sample_shape, index)
    xb = x if batched else x[None]
    out = layer_graph(layer, constant(xb)).value
    return out if batched else out[0]


def _guess_batched(layer, x):
    if layer.kind in ("conv2d", "maxpool2d", "avgpool2d"):
        return x.ndim == 4
    if layer.kind in ("dense", "affine", "softmax"):
        return x.ndim == 2
    return False


# ---------------------------------------------------------------------------
# differentiation

def _topological(root: Variable) -> list[Variable]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Variable, seed=None) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node on the tape."""
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=root.value.dtype)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.value.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g


def gradient(output: Variable, wrt: Variable | Sequence[Variable]):
    """Gradient of a scalar node with respect to one or more leaves.

    Raises :class:`TapeError` when ``output`` is not a scalar or a requested
    leaf does not feed into it.
    """
    if output.value.size != 1:
        raise TapeError(f"output must be a scalar, got shape {output.shape}")
    targets = [wrt] if isinstance(wrt, Variable) else list(wrt)
    on_tape = {id(n) for n in _topological(output)}
    for t in targets:
        if id(t) not in on_tape:
            raise TapeError("requested variable is not on the tape of this output")
    backward(output)
    grads = [t.grad.copy() for t in targets]
    return grads[0] if isinstance(wrt, Variable) else grads


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else F64)
    grad = np.zeros(x.shape, dtype=F64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad.astype(x.dtype)
