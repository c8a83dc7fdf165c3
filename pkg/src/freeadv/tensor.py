"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to tensors that were flagged
on it (as model inputs or parameters). :func:`backward_dual` then walks the
tape once in reverse and returns gradients for parameters *and* inputs
together, which is what lets free adversarial training reuse one backward
pass for both the descent step and the perturbation step.

Storage is float32. Primitives follow numpy type promotion, so feeding a
float64 tensor runs the whole graph in float64 (used by the finite-difference
oracle).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import kernels, ledger

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array. ``node`` links it to a tape when it was recorded."""

    __slots__ = ("data", "node")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or _float_dtype(data), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.node: tuple[Tape, int] | None = None

    @classmethod
    def wrap(cls, arr: np.ndarray, node=None) -> "Tensor":
        """Take ownership of ``arr`` without copying."""
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype})"


def _raise_item(t):
    raise ShapeError(f"item() needs a single element, got shape {list(t.shape)}")


def _float_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return np.float64
    return DTYPE


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DTYPE)
    return arr


# --------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    saved: Any = None
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    dtype: Any = DTYPE


class Tape:
    """Recorded computation graph for one forward pass.

    Use as a context manager; primitives applied inside it to tensors flagged
    with :meth:`input` or :meth:`param` are appended in execution order, which
    is a topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}
        self.param_ids: dict[str, int] = {}
        self.loss_id: int | None = None
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def _leaf(self, kind: str, name: str, value) -> Tensor:
        if name in self.input_ids or name in self.param_ids:
            raise TapeError(f"leaf name {name!r} already flagged on this tape")
        arr = as_array(value)
        self.nodes.append(Node(kind, (), arr.shape, name=name, dtype=arr.dtype))
        nid = len(self.nodes) - 1
        (self.input_ids if kind == "input" else self.param_ids)[name] = nid
        return Tensor.wrap(arr, (self, nid))

    def input(self, name: str, value) -> Tensor:
        return self._leaf("input", name, value)

    def param(self, name: str, value) -> Tensor:
        return self._leaf("param", name, value)

    def set_loss(self, t: Tensor) -> Tensor:
        if t.node is None or t.node[0] is not self:
            raise TapeError("loss tensor was not recorded on this tape")
        if t.data.size != 1 or t.data.ndim > 1:
            raise TapeError(f"loss must be scalar, got shape {list(t.shape)}")
        self.loss_id = t.node[1]
        return t


_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "freeadv_tape", default=None
)


@contextlib.contextmanager
def no_record():
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


# --------------------------------------------------------------------------
# Primitives


@dataclass(frozen=True)
class Primitive:
    check: Callable  # (shapes, attrs) -> None, raises ShapeError
    forward: Callable  # (arrays, attrs) -> (out, saved)
    backward: Callable  # (gout, arrays, saved, attrs, needs) -> tuple of grads|None


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.check, cls.forward, cls.backward)
        return cls

    return register


def _expect(cond, what, expected, actual):
    if not cond:
        raise ShapeError(f"{what}: expected {expected}, got {actual}")


@primitive("matmul")
class _MatMul:
    @staticmethod
    def check(shapes, attrs):
        a, b = shapes
        _expect(len(a) == 2 and len(b) == 2, "matmul rank", "2-d operands", (list(a), list(b)))
        _expect(a[1] == b[0], "matmul inner dim", f"[*, {a[1]}] @ [{a[1]}, *]", (list(a), list(b)))

    @staticmethod
    def forward(xs, attrs):
        return xs[0] @ xs[1], None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        a, b = xs
        return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


@primitive("add")
class _Add:
    @staticmethod
    def check(shapes, attrs):
        a, b = shapes
        _expect(a == b or tuple(a[1:]) == tuple(b), "add", f"{list(a)} or {list(a[1:])}", list(b))

    @staticmethod
    def forward(xs, attrs):
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        a, b = xs
        gb = None
        if needs[1]:
            gb = g if a.shape == b.shape else g.sum(axis=0)
        return (g if needs[0] else None, gb)


@primitive("mul")
class _Mul:
    @staticmethod
    def check(shapes, attrs):
        _expect(shapes[0] == shapes[1], "mul", list(shapes[0]), list(shapes[1]))

    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (g * xs[1] if needs[0] else None, g * xs[0] if needs[1] else None)


@primitive("scale")
class _Scale:
    @staticmethod
    def check(shapes, attrs):
        pass

    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[0].dtype.type(attrs["c"]), None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (g * g.dtype.type(attrs["c"]),)


@primitive("relu")
class _Relu:
    @staticmethod
    def check(shapes, attrs):
        pass

    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0), None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (g * (xs[0] > 0),)


@primitive("flatten")
class _Flatten:
    @staticmethod
    def check(shapes, attrs):
        _expect(len(shapes[0]) >= 1, "flatten", "batch axis", list(shapes[0]))

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return x.reshape(x.shape[0], -1), None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (g.reshape(xs[0].shape),)


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    f, cw, kh, kw = w_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


@primitive("conv2d")
class _Conv2d:
    @staticmethod
    def check(shapes, attrs):
        x, w = shapes[0], shapes[1]
        stride, pad = attrs.get("stride", 1), attrs.get("padding", 0)
        _expect(len(x) == 4, "conv2d input", "[N, C, H, W]", list(x))
        _expect(len(w) == 4, "conv2d kernel", "[F, C, kh, kw]", list(w))
        _expect(x[1] == w[1], "conv2d channels", x[1], w[1])
        _expect(stride >= 1 and pad >= 0, "conv2d attrs", "stride >= 1, padding >= 0", (stride, pad))
        _expect(
            w[2] <= x[2] + 2 * pad and w[3] <= x[3] + 2 * pad,
            "conv2d kernel size", f"<= padded input {[x[2] + 2 * pad, x[3] + 2 * pad]}", list(w[2:]),
        )
        if len(shapes) == 3:
            _expect(tuple(shapes[2]) == (w[0],), "conv2d bias", [w[0]], list(shapes[2]))

    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        stride, pad = attrs.get("stride", 1), attrs.get("padding", 0)
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        x = np.ascontiguousarray(x)
        n = x.shape[0]
        f, c, kh, kw = w.shape
        oh, ow = _conv_geometry(xs[0].shape, w.shape, stride, pad)
        cols = kernels.im2col(x, kh, kw, stride)
        out = cols @ w.reshape(f, -1).T
        if len(xs) == 3:
            out += xs[2]
        out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
        return out, (cols, x.shape)

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        cols, padded_shape = saved
        w = xs[1]
        f = w.shape[0]
        stride, pad = attrs.get("stride", 1), attrs.get("padding", 0)
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gx = gw = gb = None
        if needs[0]:
            dcols = g2 @ w.reshape(f, -1)
            gx = kernels.col2im(dcols, padded_shape, w.shape[2], w.shape[3], stride)
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
        if needs[1]:
            gw = (g2.T @ cols).reshape(w.shape)
        if len(xs) == 3 and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gw, gb)[: len(xs)]


@primitive("maxpool2d")
class _MaxPool:
    @staticmethod
    def check(shapes, attrs):
        x = shapes[0]
        k, s = attrs.get("k", 2), attrs.get("stride", attrs.get("k", 2))
        _expect(len(x) == 4, "maxpool2d input", "[N, C, H, W]", list(x))
        _expect(k >= 1 and s >= 1 and k <= x[2] and k <= x[3], "maxpool2d window", f"1 <= k <= {list(x[2:])}", (k, s))

    @staticmethod
    def forward(xs, attrs):
        k = attrs.get("k", 2)
        out, arg = kernels.maxpool_forward(np.ascontiguousarray(xs[0]), k, attrs.get("stride", k))
        return out, arg

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), saved, xs[0].shape),)


def _check_labels(shapes, attrs, what):
    z = shapes[0]
    _expect(len(z) == 2, what, "logits [B, C]", list(z))
    labels = attrs["labels"]
    _expect(labels.shape == (z[0],), f"{what} labels", [z[0]], list(labels.shape))
    if labels.size and (labels.min() < 0 or labels.max() >= z[1]):
        raise ValueError(f"{what}: label out of range [0, {z[1]})")


@primitive("softmax_xent")
class _SoftmaxXent:
    """Per-example cross-entropy of softmax(logits) against integer labels."""

    @staticmethod
    def check(shapes, attrs):
        _check_labels(shapes, attrs, "softmax_xent")

    @staticmethod
    def forward(xs, attrs):
        z = xs[0]
        y = attrs["labels"]
        rows = np.arange(len(y))
        top = z.argmax(axis=1)
        shifted = z - z[rows, top][:, None]
        e = np.exp(shifted)
        e[rows, top] = 0.0
        rest = e.sum(axis=1)  # sum of the non-max terms, so log1p keeps tiny losses
        e[rows, top] = 1.0
        logp_y = shifted[rows, y] - np.log1p(rest)
        return -logp_y, e / (1.0 + rest)[:, None]

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        y = attrs["labels"]
        rows = np.arange(len(y))
        d = saved.copy()
        d[rows, y] = 0.0
        # p_y - 1 == -(sum of the other probabilities), without the cancellation
        d[rows, y] = -d.sum(axis=1)
        return (d * g[:, None],)


@primitive("cw_margin")
class _CWMargin:
    """Per-example max_{i != y} z_i - z_y (ties resolve to the lowest index)."""

    @staticmethod
    def check(shapes, attrs):
        _check_labels(shapes, attrs, "cw_margin")
        _expect(shapes[0][1] >= 2, "cw_margin classes", ">= 2", shapes[0][1])

    @staticmethod
    def forward(xs, attrs):
        z = xs[0]
        y = attrs["labels"]
        rows = np.arange(len(y))
        masked = z.copy()
        masked[rows, y] = -np.inf
        other = masked.argmax(axis=1)
        return z[rows, other] - z[rows, y], other

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        y = attrs["labels"]
        rows = np.arange(len(y))
        gz = np.zeros_like(xs[0])
        gz[rows, saved] += g
        gz[rows, y] -= g
        return (gz,)


@primitive("mean")
class _Mean:
    @staticmethod
    def check(shapes, attrs):
        _expect(int(np.prod(shapes[0])) > 0, "mean", "non-empty tensor", list(shapes[0]))

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.asarray(x.sum() / x.dtype.type(x.size), dtype=x.dtype), None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        x = xs[0]
        return (np.full(x.shape, g / x.dtype.type(x.size), dtype=x.dtype),)


@primitive("sum")
class _Sum:
    @staticmethod
    def check(shapes, attrs):
        pass

    @staticmethod
    def forward(xs, attrs):
        return np.asarray(xs[0].sum(), dtype=xs[0].dtype), None

    @staticmethod
    def backward(g, xs, saved, attrs, needs):
        return (np.full(xs[0].shape, g, dtype=xs[0].dtype),)


def apply_primitive(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Evaluate one primitive; records a node when a tape is active and any
    input was recorded on it."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    attrs = attrs or {}
    arrays = [as_array(t) for t in inputs]
    prim.check([a.shape for a in arrays], attrs)
    dt = np.result_type(*arrays)
    if any(a.dtype != dt for a in arrays):
        arrays = [a.astype(dt) for a in arrays]
    with np.errstate(over="ignore", invalid="ignore"):
        out, saved = prim.forward(arrays, attrs)
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind}: non-finite output")

    tape = _active_tape.get()
    node = None
    if tape is not None:
        ids = tuple(
            t.node[1] if isinstance(t, Tensor) and t.node is not None and t.node[0] is tape else None
            for t in inputs
        )
        if any(i is not None for i in ids):
            tape.nodes.append(Node(kind, ids, out.shape, (arrays, saved), attrs, dtype=out.dtype))
            node = (tape, len(tape.nodes) - 1)
    return Tensor.wrap(out, node)


# thin functional wrappers ---------------------------------------------------

def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def scale(x, c: float):
    return apply_primitive("scale", [x], {"c": c})


def relu(x):
    return apply_primitive("relu", [x])


def flatten(x):
    return apply_primitive("flatten", [x])


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    ins = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", ins, {"stride": stride, "padding": padding})


def maxpool2d(x, k: int = 2, stride: int | None = None):
    return apply_primitive("maxpool2d", [x], {"k": k, "stride": stride or k})


def softmax_xent(logits, labels):
    return apply_primitive("softmax_xent", [logits], {"labels": np.asarray(labels, dtype=np.int64)})


def cw_margin(logits, labels):
    return apply_primitive("cw_margin", [logits], {"labels": np.asarray(labels, dtype=np.int64)})


def mean(x):
    return apply_primitive("mean", [x])


def tsum(x):
    return apply_primitive("sum", [x])


# --------------------------------------------------------------------------
# Backward


@dataclass
class GradPair:
    g_theta: dict[str, Tensor]
    g_adv: dict[str, Tensor]


def backward_dual(tape: Tape, params: bool = True, inputs: bool = True) -> GradPair:
    """One reverse traversal of ``tape`` yielding parameter and input gradients.

    Passing ``params=False`` (or ``inputs=False``) prunes the branches that only
    feed the unwanted leaves; the values of the requested gradients are
    unaffected. Counts as exactly one backward pass in the active ledger.
    """
    if tape.loss_id is None:
        raise TapeError("tape has no loss set")
    loss = tape.nodes[tape.loss_id]
    if int(np.prod(loss.shape)) != 1 or len(loss.shape) > 1:
        raise TapeError(f"loss must be scalar, got shape {list(loss.shape)}")

    wanted = set()
    if params:
        wanted.update(tape.param_ids.values())
    if inputs:
        wanted.update(tape.input_ids.values())
    # nodes whose value depends on a wanted leaf
    live = [False] * len(tape.nodes)
    for nid, node in enumerate(tape.nodes):
        if not node.inputs:
            live[nid] = nid in wanted
        else:
            live[nid] = any(i is not None and live[i] for i in node.inputs)

    grads: dict[int, np.ndarray] = {}
    if live[tape.loss_id]:
        grads[tape.loss_id] = np.ones(loss.shape, dtype=loss.dtype)
    for nid in range(tape.loss_id, -1, -1):
        node = tape.nodes[nid]
        g = grads.pop(nid, None) if node.inputs else grads.get(nid)
        if g is None or not node.inputs:
            continue
        arrays, saved = node.saved
        needs = [i is not None and live[i] for i in node.inputs]
        gins = PRIMITIVES[node.kind].backward(g, arrays, saved, node.attrs, needs)
        for i, gi in zip(node.inputs, gins):
            if i is None or gi is None or not live[i]:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi

    def collect(ids):
        out = {}
        for name, nid in ids.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros(tape.nodes[nid].shape, dtype=tape.nodes[nid].dtype)
            out[name] = Tensor.wrap(np.ascontiguousarray(g))
        return out

    ledger.record(ledger.BACKWARD)
    return GradPair(collect(tape.param_ids) if params else {}, collect(tape.input_ids) if inputs else {})


# --------------------------------------------------------------------------
# Finite differences


def finite_diff_grad(f: Callable[[np.ndarray], Any], x, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = np.array(as_array(x), dtype=np.float64)
    grad = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = _scalar(f(base.copy()))
        flat[i] = keep - h
        lo = _scalar(f(base.copy()))
        flat[i] = keep
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        grad[i] = (hi - lo) / (2 * h)
    return Tensor.wrap(grad.reshape(base.shape))


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v, dtype=np.float64).reshape(-1)[0])
