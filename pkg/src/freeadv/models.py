"""Small MLP / convnet classifiers, He initialization, momentum SGD and the
binary checkpoint format."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ledger
from .tensor import (
    DTYPE,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    conv2d,
    cw_margin,
    flatten,
    matmul,
    maxpool2d,
    mean,
    no_record,
    relu,
    scale,
    softmax_xent,
)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``kind="mlp"`` flattens the input and applies dense layers of widths
    ``hidden`` (an empty tuple gives a linear model). ``kind="convnet"`` stacks
    ReLU convolutions with ``channels`` output channels, one max-pool, then a
    dense head with widths ``hidden``. ``input_scale`` multiplies the raw input
    first, so attacks can work in pixel units while the network sees [0, 1].
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = ()
    channels: tuple[int, ...] = (16, 32)
    kernel: int = 3
    padding: int = 0
    pool: int = 2
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))

    def to_dict(self) -> dict:
        return asdict(self)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in creation order; raises SpecError if the
        layers do not conform."""
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(d < 1 for d in self.input_shape) or any(d < 1 for d in self.hidden):
            raise SpecError("all dimensions must be positive")
        shapes = []
        if self.kind == "mlp":
            width = math.prod(self.input_shape)
        elif self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise SpecError(f"convnet input_shape must be (C, H, W), got {self.input_shape}")
            c, h, w = self.input_shape
            for i, f in enumerate(self.channels, 1):
                h = h + 2 * self.padding - self.kernel + 1
                w = w + 2 * self.padding - self.kernel + 1
                if f < 1 or h < 1 or w < 1:
                    raise SpecError(f"conv{i} leaves no spatial extent ({h}x{w})")
                shapes += [(f"conv{i}.w", (f, c, self.kernel, self.kernel)), (f"conv{i}.b", (f,))]
                c = f
            if self.pool > 1:
                if self.pool > h or self.pool > w:
                    raise SpecError(f"pool {self.pool} larger than feature map {h}x{w}")
                h = (h - self.pool) // self.pool + 1
                w = (w - self.pool) // self.pool + 1
            width = c * h * w
        else:
            raise SpecError(f"unknown model kind {self.kind!r}")
        for i, out in enumerate(self.hidden + (self.num_classes,), 1):
            shapes += [(f"fc{i}.w", (width, out)), (f"fc{i}.b", (out,))]
            width = out
        return shapes


@dataclass
class ParamSet:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.momentum.setdefault(name, np.zeros_like(p))
            if self.momentum[name].shape != p.shape:
                raise ValueError(f"momentum buffer for {name} has shape {self.momentum[name].shape}")

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.momentum.items()},
        )


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=DTYPE)
            continue
        fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
        params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(DTYPE)
    return ParamSet(params)


@dataclass
class Recording:
    tape: Tape
    logits: Tensor
    loss: Tensor


class Model:
    """Forward graph for a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec):
        self.layers = spec.layer_shapes()
        self.spec = spec

    def logits(self, params, x) -> Tensor:
        """``params`` maps names to arrays or recorded tensors."""
        spec = self.spec
        h = x
        if spec.input_scale != 1.0:
            h = scale(h, spec.input_scale)
        if spec.kind == "convnet":
            for i in range(1, len(spec.channels) + 1):
                h = relu(conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=spec.padding))
            if spec.pool > 1:
                h = maxpool2d(h, spec.pool)
        h = flatten(h)
        n_dense = len(spec.hidden) + 1
        for i in range(1, n_dense + 1):
            h = add(matmul(h, params[f"fc{i}.w"]), params[f"fc{i}.b"])
            if i < n_dense:
                h = relu(h)
        return h

    def record(self, params: ParamSet, x, y, loss_kind: str = "xent", track_params: bool = True) -> Recording:
        """Run one recorded forward pass on batch ``x`` ending in the batch-mean
        loss. ``x`` is flagged as input ``"x"``; parameters keep their names."""
        with Tape() as tape:
            xt = tape.input("x", x)
            if track_params:
                ps = {n: tape.param(n, p) for n, p in params.params.items()}
            else:
                ps = params.params
            z = self.logits(ps, xt)
            loss = mean(loss_fn(loss_kind)(z, y))
            tape.set_loss(loss)
        ledger.record(ledger.FORWARD)
        return Recording(tape, z, loss)

    def predict_logits(self, params: ParamSet, x) -> np.ndarray:
        with no_record():
            z = self.logits(params.params, x)
        ledger.record(ledger.FORWARD)
        return z.data

    def predict(self, params: ParamSet, x) -> np.ndarray:
        # argmax breaks ties toward the lowest index
        return self.predict_logits(params, x).argmax(axis=1)

    def loss(self, params: ParamSet, x, y, loss_kind: str = "xent") -> float:
        with no_record():
            z = self.logits(params.params, x)
            val = mean(loss_fn(loss_kind)(z, y))
        ledger.record(ledger.FORWARD)
        return float(val.data)


def loss_fn(kind: str):
    if kind in ("xent", "cross-entropy", "ce"):
        return softmax_xent
    if kind in ("cw", "carlini-wagner"):
        return cw_margin
    raise ValueError(f"unknown loss kind {kind!r}")


def build_model(spec: ModelSpec) -> Model:
    return Model(spec)


def sgd_step(
    params: ParamSet,
    g_theta: dict,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> ParamSet:
    """v <- mu*v + g + lambda*theta; theta <- theta - lr*v. Returns a new ParamSet."""
    if not lr > 0 or not 0 <= momentum < 1 or weight_decay < 0:
        raise ValueError(f"bad SGD hyper-parameters lr={lr} momentum={momentum} wd={weight_decay}")
    missing = [n for n in params.params if n not in g_theta]
    if missing:
        raise KeyError(f"no gradient for parameters {missing}")
    mu, lam, tau = DTYPE(momentum), DTYPE(weight_decay), DTYPE(lr)
    new_p, new_v = {}, {}
    for name, theta in params.params.items():
        g = g_theta[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        with np.errstate(over="ignore", invalid="ignore"):
            v = mu * params.momentum[name] + g.astype(DTYPE)
            if lam:
                v = v + lam * theta
            p = theta - tau * v
        if not (np.isfinite(p).all() and np.isfinite(v).all()):
            raise NonFiniteError(f"non-finite SGD update for {name}")
        new_p[name], new_v[name] = p.astype(DTYPE), v.astype(DTYPE)
    ledger.record(ledger.SGD_UPDATE)
    return ParamSet(new_p, new_v)


# --------------------------------------------------------------------------
# Checkpoints: "FTCK" | version u32 | count u32 | per param:
# name_len u16, name utf-8, rank u8, dims u32 * rank, float32 data (all little-endian)

MAGIC = b"FTCK"
VERSION = 1


def save_checkpoint(path, params: ParamSet | dict) -> None:
    tensors = params.params if isinstance(params, ParamSet) else params
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            (rank,) = struct.unpack_from("<B", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            size = math.prod(dims)
            if off + 4 * size > len(buf):
                raise ValueError(f"{path}: truncated data for {name}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(DTYPE)
            off += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return ParamSet(params)
