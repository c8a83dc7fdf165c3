"""Experiment config files.

Line-based ``key = value`` text with ``[section]`` headers, read with
``configparser``. Every key is checked against a fixed schema: unknown
sections or keys are errors, so a misspelt ``esp = 77`` cannot silently fall
back to a default. Relative paths resolve against the config file's folder.

Example::

    [data]
    kind = idx
    train_images = ../data/mnist5k/train-images-idx3-ubyte.gz
    ...
    [train]
    regime = free
    m = 8
    eps = 77
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .models import ModelSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad config file. ``key`` is the offending ``section.key`` (or None)."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _range(text: str) -> tuple[float, float]:
    lo, hi = (float(t) for t in text.replace(",", " ").split())
    return lo, hi


# section -> key -> parser
SCHEMA: dict[str, dict[str, object]] = {
    "run": {"out_dir": str, "name": str},
    "data": {
        "kind": str,
        "train_images": str, "train_labels": str, "val_images": str, "val_labels": str,
        "train_files": _strs, "val_files": _strs,
        "per_class": int, "val_per_class": int,
        "classes": int, "n_per_class": int, "dims": int, "separation": float, "data_seed": int,
    },
    "model": {
        "kind": str, "hidden": _ints, "channels": _ints, "kernel": int, "padding": int,
        "pool": int, "input_scale": _opt_float, "init_seed": int,
    },
    "train": {
        "regime": str, "epochs": int, "batch_size": int, "lr": float, "momentum": float,
        "weight_decay": float, "lr_schedule": str, "m": int, "steps": int, "eps": float,
        "eps_step": _opt_float, "random_init": _bool, "seed": int, "shuffle": _bool,
    },
    "eval": {"attacks": _strs, "eps": _opt_float, "eps_step": _opt_float, "eval_n": int,
             "seed": int, "batch_size": int},
    "surface": {"examples": int, "grid_n": int, "extent": _opt_float, "dir_a": str, "dir_b": str,
                "seed": int},
}

REQUIRED_DATA = {
    "idx": ("train_images", "train_labels", "val_images", "val_labels"),
    "cifar": ("train_files", "val_files"),
    "blobs": ("classes", "n_per_class", "dims", "separation"),
}


@dataclass(frozen=True)
class DataSettings:
    kind: str
    paths: dict = field(default_factory=dict)  # resolved absolute paths (str or tuple of str)
    per_class: int | None = None
    val_per_class: int | None = None
    blobs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalSettings:
    attacks: tuple[str, ...] = ("pgd-20",)
    eps: float | None = None  # None -> training eps
    eps_step: float | None = None  # None -> attack default
    eval_n: int | None = None  # None -> full validation split
    seed: int = 0
    batch_size: int = 500


@dataclass(frozen=True)
class SurfaceSettings:
    examples: int = 0  # 0 disables surface output in ``run``
    grid_n: int = 21
    extent: float | None = None  # None -> eval eps
    dir_a: str = "adversarial"
    dir_b: str = "rademacher"
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    source: str
    out_dir: str
    name: str
    data: DataSettings
    model: dict  # ModelSpec keyword overrides; input shape comes from the data
    init_seed: int | None
    train: TrainConfig
    eval: EvalSettings
    surface: SurfaceSettings

    def model_spec(self, input_shape, num_classes, value_range) -> ModelSpec:
        kw = dict(self.model)
        kind = kw.pop("kind", "convnet" if len(input_shape) == 3 else "mlp")
        if kw.get("input_scale") is None:
            kw["input_scale"] = 1.0 / (value_range[1] - value_range[0])
        return ModelSpec(kind, tuple(input_shape), num_classes, **kw)

    def attack_configs(self, value_range) -> list[AttackConfig]:
        return [parse_attack(a, self.eval_eps(), self.eval.eps_step, value_range) for a in self.eval.attacks]

    def eval_eps(self) -> float:
        return self.eval.eps if self.eval.eps is not None else self.train.eps

    def surface_extent(self) -> float:
        return self.surface.extent if self.surface.extent is not None else self.eval_eps()

    def to_dict(self) -> dict:
        return asdict(self)


def parse_attack(text: str, eps: float, eps_step: float | None, value_range) -> AttackConfig:
    """``fgsm``, ``bim-K``, ``pgd-K``, ``cw-K``; append ``xR`` for R restarts
    (``pgd-20x10``)."""
    spec = text.strip().lower()
    restarts = 1
    if "x" in spec:
        spec, r = spec.rsplit("x", 1)
        restarts = int(r)
    if spec == "fgsm":
        if restarts != 1:
            raise ValueError("fgsm takes no restarts")
        return AttackConfig(eps=eps, eps_step=eps, steps=1, random_init=False, value_range=value_range)
    kind, _, k = spec.partition("-")
    if kind not in ("bim", "pgd", "cw") or not k.isdigit():
        raise ValueError(f"unknown attack {text!r} (expected fgsm, bim-K, pgd-K or cw-K)")
    return AttackConfig(
        eps=eps,
        eps_step=eps_step,
        steps=int(k),
        random_init=kind != "bim",
        restarts=restarts,
        loss_kind="cw" if kind == "cw" else "xent",
        value_range=value_range,
    )


def _parse_sections(text: str, source: str) -> dict[str, dict[str, object]]:
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), strict=True, default_section="\0"
    )
    cp.optionxform = str  # keep key case so typos are reported verbatim
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {' '.join(str(exc).split())}") from exc
    out: dict[str, dict[str, object]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", key=section)
        out[section] = {}
        for key, raw in cp.items(section):
            parser = SCHEMA[section].get(key)
            if parser is None:
                raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}")
            try:
                out[section][key] = parser(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}", key=f"{section}.{key}") from exc
    return out


def _data_settings(d: dict, base: Path) -> DataSettings:
    kind = d.get("kind")
    if kind is None:
        raise ConfigError("missing data.kind", key="data.kind")
    if kind not in REQUIRED_DATA:
        raise ConfigError(f"data.kind must be one of {sorted(REQUIRED_DATA)}, got {kind!r}", key="data.kind")
    for key in REQUIRED_DATA[kind]:
        if key not in d:
            raise ConfigError(f"missing data.{key} (required for kind={kind})", key=f"data.{key}")
    paths = {}
    for key in ("train_images", "train_labels", "val_images", "val_labels", "train_files", "val_files"):
        if key in d:
            v = d[key]
            paths[key] = tuple(str(base / p) for p in v) if isinstance(v, tuple) else str(base / v)
    blobs = {k: d[k] for k in ("classes", "n_per_class", "dims", "separation", "data_seed") if k in d}
    return DataSettings(kind, paths, d.get("per_class"), d.get("val_per_class"), blobs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, source=str(path), base=path.resolve().parent)


def parse_config(text: str, source: str = "<string>", base=None) -> ExperimentConfig:
    base = Path(base) if base is not None else Path.cwd()
    sec = _parse_sections(text, source)
    if "data" not in sec:
        raise ConfigError("missing [data] section", key="data")
    data = _data_settings(sec["data"], base)
    run = sec.get("run", {})
    out_dir = str((base / run.get("out_dir", "runs/" + Path(source).stem)).resolve())
    model = dict(sec.get("model", {}))
    init_seed = model.pop("init_seed", None)

    train_kw = dict(sec.get("train", {}))
    train_kw["value_range"] = (0.0, 1.0) if data.kind == "blobs" else (0.0, 255.0)
    try:
        train = TrainConfig(**train_kw)
        ev = EvalSettings(**sec.get("eval", {}))
        surf = SurfaceSettings(**sec.get("surface", {}))
        cfg = ExperimentConfig(str(source), out_dir, run.get("name", Path(source).stem), data, model,
                               init_seed, train, ev, surf)
        cfg.attack_configs(train.value_range)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if surf.grid_n % 2 == 0 or surf.grid_n < 1:
        raise ConfigError(f"surface.grid_n must be odd, got {surf.grid_n}", key="surface.grid_n")
    if surf.examples > 0 and not cfg.surface_extent() > 0:
        raise ConfigError("surface.extent must be > 0 (it defaults to the attack eps)", key="surface.extent")
    return cfg
