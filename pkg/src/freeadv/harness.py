"""Robustness evaluation, loss-surface grids, ledger checks and the end-to-end runner."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, attack_with_restarts, input_gradient
from .config import ExperimentConfig, load_config
from .data import Dataset, load_cifar_binary, load_idx, synth_blobs
from .ledger import CostLedger
from .models import Model, ParamSet, build_model, init_params, load_checkpoint, save_checkpoint
from .tensor import DTYPE, Tensor, softmax_xent
from .training import TrainResult, train

REPORT_COLUMNS = ("attack", "K", "eps", "eps_step", "restarts", "accuracy", "n", "seconds")


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ReportRow:
    attack: str
    K: int
    eps: float
    eps_step: float
    restarts: int
    accuracy: float
    n: int
    seconds: float


@dataclass
class EvalReport:
    rows: list[ReportRow]
    seed: int

    @property
    def natural_accuracy(self) -> float:
        return self.rows[0].accuracy

    @property
    def n(self) -> int:
        return self.rows[0].n

    def accuracy(self, attack: str) -> float:
        for row in self.rows:
            if row.attack == attack:
                return row.accuracy
        raise KeyError(attack)

    def to_csv(self, wall_clock: bool = True) -> str:
        """Fixed column order. ``wall_clock=False`` blanks the seconds column."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            secs = f"{r.seconds:.3f}" if wall_clock else ""
            w.writerow([r.attack, r.K, repr(r.eps), repr(r.eps_step), r.restarts, repr(r.accuracy), r.n, secs])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> "EvalReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(ReportRow(
                rec["attack"], int(rec["K"]), float(rec["eps"]), float(rec["eps_step"]),
                int(rec["restarts"]), float(rec["accuracy"]), int(rec["n"]),
                float(rec["seconds"] or "nan"),
            ))
        return cls(rows, seed)


def _chunks(n: int, size: int):
    for i, start in enumerate(range(0, n, size)):
        yield i, slice(start, min(start + size, n))


def evaluate(model: Model, params: ParamSet, dataset: Dataset, attacks: list[AttackConfig],
             seed: int = 0, batch_size: int = 500) -> EvalReport:
    """Clean accuracy plus accuracy under each attack.

    An example counts as robust only if every restart fails to flip it. Chunk
    ``i`` of every attack uses seed ``[seed, i]``, so reports do not depend on
    anything but the config.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    t0 = time.perf_counter()
    x, y = dataset.images, dataset.labels
    n = len(y)
    correct = sum(int((model.predict(params, x[s]) == y[s]).sum()) for _, s in _chunks(n, batch_size))
    rows = [ReportRow("natural", 0, 0.0, 0.0, 0, correct / n, n, time.perf_counter() - t0)]
    for cfg in attacks:
        t0 = time.perf_counter()
        robust = 0
        for i, s in _chunks(n, batch_size):
            fooled, _ = attack_with_restarts(model, params, x[s], y[s], cfg, seed=[seed, i])
            robust += int((~fooled).sum())
        step = cfg.step_size if cfg.steps else 0.0
        rows.append(ReportRow(cfg.name, cfg.steps, float(cfg.eps), float(step), cfg.restarts,
                              robust / n, n, time.perf_counter() - t0))
    return EvalReport(rows, seed)


# --------------------------------------------------------------------------
# loss surface

DIRECTIONS = ("adversarial", "rademacher")


@dataclass
class SurfaceGrid:
    """values[i, j] = loss(clamp(x + a[i] * dir_a + b[j] * dir_b))."""

    values: np.ndarray
    a: np.ndarray
    b: np.ndarray
    dir_a: str
    dir_b: str
    label: int

    @property
    def center(self) -> float:
        c = len(self.a) // 2
        return float(self.values[c, c])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# rows: a along {_describe(self.dir_a)}; columns: b along {_describe(self.dir_b)}\n")
        buf.write(f"# directions are unnormalized (no filter normalization); label={self.label}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a\\b"] + [repr(float(v)) for v in self.b])
        for av, row in zip(self.a, self.values):
            w.writerow([repr(float(av))] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _describe(kind: str) -> str:
    return {"adversarial": "plain sign of the input gradient",
            "rademacher": "seeded Rademacher (+1/-1 per pixel)"}[kind]


def grid_coords(extent: float, grid_n: int) -> np.ndarray:
    """``grid_n`` evenly spaced points in [-extent, extent], centre exactly 0."""
    if grid_n < 1 or grid_n % 2 == 0:
        raise ValueError(f"grid_n must be odd, got {grid_n}")
    if not extent > 0:
        raise ValueError(f"extent must be > 0, got {extent}")
    half = grid_n // 2
    if half == 0:
        return np.zeros(1)
    return extent * (np.arange(grid_n) - half) / half


def direction(kind: str, model: Model, params: ParamSet, x, y, rng: np.random.Generator) -> np.ndarray:
    if kind == "adversarial":
        return np.sign(input_gradient(model, params, x[None], [y])[0]).astype(np.float64)
    if kind == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=x.shape)
    raise ValueError(f"direction must be one of {DIRECTIONS}, got {kind!r}")


def loss_surface(model: Model, params: ParamSet, x, y: int, dir_a: str = "adversarial",
                 dir_b: str = "rademacher", extent: float = 1.0, grid_n: int = 21,
                 value_range=(0.0, 1.0), seed=0) -> SurfaceGrid:
    """Per-example cross-entropy on a 2-d grid through one example ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    coords = grid_coords(extent, grid_n)
    seed_words = [int(s) for s in np.atleast_1d(seed)]
    da = direction(dir_a, model, params, x, y, np.random.default_rng(seed_words + [0]))
    db = direction(dir_b, model, params, x, y, np.random.default_rng(seed_words + [1]))
    aa, bb = np.meshgrid(coords, coords, indexing="ij")
    pts = x.astype(np.float64) + aa.reshape(-1, *[1] * x.ndim) * da + bb.reshape(-1, *[1] * x.ndim) * db
    pts = np.clip(pts, value_range[0], value_range[1]).astype(DTYPE)
    pts[(grid_n * grid_n) // 2] = x  # centre cell is the clean input, bit for bit
    vals = np.concatenate([
        softmax_xent(Tensor(model.predict_logits(params, pts[s])), np.full(s.stop - s.start, y)).data
        for _, s in _chunks(len(pts), 512)
    ])
    return SurfaceGrid(vals.reshape(grid_n, grid_n).astype(np.float64), coords, coords.copy(), dir_a, dir_b, int(y))


def direction_gains(model: Model, params: ParamSet, xs, ys, extent: float, value_range, seed=0):
    """Loss increase at full extent along the adversarial and a Rademacher
    direction, per example (the (+extent, 0) and (0, +extent) grid cells)."""
    adv, rad = [], []
    for i, (x, y) in enumerate(zip(xs, ys)):
        g = loss_surface(model, params, x, int(y), "adversarial", "rademacher", extent, 3, value_range, [seed, i])
        adv.append(g.values[2, 1] - g.center)
        rad.append(g.values[1, 2] - g.center)
    return np.array(adv), np.array(rad)


# --------------------------------------------------------------------------
# ledger checks


class LedgerMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class LedgerCheck:
    ok: bool
    message: str
    expected: dict = field(default_factory=dict)
    actual: dict = field(default_factory=dict)

    def raise_if_failed(self) -> "LedgerCheck":
        if not self.ok:
            raise LedgerMismatch(self.message)
        return self


def ledger_assert(ledger: CostLedger | dict, regime: str, n_updates: int, k_or_m: int = 1) -> LedgerCheck:
    """Exact cost model: natural and free spend one backward per update, K-PGD
    spends K + 1 (``k_or_m`` is K for kpgd, m for free and unused otherwise)."""
    counts = ledger.counts() if isinstance(ledger, CostLedger) else dict(ledger)
    if regime in ("natural", "free"):
        per = 1
    elif regime == "kpgd":
        per = k_or_m + 1
    else:
        raise ValueError(f"unknown regime {regime!r}")
    expected = {"backward_count": per * n_updates, "sgd_update_count": n_updates}
    actual = {k: counts.get(k) for k in expected}
    bad = [f"{k} expected {expected[k]} got {actual[k]}" for k in expected if actual[k] != expected[k]]
    if bad:
        return LedgerCheck(False, f"ledger mismatch ({regime}): " + "; ".join(bad), expected, actual)
    return LedgerCheck(True, f"ledger ok ({regime}): {actual['backward_count']} backward passes "
                             f"for {n_updates} updates", expected, actual)


# --------------------------------------------------------------------------
# end-to-end runs


def code_hash(version: str = __version__) -> str:
    """Git-style blob sha1 of the version string."""
    data = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "idx":
        tr = load_idx(d.paths["train_images"], d.paths["train_labels"], split="train")
        va = load_idx(d.paths["val_images"], d.paths["val_labels"], split="val")
    elif d.kind == "cifar":
        tr = load_cifar_binary(d.paths["train_files"], split="train")
        va = load_cifar_binary(d.paths["val_files"], split="val")
    else:
        b = d.blobs
        seed = b.get("data_seed", 0)
        tr = synth_blobs(b["classes"], b["n_per_class"], b["dims"], b["separation"], seed=seed)
        va = synth_blobs(b["classes"], b["n_per_class"], b["dims"], b["separation"], seed=seed + 1)
        va = Dataset(va.images, va.labels, va.value_range, va.num_classes, split="val")
    if d.per_class is not None:
        tr = tr.per_class(d.per_class)
    if d.val_per_class is not None:
        va = va.per_class(d.val_per_class)
    return tr.with_channel_axis(), va.with_channel_axis()


def build_from_config(cfg: ExperimentConfig, dataset: Dataset) -> Model:
    spec = cfg.model_spec(dataset.images.shape[1:], dataset.num_classes, dataset.value_range)
    return build_model(spec)


def eval_subset(cfg: ExperimentConfig, val: Dataset) -> Dataset:
    return val.head(cfg.eval.eval_n)


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    report: EvalReport
    train: TrainResult | None = None
    surfaces: list[Path] = field(default_factory=list)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_surfaces(cfg: ExperimentConfig, model: Model, params: ParamSet, val: Dataset, out_dir: Path,
                   examples: int | None = None) -> list[Path]:
    s = cfg.surface
    n = examples if examples is not None else s.examples
    extent = cfg.surface_extent()
    paths = []
    for i in range(min(n, len(val))):
        grid = loss_surface(model, params, val.images[i], int(val.labels[i]), s.dir_a, s.dir_b, extent,
                            s.grid_n, val.value_range, seed=[s.seed, i])
        p = out_dir / f"surface_{i:04d}.csv"
        p.write_text(grid.to_csv())
        paths.append(p)
    return paths


def run_experiment(config, out_dir=None, observer=None) -> RunResult:
    """Load data, train, evaluate and write manifest.json, checkpoint.ftck,
    report.csv (and surface_*.csv when ``[surface] examples`` > 0).

    Every artifact except the wall-clock fields (manifest ``timing``, report
    ``seconds``) is a pure function of the config.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.time()
    tr, va = load_datasets(cfg)
    model = build_from_config(cfg, tr)
    tc = cfg.train
    init_seed = cfg.init_seed if cfg.init_seed is not None else tc.seed
    manifest = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "seed": tc.seed,
        "init_seed": init_seed,
        "model_spec": model.spec.to_dict(),
        "dataset": {
            "train_fingerprint": tr.fingerprint(), "val_fingerprint": va.fingerprint(),
            "n_train": len(tr), "n_val": len(va), "per_class": cfg.data.per_class,
            "value_range": list(tr.value_range),
        },
        "code_version": __version__,
        "code_hash": code_hash(),
        "outer_epochs": tc.outer_epochs,
        "dropped_epochs": tc.dropped_epochs,
        "status": "started",
    }
    _write_json(out / "manifest.json", manifest)

    result = train(tc, tr, model, params=init_params(model.spec, init_seed), observer=observer, keep_events=False)
    check = ledger_assert(result.ledger, tc.regime, result.iterations, tc.steps if tc.regime == "kpgd" else tc.m)
    save_checkpoint(out / "checkpoint.ftck", result.params)
    t_train = time.time()

    ev = eval_subset(cfg, va)
    report = evaluate(model, result.params, ev, cfg.attack_configs(tr.value_range), cfg.eval.seed,
                      cfg.eval.batch_size)
    (out / "report.csv").write_text(report.to_csv())
    surfaces = write_surfaces(cfg, model, result.params, va, out)

    manifest.update({
        "status": "complete" if check.ok else "ledger_mismatch",
        "iterations": result.iterations,
        "ledger": result.ledger.counts(),
        "ledger_check": check.message,
        "eval_n": len(ev),
        "history": result.history,
        "artifacts": ["checkpoint.ftck", "report.csv"] + [p.name for p in surfaces],
        "timing": {"started": t_start, "train_seconds": t_train - t_start, "total_seconds": time.time() - t_start},
    })
    _write_json(out / "manifest.json", manifest)
    check.raise_if_failed()
    return RunResult(out, manifest, report, result, surfaces)


def eval_checkpoint(checkpoint, config, out_dir=None) -> EvalReport:
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    tr, va = load_datasets(cfg)
    model = build_from_config(cfg, tr)
    params = load_checkpoint(checkpoint)
    _check_params(model, params)
    report = evaluate(model, params, eval_subset(cfg, va), cfg.attack_configs(tr.value_range),
                      cfg.eval.seed, cfg.eval.batch_size)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    return report


def surface_checkpoint(checkpoint, config, out_dir=None) -> list[Path]:
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    tr, va = load_datasets(cfg)
    model = build_from_config(cfg, tr)
    params = load_checkpoint(checkpoint)
    _check_params(model, params)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return write_surfaces(cfg, model, params, va, out, examples=cfg.surface.examples or 1)


def _check_params(model: Model, params: ParamSet) -> None:
    want = dict(model.spec.layer_shapes())
    got = {k: tuple(v.shape) for k, v in params.params.items()}
    if want != got:
        raise ValueError(f"checkpoint does not match the configured model: expected {want}, got {got}")


def check_manifest(path) -> LedgerCheck:
    m = json.loads(Path(path).read_text())
    for key in ("ledger", "iterations", "config"):
        if key not in m:
            raise ValueError(f"manifest {path} has no {key!r} entry (run incomplete?)")
    tc = m["config"]["train"]
    k_or_m = tc["steps"] if tc["regime"] == "kpgd" else tc["m"]
    return ledger_assert(m["ledger"], tc["regime"], m["iterations"], k_or_m)
