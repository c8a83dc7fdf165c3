"""Natural, K-PGD adversarial, and free (minibatch-replay) training loops."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import ledger as ledger_mod
from .attacks import AttackConfig, clip_delta, eps32, pgd_attack, project
from .data import Dataset, batches
from .ledger import CostLedger, use_ledger
from .models import Model, ParamSet, init_params, sgd_step
from .tensor import DTYPE, NonFiniteError, backward_dual

REGIMES = ("natural", "kpgd", "free")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "natural"
    epochs: int = 10  # nominal epoch count; free training runs epochs // m outer epochs
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "piecewise"  # piecewise: x0.1 at 50% and 75% of iterations; or constant
    m: int = 1
    steps: int = 7  # K, inner PGD steps for kpgd
    eps: float = 0.0
    eps_step: float | None = None
    random_init: bool = True
    value_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.regime == "kpgd" and self.steps < 1:
            raise ValueError(f"kpgd needs steps >= 1, got {self.steps}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.lr_schedule not in ("piecewise", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    @property
    def outer_epochs(self) -> int:
        return self.epochs // self.m if self.regime == "free" else self.epochs

    @property
    def dropped_epochs(self) -> int:
        """Nominal epochs lost to integer division when m does not divide epochs."""
        return self.epochs - self.outer_epochs * self.m if self.regime == "free" else 0

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            eps=self.eps,
            eps_step=self.eps_step,
            steps=self.steps,
            random_init=self.random_init,
            value_range=self.value_range,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ParamSet
    ledger: CostLedger
    iterations: int
    outer_epochs: int
    dropped_epochs: int
    history: list[dict] = field(default_factory=list)


def replay_schedule(batch_ids, m: int) -> list:
    """Each id repeated ``m`` times in a row, order preserved."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return [b for b in batch_ids for _ in range(m)]


def lr_at(cfg: TrainConfig, it: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    lr = cfg.lr
    if it >= 0.5 * total:
        lr *= 0.1
    if it >= 0.75 * total:
        lr *= 0.1
    return lr


def total_iterations(cfg: TrainConfig, n_examples: int) -> int:
    per_epoch = -(-n_examples // cfg.batch_size)
    return cfg.outer_epochs * per_epoch * (cfg.m if cfg.regime == "free" else 1)


Observer = Callable[[str, dict], None]


class _Loop:
    """Shared bookkeeping: iteration counter, lr schedule, float64 epoch stats."""

    def __init__(self, cfg, dataset, model, params, observer, keep_events):
        self.cfg = cfg
        self.dataset = dataset
        self.model = model
        self.params = params if params is not None else init_params(model.spec, cfg.seed)
        self.observer = observer
        self.ledger = CostLedger(keep_events=keep_events)
        self.total = total_iterations(cfg, len(dataset))
        self.it = 0
        self.history: list[dict] = []
        self._loss_sum = 0.0
        self._correct = 0
        self._seen = 0

    def epoch_batches(self, epoch: int):
        return batches(self.dataset, self.cfg.batch_size, seed=[self.cfg.seed, epoch], shuffle=self.cfg.shuffle)

    def sgd(self, rec, grads):
        loss = float(rec.loss.data)
        self._loss_sum += loss * len(rec.logits.data)
        self._seen += len(rec.logits.data)
        try:
            self.params = sgd_step(
                self.params, grads.g_theta, lr_at(self.cfg, self.it, self.total),
                self.cfg.momentum, self.cfg.weight_decay,
            )
        except NonFiniteError as exc:
            raise TrainingError(f"iteration {self.it}: {exc}") from exc
        self.it += 1

    def forward(self, x, y, need_input_grad=False):
        try:
            rec = self.model.record(self.params, x, y)
        except NonFiniteError as exc:
            raise TrainingError(f"iteration {self.it}: {exc}") from exc
        self._correct += int((rec.logits.data.argmax(axis=1) == y).sum())
        return rec, backward_dual(rec.tape, params=True, inputs=need_input_grad)

    def end_epoch(self, epoch):
        row = {
            "epoch": epoch,
            "iterations": self.it,
            "train_loss": self._loss_sum / max(self._seen, 1),
            "train_acc": self._correct / max(self._seen, 1),
        }
        self.history.append(row)
        self._loss_sum, self._correct, self._seen = 0.0, 0, 0
        self.notify("epoch_end", row)

    def notify(self, event, info):
        if self.observer is not None:
            self.observer(event, info)

    def result(self):
        return TrainResult(
            self.params, self.ledger, self.it, self.cfg.outer_epochs, self.cfg.dropped_epochs, self.history
        )


def _check_regime(cfg, regime):
    if cfg.regime != regime:
        raise ValueError(f"config regime is {cfg.regime!r}, expected {regime!r}")


def train_natural(cfg: TrainConfig, dataset: Dataset, model: Model, params: ParamSet | None = None,
                  observer: Observer | None = None, keep_events: bool = True) -> TrainResult:
    """Plain minibatch SGD: one forward and one backward per update."""
    _check_regime(cfg, "natural")
    loop = _Loop(cfg, dataset, model, params, observer, keep_events)
    with use_ledger(loop.ledger):
        for epoch in range(cfg.epochs):
            for b in loop.epoch_batches(epoch):
                rec, grads = loop.forward(b.x, b.y)
                loop.sgd(rec, grads)
            loop.end_epoch(epoch)
    return loop.result()


def train_kpgd(cfg: TrainConfig, dataset: Dataset, model: Model, params: ParamSet | None = None,
               observer: Observer | None = None, keep_events: bool = True) -> TrainResult:
    """PGD-K inner maximization, then one SGD step on the adversarial batch:
    K + 1 backward passes per update."""
    _check_regime(cfg, "kpgd")
    loop = _Loop(cfg, dataset, model, params, observer, keep_events)
    attack = cfg.attack_config()
    rng = np.random.default_rng([cfg.seed, 1])
    with use_ledger(loop.ledger):
        for epoch in range(cfg.epochs):
            for b in loop.epoch_batches(epoch):
                x_adv = pgd_attack(model, loop.params, b.x, b.y, attack, rng=rng)
                loop.notify("inner_step", {"x": b.x, "x_adv": x_adv, "delta": x_adv.astype(np.float64) - b.x, "eps": cfg.eps})
                rec, grads = loop.forward(x_adv, b.y)
                loop.sgd(rec, grads)
            loop.end_epoch(epoch)
    return loop.result()


def train_free(cfg: TrainConfig, dataset: Dataset, model: Model, params: ParamSet | None = None,
               observer: Observer | None = None, keep_events: bool = True) -> TrainResult:
    """Free-m adversarial training.

    Runs ``epochs // m`` outer epochs; every minibatch is replayed ``m`` times.
    Each replay does one forward pass on ``clamp(x + delta)`` and one backward
    pass that yields both the parameter gradient (used for the SGD step) and
    the input gradient (used, afterwards, for delta += eps * sign(g_adv) and
    clipping to [-eps, eps]). ``delta`` is never reset: it carries over to the
    next minibatch and across epochs. The buffer is sized for a full batch; a
    short final batch uses its leading rows.
    """
    _check_regime(cfg, "free")
    loop = _Loop(cfg, dataset, model, params, observer, keep_events)
    delta = np.zeros((cfg.batch_size,) + dataset.images.shape[1:], dtype=DTYPE)
    step = eps32(cfg.eps)
    with use_ledger(loop.ledger):
        for epoch in range(cfg.outer_epochs):
            for b in loop.epoch_batches(epoch):
                n = len(b.y)
                loop.notify("batch_start", {"delta": delta.copy(), "n": n})
                for _ in range(cfg.m):
                    x_adv = project(b.x, b.x + delta[:n], cfg.eps, cfg.value_range)
                    rec, grads = loop.forward(x_adv, b.y, need_input_grad=True)
                    g_adv = grads.g_adv["x"].data
                    loop.sgd(rec, grads)
                    # same backward pass, applied after the parameter update
                    delta[:n] = clip_delta(delta[:n] + step * np.sign(g_adv).astype(DTYPE), cfg.eps)
                    ledger_mod.record(ledger_mod.PERTURB)
                    loop.notify("inner_step", {"x": b.x, "x_adv": x_adv, "delta": delta[:n], "eps": cfg.eps})
                loop.notify("batch_end", {"delta": delta.copy(), "n": n})
            loop.end_epoch(epoch)
    return loop.result()


def train(cfg: TrainConfig, dataset: Dataset, model: Model, **kwargs) -> TrainResult:
    fn = {"natural": train_natural, "kpgd": train_kpgd, "free": train_free}[cfg.regime]
    return fn(cfg, dataset, model, **kwargs)
