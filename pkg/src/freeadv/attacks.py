"""l-inf bounded attacks: FGSM, BIM / PGD-K, and PGD with random restarts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Model, ParamSet
from .tensor import DTYPE, Tensor, backward_dual, cw_margin, mean


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    eps_step: float | None = None  # None -> default_step_size(eps, value_range)
    steps: int = 20
    random_init: bool = True
    restarts: int = 1
    loss_kind: str = "xent"
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.value_range
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if not lo < hi:
            raise ValueError(f"empty value range {self.value_range}")
        if self.restarts > 1 and not self.random_init:
            raise ValueError("restarts > 1 need random_init")
        if self.steps >= 1 and self.eps > 0 and not self.step_size > 0:
            raise ValueError(f"eps_step must be > 0, got {self.step_size}")
        if self.loss_kind not in ("xent", "cw"):
            raise ValueError(f"loss_kind must be 'xent' or 'cw', got {self.loss_kind!r}")

    @property
    def step_size(self) -> float:
        if self.eps_step is not None:
            return self.eps_step
        return default_step_size(self.eps, self.value_range)

    @property
    def is_fgsm(self) -> bool:
        """One BIM step of size eps is exactly FGSM."""
        return self.steps == 1 and not self.random_init and self.step_size == self.eps

    @property
    def name(self) -> str:
        if self.is_fgsm and self.loss_kind == "xent":
            return "FGSM"
        base = "CW" if self.loss_kind == "cw" else ("PGD" if self.random_init else "BIM")
        tag = f"{base}-{self.steps}"
        return f"{self.restarts}-restart {tag}" if self.restarts > 1 else tag


def default_step_size(eps: float, value_range) -> float:
    """2 pixel levels on 8-bit style ranges (scaled to the range), eps/4 on
    unit-scale data."""
    lo, hi = value_range
    if hi - lo > 1:
        return 2.0 * (hi - lo) / 255.0
    return eps / 4.0


def cw_loss(logits, labels) -> Tensor:
    """Batch mean of max_{i != y} z_i - z_y."""
    return mean(cw_margin(logits, labels))


# --------------------------------------------------------------------------
# exact float32 projection


def _f32_down(v: np.ndarray) -> np.ndarray:
    """Largest float32 <= v (elementwise, v float64)."""
    out = v.astype(np.float32)
    over = out.astype(np.float64) > v
    if over.any():
        out[over] = np.nextafter(out[over], np.float32(-np.inf))
    return out


def _f32_up(v: np.ndarray) -> np.ndarray:
    out = v.astype(np.float32)
    under = out.astype(np.float64) < v
    if under.any():
        out[under] = np.nextafter(out[under], np.float32(np.inf))
    return out


def eps32(eps: float) -> np.float32:
    """``eps`` rounded down to float32, so clipping to it never overshoots."""
    return _f32_down(np.array([eps], dtype=np.float64))[0]


def project(x: np.ndarray, x_adv: np.ndarray, eps: float, value_range) -> np.ndarray:
    """Clamp ``x_adv`` into the l-inf ball around ``x`` and the valid range.

    Bounds are rounded inward to float32, so |x_adv - x| <= eps and
    lo <= x_adv <= hi hold exactly, not up to rounding. ``x_adv`` is clipped
    before the float32 cast, so a saturated coordinate lands on the bound.
    """
    x64 = np.asarray(x, dtype=np.float64)
    lo = _f32_up(np.array([value_range[0]], dtype=np.float64))[0]
    hi = _f32_down(np.array([value_range[1]], dtype=np.float64))[0]
    lower = np.maximum(_f32_up(x64 - eps), lo)
    upper = np.minimum(_f32_down(x64 + eps), hi)
    clipped = np.clip(np.asarray(x_adv, dtype=np.float64), lower, upper)
    return clipped.astype(DTYPE)


def clip_delta(delta: np.ndarray, eps: float) -> np.ndarray:
    e = eps32(eps)
    return np.clip(delta, -e, e).astype(DTYPE, copy=False)


def input_gradient(model: Model, params: ParamSet, x, y, loss_kind: str = "xent") -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. ``x`` (one forward, one backward)."""
    rec = model.record(params, x, y, loss_kind=loss_kind, track_params=False)
    return backward_dual(rec.tape, params=False).g_adv["x"].data


# --------------------------------------------------------------------------
# attacks


def fgsm(model: Model, params: ParamSet, x, y, eps: float, value_range=(0.0, 1.0), loss_kind: str = "xent"):
    """x + eps * sign(grad_x loss), clamped to ``value_range``. sign(0) = 0."""
    x = np.asarray(x, dtype=DTYPE)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    g = input_gradient(model, params, x, y, loss_kind)
    return project(x, x.astype(np.float64) + eps * np.sign(g).astype(np.float64), eps, value_range)


def pgd_attack(model: Model, params: ParamSet, x, y, cfg: AttackConfig, rng=0, init=None, step_hook=None):
    """K signed-gradient steps of size ``cfg.step_size`` with projection.

    With ``cfg.random_init`` the start is ``x + init``, where ``init`` defaults
    to uniform(-eps, eps) noise drawn from ``rng`` (a seed or a Generator).
    Without random_init this is BIM. ``step_hook(x_adv)`` is called after the
    start point and after every step.
    """
    x = np.asarray(x, dtype=DTYPE)
    if cfg.random_init:
        if init is None:
            init = _as_rng(rng).uniform(-cfg.eps, cfg.eps, size=x.shape)
        x_adv = project(x, x + clip_delta(np.asarray(init, dtype=DTYPE), cfg.eps), cfg.eps, cfg.value_range)
    else:
        x_adv = x.copy()
    if step_hook is not None:
        step_hook(x_adv)
    x64 = x.astype(np.float64)
    for _ in range(cfg.steps):
        g = input_gradient(model, params, x_adv, y, cfg.loss_kind)
        delta = np.clip(x_adv - x64 + cfg.step_size * np.sign(g).astype(np.float64), -cfg.eps, cfg.eps)
        x_adv = project(x, x64 + delta, cfg.eps, cfg.value_range)
        if step_hook is not None:
            step_hook(x_adv)
    return x_adv


def _seed_words(seed) -> list[int]:
    return [int(s) for s in np.atleast_1d(seed)]


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(_seed_words(rng) + [0])


def restart_rng(seed, restart: int) -> np.random.Generator:
    """Independent stream per restart; restart 0 matches ``pgd_attack(rng=seed)``.
    ``seed`` may be an int or a sequence of ints."""
    return np.random.default_rng(_seed_words(seed) + [int(restart)])


def attack_with_restarts(model: Model, params: ParamSet, x, y, cfg: AttackConfig, seed=0):
    """Run PGD ``cfg.restarts`` times from fresh random starts.

    Returns ``(fooled, x_worst)``: an example counts as fooled if any restart
    misclassifies it, and ``x_worst`` holds the first misclassifying input (or
    the last restart's output). Examples already fooled are not re-attacked.
    The first r restarts are identical whatever ``cfg.restarts`` is, so the
    fooled set can only grow with more restarts.
    """
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    fooled = np.zeros(len(y), dtype=bool)
    x_worst = x.copy()
    for r in range(cfg.restarts):
        todo = np.flatnonzero(~fooled)
        if todo.size == 0:
            break
        init = None
        if cfg.random_init:
            # full-batch draw: an example's start does not depend on which others are still active
            init = restart_rng(seed, r).uniform(-cfg.eps, cfg.eps, size=x.shape)[todo]
        x_adv = pgd_attack(model, params, x[todo], y[todo], cfg, init=init)
        hit = model.predict(params, x_adv) != y[todo]
        x_worst[todo] = x_adv
        fooled[todo[hit]] = True
    return fooled, x_worst
