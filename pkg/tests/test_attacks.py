import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, small_convnet, small_mlp
from freeadv.attacks import (
    AttackConfig,
    attack_with_restarts,
    cw_loss,
    default_step_size,
    fgsm,
    pgd_attack,
    project,
)
from freeadv.ledger import CostLedger, use_ledger
from freeadv.models import ModelSpec, ParamSet, build_model, init_params
from freeadv.tensor import Tape, Tensor, backward_dual, finite_diff_grad, softmax_xent


def linear_model(w, b=None, input_scale=1.0):
    """Two-class softmax model whose logit gap is w.(input_scale * x) + b
    (logistic regression)."""
    w = np.asarray(w, np.float32)
    spec = ModelSpec("mlp", (len(w),), 2, input_scale=input_scale)
    params = ParamSet({
        "fc1.w": np.stack([np.zeros_like(w), w], axis=1),
        "fc1.b": np.array([0.0, 0.0 if b is None else b], np.float32),
    })
    return build_model(spec), params


def per_example_loss(model, params, x, y):
    return softmax_xent(Tensor(model.predict_logits(params, x)), np.asarray(y)).data


def corner_max(model, params, x, y, eps, value_range, *candidates):
    """Brute force over every vertex of the feasible box around one example.

    Returns the best vertex loss followed by the loss of each candidate. All
    are scored in one batch, since matmul rounding can depend on batch shape.
    """
    upper = project(x, x + 1e9, eps, value_range)
    lower = project(x, x - 1e9, eps, value_range)
    signs = np.array(list(itertools.product([0, 1], repeat=x.shape[-1])), bool)
    points = np.concatenate([np.where(signs, upper, lower)] + [np.reshape(c, (1, -1)) for c in candidates])
    losses = per_example_loss(model, params, points, np.full(len(points), y))
    k = len(candidates)
    return (losses[: len(points) - k].max(), *losses[len(points) - k:])


def test_cw_loss_examples():
    assert cw_loss(Tensor([[10.0, 0.0, 0.0]]), [0]).item() == -10.0
    assert cw_loss(Tensor([[0.0, 0.0]]), [0]).item() == 0.0
    with pytest.raises(ValueError):
        cw_loss(Tensor([[0.0, 0.0]]), [2])


def test_cw_loss_gradient_matches_fd(rng):
    z = rng.standard_normal((6, 5))
    y = rng.integers(0, 5, 6)
    with Tape() as tape:
        tape.set_loss(cw_loss(tape.input("x", z), y))
    g = backward_dual(tape).g_adv["x"].data
    assert_grad_close(g, finite_diff_grad(lambda v: cw_loss(v, y), z, 1e-4).data)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(eps=-1)
    with pytest.raises(ValueError):
        AttackConfig(eps=0.1, eps_step=0.0)
    with pytest.raises(ValueError):
        AttackConfig(eps=0.1, restarts=0)
    with pytest.raises(ValueError):
        AttackConfig(eps=0.1, value_range=(1.0, 0.0))
    AttackConfig(eps=0.1, eps_step=0.0, steps=0)
    assert default_step_size(8.0, (0, 255)) == 2.0
    assert default_step_size(0.3, (0, 1)) == 0.075


def test_fgsm_zero_eps_is_identity(rng):
    model, params = small_mlp(0)
    x = rng.random((5, 4)).astype(np.float32)
    assert np.array_equal(fgsm(model, params, x, [0, 1, 2, 0, 1], 0.0), x)


def test_fgsm_zero_gradient_is_identity(rng):
    model, params = small_mlp(0)
    zero = ParamSet({k: np.zeros_like(v) for k, v in params.params.items()})
    x = rng.random((5, 4)).astype(np.float32)
    assert np.array_equal(fgsm(model, zero, x, [0, 1, 2, 0, 1], 0.2), x)


def test_fgsm_logistic_example():
    model, params = linear_model([2.0, -1.0])
    x = np.array([[0.5, 0.5]], np.float32)
    x_adv = fgsm(model, params, x, [1], 0.1)
    assert np.allclose(x_adv - x, [[-0.1, 0.1]])
    best, got = corner_max(model, params, x[0], 1, 0.1, (0, 1), x_adv)
    assert got == best


def test_fgsm_records_one_pass_each(rng):
    model, params = small_convnet(0)
    ledger = CostLedger()
    with use_ledger(ledger):
        fgsm(model, params, rng.random((2, 2, 7, 7)), [0, 1], 0.1)
    assert (ledger.forward_count, ledger.backward_count) == (1, 1)


@settings(max_examples=40, deadline=None)
@given(
    d=st.integers(1, 12),
    seed=st.integers(0, 2**31),
    eps=st.sampled_from([0.05, 0.1, 0.3, 1 / 3]),
    label=st.integers(0, 1),
)
def test_linear_attacks_hit_corner_maximum(d, seed, eps, label):
    rng = np.random.default_rng(seed)
    model, params = linear_model(rng.standard_normal(d), rng.standard_normal())
    x = rng.random((1, d)).astype(np.float32)
    x_f = fgsm(model, params, x, [label], eps)
    cfg = AttackConfig(eps=eps, eps_step=eps, steps=5)
    x_p = pgd_attack(model, params, x, [label], cfg, rng=seed)
    best, got_f, got_p = corner_max(model, params, x[0], label, eps, (0.0, 1.0), x_f, x_p)
    assert got_f == best and got_p == best


def test_pgd_zero_steps_without_init_returns_x(rng):
    model, params = small_mlp(0)
    x = rng.random((3, 4)).astype(np.float32)
    out = pgd_attack(model, params, x, [0, 1, 2], AttackConfig(eps=0.3, steps=0, random_init=False))
    assert np.array_equal(out, x)


def test_pgd_ledger_counts(rng):
    model, params = small_mlp(0)
    ledger = CostLedger()
    with use_ledger(ledger):
        pgd_attack(model, params, rng.random((3, 4)), [0, 1, 2], AttackConfig(eps=0.1, steps=7))
    assert (ledger.forward_count, ledger.backward_count, ledger.sgd_update_count) == (7, 7, 0)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    eps=st.floats(0.0, 1.0),
    step=st.floats(1e-3, 2.0),
    steps=st.integers(0, 4),
    loss_kind=st.sampled_from(["xent", "cw"]),
)
def test_pgd_output_contained(seed, eps, step, steps, loss_kind):
    model, params = small_convnet(seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.random((3, 2, 7, 7)).astype(np.float32)
    cfg = AttackConfig(eps=eps, eps_step=step, steps=steps, loss_kind=loss_kind)
    out = pgd_attack(model, params, x, [0, 1, 2], cfg, rng=seed)
    assert np.abs(out.astype(np.float64) - x).max() <= eps
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_project_is_exact_for_awkward_eps():
    x = np.array([0.3, 0.7, 0.999, 1e-8], np.float32)
    for eps in (0.1, 1 / 3, 0.3, 77 / 255):
        out = project(x, x.astype(np.float64) + np.array([1, -1, 1, -1]) * 9.0, eps, (0.0, 1.0))
        assert (np.abs(out.astype(np.float64) - x) <= eps).all()
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_pgd_deterministic(rng):
    model, params = small_convnet(1)
    x = rng.random((4, 2, 7, 7)).astype(np.float32)
    cfg = AttackConfig(eps=0.2, steps=3)
    a = pgd_attack(model, params, x, [0, 1, 2, 0], cfg, rng=9)
    b = pgd_attack(model, params, x, [0, 1, 2, 0], cfg, rng=9)
    assert a.tobytes() == b.tobytes()


def test_single_restart_matches_pgd(rng):
    model, params = small_convnet(2)
    x = rng.random((6, 2, 7, 7)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    cfg = AttackConfig(eps=0.3, steps=4)
    fooled, worst = attack_with_restarts(model, params, x, y, cfg, seed=5)
    direct = pgd_attack(model, params, x, y, cfg, rng=5)
    assert worst.tobytes() == direct.tobytes()
    assert np.array_equal(fooled, model.predict(params, direct) != y)


def test_restart_flags_are_monotone(rng):
    spec = ModelSpec("mlp", (4,), 3, hidden=(8,))
    model, params = build_model(spec), init_params(spec, 3)
    x = rng.random((40, 4)).astype(np.float32)
    y = model.predict(params, x)  # start from all-correct labels
    prev = None
    for r in (1, 2, 5, 10):
        cfg = AttackConfig(eps=0.15, steps=2, restarts=r)
        fooled, worst = attack_with_restarts(model, params, x, y, cfg, seed=11)
        assert np.array_equal(model.predict(params, worst[fooled]) != y[fooled], np.ones(fooled.sum(), bool))
        if prev is not None:
            assert (fooled | ~prev).all() and fooled.sum() >= prev.sum()
        prev = fooled
