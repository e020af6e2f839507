import math

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multitask_ad.famo import (FamoState, QuadraticProblem, equal_rate_bench, famo_combined_loss, famo_update,
                               famo_weights, gradient_coefficients, softmax_jacobian)


def test_weights_at_init_uniform():
    assert np.array_equal(famo_weights(FamoState.init(5)), np.full(5, 0.2))


def test_weights_shift_invariant():
    assert np.allclose(famo_weights(np.full(3, 123.4)), np.full(3, 1 / 3), atol=1e-15)


def test_weights_hand_softmax():
    assert np.allclose(famo_weights(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)


def test_weights_large_logits_stable():
    p = famo_weights(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-12


def test_combined_loss_hand_case():
    got = famo_combined_loss(torch.tensor([1.0, 2.0], dtype=torch.float64), np.array([0.5, 0.5]))
    assert abs(got.item() - 2 / 3 * math.log(2)) < 1e-12


def test_combined_loss_equal_losses():
    L = 0.7
    got = famo_combined_loss(torch.full((4,), L, dtype=torch.float64), np.full(4, 0.25))
    assert abs(got.item() - L * math.log(L)) < 1e-12


def test_single_task_gradient_is_task_gradient():
    x = torch.tensor([1.5, -0.3], dtype=torch.float64, requires_grad=True)
    task = (x ** 2).sum() + 0.2
    (g,) = torch.autograd.grad(famo_combined_loss(task[None], np.array([1.0])), x)
    assert torch.allclose(g, 2 * x.detach(), atol=1e-15)


def test_gradient_is_convex_combination():
    x = torch.tensor([0.4, 1.2, -0.8], dtype=torch.float64, requires_grad=True)
    losses = torch.stack([(x ** 2).sum() + 1, ((x - 1) ** 2).sum() + 0.5, (x[0] - 2) ** 2 + 0.1])
    p = np.array([0.2, 0.5, 0.3])
    coef = gradient_coefficients(losses.detach().numpy(), p)
    assert np.all(coef > 0) and abs(coef.sum() - 1) < 1e-12
    (g,) = torch.autograd.grad(famo_combined_loss(losses, p), x, retain_graph=True)
    per = [torch.autograd.grad(losses[i], x, retain_graph=True)[0] for i in range(3)]
    assert torch.allclose(g, sum(c * gi for c, gi in zip(coef, per)), atol=1e-14)


def test_all_losses_at_floor_warns(caplog):
    out = famo_combined_loss(torch.zeros(3, dtype=torch.float64), np.full(3, 1 / 3))
    assert torch.isfinite(out)
    assert "floor" in caplog.text


def test_update_zero_ratio_unchanged():
    s = FamoState.init(3, beta=0.5)
    s.logits = np.array([0.1, -0.2, 0.3])
    s.prev_losses = np.array([1.0, 2.0, 3.0])
    before = s.logits.copy()
    famo_update(s, [1.0, 2.0, 3.0])
    assert np.array_equal(s.logits, before)


def test_update_hand_case():
    s = FamoState.init(2, beta=1.0)
    s.prev_losses = np.array([2.0, 1.0])
    famo_update(s, [1.0, 1.0])  # r = (ln 2, 0)
    assert np.allclose(s.logits, [-0.25 * math.log(2), 0.25 * math.log(2)], atol=1e-12, rtol=0)
    assert s.weights[1] > s.weights[0]
    assert np.array_equal(s.prev_losses, [1.0, 1.0])


def test_update_uniform_ratio_unchanged():
    s = FamoState.init(4, beta=1.0)
    s.prev_losses = np.array([1.0, 2.0, 4.0, 8.0])
    famo_update(s, s.prev_losses / 3.0)
    assert np.allclose(s.logits, 0.0, atol=1e-15)


def test_update_floor_gives_finite_logits():
    s = FamoState.init(2, beta=1.0)
    s.prev_losses = np.array([0.0, 1.0])
    famo_update(s, [0.0, 0.5])
    assert np.all(np.isfinite(s.logits))


def test_jacobian_rows_sum_to_zero():
    p = famo_weights(np.array([0.3, -1.0, 2.0]))
    assert np.allclose(softmax_jacobian(p).sum(1), 0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_update_invariant_to_per_task_rescaling(seed):
    rng = np.random.default_rng(seed)
    prev, new, scale = rng.uniform(0.1, 5, 4), rng.uniform(0.1, 5, 4), rng.uniform(0.1, 10, 4)
    logits = rng.normal(size=4)
    a, b = FamoState(logits.copy(), 0.3), FamoState(logits.copy(), 0.3)
    a.prev_losses, b.prev_losses = prev, prev * scale
    famo_update(a, new)
    famo_update(b, new * scale)
    assert np.allclose(a.logits, b.logits, atol=1e-12)


def test_simplex_over_long_run():
    trace = equal_rate_bench(QuadraticProblem(), steps=1000, beta=0.05)
    sums = trace.weights.sum(1)
    assert np.all(np.abs(sums - 1) <= 1e-6) and np.all(trace.weights > 0)


def test_identical_quadratics_stay_uniform():
    prob = QuadraticProblem(curvatures=((1.0, 3.0), (1.0, 3.0)), centers=((1.0, 0.5), (1.0, 0.5)))
    trace = equal_rate_bench(prob, steps=200)
    assert np.allclose(trace.weights, 0.5, atol=1e-12)


def test_equal_rate_lower_dispersion_than_uniform():
    prob = QuadraticProblem()
    famo = equal_rate_bench(prob, steps=400, use_famo=True, seed=3)
    flat = equal_rate_bench(prob, steps=400, use_famo=False, seed=3)
    assert famo.dispersion() < flat.dispersion()
