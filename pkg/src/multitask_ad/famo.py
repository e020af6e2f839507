"""Softmax-weighted log-loss task balancing (FAMO).

The combined objective is ``c * sum_i p_i * log L_i`` with ``p = softmax(w)``
and ``c = 1 / sum_i (p_i / L_i)`` held constant, so its parameter gradient is
a convex combination of the task gradients. After every optimizer step the
logits move by ``-beta * J^T log(L_prev / L_new)`` where ``J`` is the softmax
Jacobian, shifting weight toward the tasks whose losses fell least.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass
class FamoState:
    logits: np.ndarray
    beta: float = 0.025
    floor: float = 1e-8
    prev_losses: np.ndarray | None = None
    steps: int = field(default=0)

    @classmethod
    def init(cls, m: int, beta: float = 0.025, floor: float = 1e-8) -> "FamoState":
        return cls(np.zeros(m, dtype=np.float64), beta, floor)

    @property
    def weights(self) -> np.ndarray:
        return famo_weights(self)


def famo_weights(state: FamoState | np.ndarray) -> np.ndarray:
    w = np.asarray(state.logits if isinstance(state, FamoState) else state, dtype=np.float64)
    e = np.exp(w - w.max())
    return e / e.sum()


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def famo_combined_loss(losses: torch.Tensor, p: np.ndarray, floor: float = 1e-8) -> torch.Tensor:
    """``c * sum p_i log L_i`` with ``c = (sum p_i / L_i)^-1`` detached."""
    clamped = losses.clamp_min(floor)
    pw = torch.as_tensor(p, dtype=losses.dtype)
    if bool((losses.detach() <= floor).all()):
        log.warning("every task loss is at the floor %.1e", floor)
    c = 1.0 / (pw / clamped.detach()).sum()
    return c * (pw * torch.log(clamped)).sum()


def gradient_coefficients(losses: np.ndarray, p: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Per-task coefficients ``c * p_i / L_i`` multiplying each task gradient; they sum to one."""
    L = np.maximum(np.asarray(losses, dtype=np.float64), floor)
    raw = p / L
    return raw / raw.sum()


def famo_update(state: FamoState, new_losses) -> FamoState:
    """Logit step from ``state.prev_losses`` to ``new_losses``; mutates and returns ``state``."""
    new = np.maximum(np.asarray(new_losses, dtype=np.float64), state.floor)
    if state.prev_losses is None:
        state.prev_losses = new
        return state
    prev = np.maximum(np.asarray(state.prev_losses, dtype=np.float64), state.floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.log(prev) - np.log(new)
    r[~np.isfinite(r)] = 0.0
    p = famo_weights(state)
    state.logits = state.logits - state.beta * softmax_jacobian(p).T @ r
    state.prev_losses = new
    state.steps += 1
    return state


# ---------------------------------------------------------------------------
# Synthetic benchmark


@dataclass
class QuadraticProblem:
    """Losses ``L_i(x) = 0.5 * sum_j h_ij (x_j - c_ij)^2 + offset_i`` sharing one parameter vector.

    The defaults conflict (opposite minima along the first axis), differ
    tenfold in curvature along the second, and have strictly positive minima
    so the log-losses stay bounded.
    """

    curvatures: tuple[tuple[float, ...], ...] = ((1.0, 1.0), (1.0, 10.0))
    centers: tuple[tuple[float, ...], ...] = ((1.0, 0.0), (-1.0, 0.0))
    offsets: tuple[float, ...] = (0.5, 0.5)

    def losses(self, x: torch.Tensor) -> torch.Tensor:
        out = []
        for h, c, o in zip(self.curvatures, self.centers, self.offsets):
            ht = torch.as_tensor(h, dtype=x.dtype)
            ct = torch.as_tensor(c, dtype=x.dtype)
            out.append(0.5 * (ht * (x - ct) ** 2).sum() + o)
        return torch.stack(out)


@dataclass
class RateTrace:
    losses: np.ndarray  # (steps + 1, m)
    rates: np.ndarray  # (steps, m) relative decrease per step
    weights: np.ndarray  # (steps + 1, m)

    def dispersion(self, last_fraction: float = 0.5) -> float:
        """Mean over steps of the across-task std of relative decrease rates."""
        start = int(len(self.rates) * (1 - last_fraction))
        return float(self.rates[start:].std(axis=1).mean())


def equal_rate_bench(problem: QuadraticProblem, steps: int = 200, lr: float = 0.01, beta: float = 0.025,
                     use_famo: bool = True, seed: int = 0) -> RateTrace:
    """Gradient descent on the combined objective, recording relative loss decrease rates.

    With ``use_famo=False`` the weights stay uniform and the objective is the
    plain mean of the losses.
    """
    rng = np.random.default_rng(seed)
    dim = len(problem.centers[0])
    x = torch.tensor(rng.normal(0.0, 1.0, size=dim) + 2.0, dtype=torch.float64, requires_grad=True)
    m = len(problem.curvatures)
    state = FamoState.init(m, beta=beta)
    loss_hist, w_hist = [], [famo_weights(state)]
    for _ in range(steps):
        L = problem.losses(x)
        if use_famo:
            obj = famo_combined_loss(L, famo_weights(state), state.floor)
        else:
            obj = L.mean()
        loss_hist.append(L.detach().numpy().copy())
        (g,) = torch.autograd.grad(obj, x)
        with torch.no_grad():
            x -= lr * g
        if use_famo:
            state.prev_losses = loss_hist[-1]
            famo_update(state, problem.losses(x).detach().numpy())
        w_hist.append(famo_weights(state))
    loss_hist.append(problem.losses(x).detach().numpy().copy())
    losses = np.array(loss_hist)
    rates = (losses[:-1] - losses[1:]) / losses[:-1]
    return RateTrace(losses, rates, np.array(w_hist))
