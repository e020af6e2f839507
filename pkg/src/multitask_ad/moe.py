"""Task-routed mixture-of-experts feed-forward layer.

Routing is fixed by construction: every token of a task-``t`` batch goes
through the experts assigned to ``t`` and the layer returns their mean.
"""
from __future__ import annotations

import csv
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class TaskId(IntEnum):
    MIM = 0
    JIGSAW = 1
    DEMIXUP = 2
    AUGCLS = 3
    GENCLS = 4

    @property
    def label(self) -> str:
        return _TASK_LABELS[self]


_TASK_LABELS = {
    TaskId.MIM: "mim",
    TaskId.JIGSAW: "jigsaw",
    TaskId.DEMIXUP: "demixup",
    TaskId.AUGCLS: "augcls",
    TaskId.GENCLS: "gencls",
}
ALL_TASKS = tuple(TaskId)
NUM_TASKS = len(ALL_TASKS)


def task_from_label(name: str) -> TaskId:
    for t, lbl in _TASK_LABELS.items():
        if lbl == name.lower():
            return t
    raise KeyError(f"unknown task {name!r}")


class ConfigError(ValueError):
    pass


class RoutingError(RuntimeError):
    pass


ExpertAssignment = Mapping[TaskId, tuple[int, ...]]


def assign_experts(num_experts: int, num_tasks: int = NUM_TASKS) -> dict[TaskId, tuple[int, ...]]:
    """Map tasks onto expert indices.

    With ``K >= num_tasks`` experts, task ``i`` owns a contiguous block of
    ``K // num_tasks`` experts, plus one extra for the first ``K % num_tasks``
    tasks. With fewer experts they are shared round-robin.
    """
    if num_experts < 1:
        raise ConfigError("number of experts must be >= 1")
    tasks = ALL_TASKS[:num_tasks]
    if num_experts < num_tasks:
        return {t: (i % num_experts,) for i, t in enumerate(tasks)}
    base, extra = divmod(num_experts, num_tasks)
    out, start = {}, 0
    for i, t in enumerate(tasks):
        size = base + (1 if i < extra else 0)
        out[t] = tuple(range(start, start + size))
        start += size
    return out


def sample_dropout(rate: float, assignment: ExpertAssignment, num_experts: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Boolean activity vector for one MoE layer.

    Each expert drops independently with probability ``rate``; a task left
    with no active expert gets one of its experts back, chosen uniformly.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"expert dropout rate must lie in [0, 1), got {rate}")
    active = rng.random(num_experts) >= rate
    for experts in assignment.values():
        if not active[list(experts)].any():
            active[experts[rng.integers(len(experts))]] = True
    return active


def sample_dropout_mask(rate: float, assignment: ExpertAssignment, num_experts: int,
                        num_layers: int, rng: np.random.Generator) -> np.ndarray:
    """``(num_layers, K)`` mask, one independent draw per MoE layer."""
    return np.stack([sample_dropout(rate, assignment, num_experts, rng) for _ in range(num_layers)])


class Expert(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MoEFeedForward(nn.Module):
    def __init__(self, width: int, hidden: int, assignment: ExpertAssignment, num_experts: int):
        super().__init__()
        self.experts = nn.ModuleList(Expert(width, hidden) for _ in range(num_experts))
        self.assignment = {TaskId(t): tuple(e) for t, e in assignment.items()}
        # tokens routed to each (expert, task) pair
        self.register_buffer("counts", torch.zeros(num_experts, NUM_TASKS, dtype=torch.int64), persistent=False)

    def active_experts(self, task: TaskId, active: np.ndarray | None) -> list[int]:
        try:
            assigned = self.assignment[TaskId(task)]
        except KeyError:
            raise RoutingError(f"no experts assigned to task {TaskId(task).name}") from None
        if active is None:
            return list(assigned)
        chosen = [e for e in assigned if active[e]]
        if not chosen:
            raise RoutingError(f"dropout mask deactivates every expert of task {TaskId(task).name}")
        return chosen

    def forward(self, x: torch.Tensor, task: TaskId, active: np.ndarray | None = None) -> torch.Tensor:
        chosen = self.active_experts(task, active)
        n_tokens = x.shape[0] * x.shape[1] if x.dim() == 3 else x.shape[0]
        out = None
        for e in chosen:
            self.counts[e, int(task)] += n_tokens
            y = self.experts[e](x)
            out = y if out is None else out + y
        return out / len(chosen)

    def reset_counts(self) -> None:
        self.counts.zero_()


def write_activation_counts(path: str | Path, layers: Mapping[int, MoEFeedForward]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "expert", "task", "count"])
        for layer_idx, moe in layers.items():
            counts = moe.counts.cpu().numpy()
            for e in range(counts.shape[0]):
                for t in ALL_TASKS:
                    w.writerow([layer_idx, e, t.label, int(counts[e, t])])
