"""Proxy-task batches, heads and losses.

Batch builders work on patch arrays of shape ``(B, N, patch_dim)`` and a
``numpy.random.Generator``; losses are torch functions returning the batch
mean (or per-sample values with ``reduction="none"``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Block, Encoder, EncoderConfig, FeedForward, init_weights
from .moe import ConfigError, TaskId

EPS = 1e-7


class DispatchError(TypeError):
    pass


# ---------------------------------------------------------------------------
# Batches


@dataclass
class MimBatch:
    patches: np.ndarray  # (B, N, D) full targets
    masked: np.ndarray  # (B, |M|) sorted indices
    visible: np.ndarray  # (B, N - |M|) sorted indices

    @property
    def mask_ratio(self) -> float:
        return self.masked.shape[1] / self.patches.shape[1]


@dataclass
class JigsawBatch:
    patches: np.ndarray  # (B, N, D) tile-shuffled patches
    perms: np.ndarray  # (B, T*T); slot s holds the tile from position perms[b, s]
    targets: np.ndarray  # (B, T*T, T*T) one-hot rows
    tiles: np.ndarray  # (T*T, patches per tile) patch indices of each slot
    grid: int  # T


@dataclass
class DeMixUpBatch:
    patches: np.ndarray  # (B, N, D)
    labels: np.ndarray  # (B, N) 1 = donor patch
    donors: np.ndarray  # (B,) donor index into the source pool


@dataclass
class ClsBatch:
    patches: np.ndarray  # (B, N, D)
    labels: np.ndarray  # (B,) 0 original, 1 pseudo-anomaly


BATCH_TYPES = {
    TaskId.MIM: MimBatch,
    TaskId.JIGSAW: JigsawBatch,
    TaskId.DEMIXUP: DeMixUpBatch,
    TaskId.AUGCLS: ClsBatch,
    TaskId.GENCLS: ClsBatch,
}


def _batched(patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    return patches[None] if patches.ndim == 2 else patches


def num_masked(n: int, ratio: float) -> int:
    m = int(round(ratio * n))
    if not 0.0 < ratio < 1.0 or m < 1 or m >= n:
        raise ConfigError(f"mask ratio {ratio} gives {m} masked of {n} patches")
    return m


def build_mim_batch(patches: np.ndarray, mask_ratio: float, rng: np.random.Generator) -> MimBatch:
    patches = _batched(patches)
    b, n, _ = patches.shape
    m = num_masked(n, mask_ratio)
    masked, visible = [], []
    for _ in range(b):
        perm = rng.permutation(n)
        masked.append(np.sort(perm[:m]))
        visible.append(np.sort(perm[m:]))
    return MimBatch(patches, np.stack(masked), np.stack(visible))


def mim_batch_from_mask(patches: np.ndarray, masked: np.ndarray) -> MimBatch:
    """Deterministic MIM batch with the same masked index set for every row."""
    patches = _batched(patches)
    b, n, _ = patches.shape
    masked = np.sort(np.asarray(masked, dtype=np.int64))
    if masked.size < 1 or masked.size >= n:
        raise ConfigError(f"{masked.size} masked patches of {n}")
    visible = np.setdiff1d(np.arange(n), masked)
    return MimBatch(patches, np.tile(masked, (b, 1)), np.tile(visible, (b, 1)))


def tile_index(grid_rows: int, grid_cols: int, tiles_per_side: int) -> np.ndarray:
    """Patch indices of each tile, tiles row-major, patches row-major within a tile."""
    t = tiles_per_side
    if grid_rows % t or grid_cols % t:
        raise ValueError(f"{grid_rows}x{grid_cols} patch grid not divisible into {t}x{t} tiles")
    if t * t > (grid_rows * grid_cols) // 4:
        raise ConfigError(f"{t * t} tiles too many for {grid_rows * grid_cols} patches (need T^2 <= N/4)")
    th, tw = grid_rows // t, grid_cols // t
    idx = np.arange(grid_rows * grid_cols).reshape(grid_rows, grid_cols)
    return np.stack([idx[r * th:(r + 1) * th, c * tw:(c + 1) * tw].ravel()
                     for r in range(t) for c in range(t)])


def shuffle_tiles(patches: np.ndarray, tiles: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(patches)
    for slot, src in enumerate(perm):
        out[..., tiles[slot], :] = patches[..., tiles[src], :]
    return out


def build_jigsaw_batch(patches: np.ndarray, grid: int, tiles_per_side: int, rng: np.random.Generator,
                       perms: np.ndarray | None = None) -> JigsawBatch:
    """Shuffle ``T x T`` tiles of each image; ``grid`` is the patch-grid side length."""
    patches = _batched(patches)
    b, n, _ = patches.shape
    tiles = tile_index(grid, n // grid, tiles_per_side)
    k = tiles.shape[0]
    if perms is None:
        perms = np.stack([rng.permutation(k) for _ in range(b)])
    perms = np.asarray(perms).reshape(b, k)
    shuffled = np.stack([shuffle_tiles(patches[i], tiles, perms[i]) for i in range(b)])
    targets = np.zeros((b, k, k), dtype=np.float32)
    for i in range(b):
        targets[i, np.arange(k), perms[i]] = 1.0
    return JigsawBatch(shuffled, perms, targets, tiles, tiles_per_side)


def build_demixup_batch(base: np.ndarray, pool: np.ndarray, base_index: np.ndarray, mix_ratio: float,
                        rng: np.random.Generator) -> DeMixUpBatch:
    """Paste donor patches from ``pool`` at the same grid positions of each base image.

    ``base_index[i]`` is the pool index of base image ``i``; donors are drawn
    from the rest of the pool.
    """
    base = _batched(base)
    b, n, _ = base.shape
    c = int(round(mix_ratio * n))
    if not 0.0 < mix_ratio < 1.0 or c < 1 or c >= n:
        raise ConfigError(f"mix ratio {mix_ratio} gives {c} replaced of {n} patches")
    if len(pool) < 2:
        raise ValueError("DeMixUp needs at least two source images")
    out = base.copy()
    labels = np.zeros((b, n), dtype=np.float32)
    donors = np.empty(b, dtype=np.int64)
    for i in range(b):
        donor = int(rng.integers(len(pool)))
        while donor == int(base_index[i]):
            donor = int(rng.integers(len(pool)))
        chosen = rng.choice(n, size=c, replace=False)
        out[i, chosen] = pool[donor][chosen]
        labels[i, chosen] = 1.0
        donors[i] = donor
    return DeMixUpBatch(out, labels, donors)


# ---------------------------------------------------------------------------
# Losses


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean()
    if reduction == "none":
        return x
    raise ValueError(reduction)


def loss_mim(recon: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor,
             reduction: str = "mean") -> torch.Tensor:
    """Mean over masked patches of the squared L2 patch error."""
    if masked.shape[-1] < 1:
        raise ValueError("MIM loss needs at least one masked patch")
    if recon.dim() == 2:
        recon, targets, masked = recon[None], targets[None], masked.reshape(1, -1)
    idx = masked.unsqueeze(-1).expand(-1, -1, recon.shape[-1])
    err = (torch.gather(recon, 1, idx) - torch.gather(targets, 1, idx)).pow(2).sum(-1)
    return _reduce(err.mean(-1), reduction)


def _bce_probs(probs: torch.Tensor, targets: torch.Tensor, positive_only: bool = False) -> torch.Tensor:
    p = probs.clamp(EPS, 1 - EPS)
    pos = targets * torch.log(p)
    if positive_only:
        return -pos
    return -(pos + (1 - targets) * torch.log(1 - p))


def loss_jigsaw(probs: torch.Tensor, targets: torch.Tensor, mode: str = "full",
                reduction: str = "mean") -> torch.Tensor:
    """Per-tile position BCE summed over positions, averaged over tiles.

    ``mode="eq3"`` keeps only the positive-label term.
    """
    if mode not in ("full", "eq3"):
        raise ValueError(f"unknown jigsaw loss mode {mode!r}")
    if probs.dim() == 2:
        probs, targets = probs[None], targets[None]
    per = _bce_probs(probs, targets, positive_only=mode == "eq3").sum(-1).mean(-1)
    return _reduce(per, reduction)


def loss_demixup(probs: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    if probs.dim() == 1:
        probs, labels = probs[None], labels[None]
    return _reduce(_bce_probs(probs, labels).mean(-1), reduction)


def loss_cls(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Sigmoid BCE in the stable form ``max(z, 0) - y*z + log(1 + exp(-|z|))``."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    per = logits.clamp_min(0) - labels * logits + torch.log1p(torch.exp(-logits.abs()))
    return _reduce(per.reshape(-1), reduction)


# ---------------------------------------------------------------------------
# Heads and model


class MLPHead(nn.Module):
    def __init__(self, width: int, out: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or width
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MimDecoder(nn.Module):
    """Reconstructs every patch from the encoded visible tokens plus mask tokens."""

    def __init__(self, enc_width: int, num_patches: int, patch_dim: int,
                 width: int = 128, depth: int = 8, heads: int = 16, mlp_ratio: int = 4):
        super().__init__()
        self.num_patches = num_patches
        self.embed = nn.Linear(enc_width, width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, num_patches + 1, width))
        self.blocks = nn.ModuleList(Block(width, heads, FeedForward(width, mlp_ratio * width)) for _ in range(depth))
        self.norm = nn.LayerNorm(width, eps=1e-6)
        self.out = nn.Linear(width, patch_dim)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)

    def forward(self, encoded: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        x = self.embed(encoded)
        b, _, w = x.shape
        full = self.mask_token.expand(b, self.num_patches, w).clone()
        full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, w), x[:, 1:])
        x = torch.cat([x[:, :1], full], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.norm(x))[:, 1:]


@dataclass
class TaskConfig:
    mask_ratio: float = 0.4
    tiles_per_side: int = 4
    jigsaw_mode: str = "full"
    mix_ratio: float = 0.25
    decoder_width: int = 128
    decoder_depth: int = 8
    decoder_heads: int = 16
    head_hidden: int | None = None


class MultiTaskModel(nn.Module):
    """Shared encoder plus one exclusive head per proxy task."""

    def __init__(self, enc: EncoderConfig, tasks: TaskConfig | None = None):
        super().__init__()
        self.enc_cfg = enc
        self.task_cfg = tasks = tasks or TaskConfig()
        d = enc.width
        k = tasks.tiles_per_side ** 2
        self.tiles = torch.as_tensor(tile_index(enc.grid, enc.grid, tasks.tiles_per_side))
        self.encoder = Encoder(enc)
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.decoder = MimDecoder(d, enc.num_patches, enc.patch_dim, tasks.decoder_width,
                                  tasks.decoder_depth, tasks.decoder_heads)
        self.jigsaw_head = MLPHead(d, k, tasks.head_hidden)
        self.demixup_head = MLPHead(d, 1, tasks.head_hidden)
        self.aug_head = MLPHead(d, 1, tasks.head_hidden)
        self.gen_head = MLPHead(d, 1, tasks.head_hidden)
        for m in (self.norm, self.jigsaw_head, self.demixup_head, self.aug_head, self.gen_head):
            m.apply(init_weights)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.pos_embed.dtype

    def _t(self, a: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(np.asarray(a), dtype=self.dtype)

    def head_modules(self, task: TaskId) -> list[nn.Module]:
        return {
            TaskId.MIM: [self.decoder],
            TaskId.JIGSAW: [self.jigsaw_head],
            TaskId.DEMIXUP: [self.demixup_head],
            TaskId.AUGCLS: [self.aug_head],
            TaskId.GENCLS: [self.gen_head],
        }[TaskId(task)]

    # per-task forward passes returning raw head outputs

    def mim_reconstruct(self, patches: torch.Tensor, visible: torch.Tensor, dropout_mask=None) -> torch.Tensor:
        idx = visible.unsqueeze(-1).expand(-1, -1, patches.shape[-1])
        vis = torch.gather(patches, 1, idx)
        z = self.norm(self.encoder(vis, TaskId.MIM, True, visible, dropout_mask))
        return self.decoder(z, visible)

    def jigsaw_logits(self, patches: torch.Tensor, dropout_mask=None) -> torch.Tensor:
        z = self.norm(self.encoder(patches, TaskId.JIGSAW, False, None, dropout_mask))[:, 1:]
        tile_tokens = z[:, self.tiles].mean(2)  # (B, T*T, d)
        return self.jigsaw_head(tile_tokens)

    def demixup_logits(self, patches: torch.Tensor, dropout_mask=None) -> torch.Tensor:
        z = self.norm(self.encoder(patches, TaskId.DEMIXUP, True, None, dropout_mask))[:, 1:]
        return self.demixup_head(z).squeeze(-1)

    def cls_logit(self, patches: torch.Tensor, task: TaskId, dropout_mask=None) -> torch.Tensor:
        head = self.aug_head if task == TaskId.AUGCLS else self.gen_head
        z = self.norm(self.encoder(patches, task, True, None, dropout_mask))[:, 0]
        return head(z).squeeze(-1)

    def forward_task(self, task: TaskId, batch, dropout_mask: np.ndarray | None = None,
                     reduction: str = "mean"):
        """Returns ``(loss, outputs)``; outputs are probabilities/reconstructions for scoring."""
        task = TaskId(task)
        if not isinstance(batch, BATCH_TYPES[task]):
            raise DispatchError(f"{type(batch).__name__} given for task {task.name}")
        if task == TaskId.MIM:
            if batch.masked.shape[1] < 1:
                raise ValueError("MIM batch has no masked patches")
            patches = self._t(batch.patches)
            recon = self.mim_reconstruct(patches, torch.as_tensor(batch.visible), dropout_mask)
            return loss_mim(recon, patches, torch.as_tensor(batch.masked), reduction), recon
        if task == TaskId.JIGSAW:
            probs = torch.sigmoid(self.jigsaw_logits(self._t(batch.patches), dropout_mask))
            mode = self.task_cfg.jigsaw_mode
            return loss_jigsaw(probs, self._t(batch.targets), mode, reduction), probs
        if task == TaskId.DEMIXUP:
            probs = torch.sigmoid(self.demixup_logits(self._t(batch.patches), dropout_mask))
            return loss_demixup(probs, self._t(batch.labels), reduction), probs
        logit = self.cls_logit(self._t(batch.patches), task, dropout_mask)
        return loss_cls(logit, self._t(batch.labels), reduction), logit
