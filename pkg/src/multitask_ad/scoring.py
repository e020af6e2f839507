"""Inference-time anomaly scores, percentile-rank fusion and pixel anomaly maps."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from scipy import ndimage

from .data import patchify_batch
from .moe import ALL_TASKS, TaskId, task_from_label
from .tasks import MultiTaskModel, build_jigsaw_batch, loss_jigsaw, mim_batch_from_mask, num_masked

TABLES_FILE = "percentiles.json"


def normalize_score(x):
    """``1 - exp(-x)`` for nonnegative raw scores."""
    arr = np.asarray(x, dtype=np.float64)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("raw score must be nonnegative")
    out = -np.expm1(-arr)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ScoringOptions:
    mask_ratio: float = 0.4
    tiles_per_side: int = 4
    jigsaw_mode: str = "full"
    jigsaw_permutations: int = 4
    top_k: int = 10
    mim_mode: str = "complementary"
    seed: int = 1234
    batch_size: int = 32

    @classmethod
    def from_config(cls, cfg) -> "ScoringOptions":
        return cls(cfg.tasks.mask_ratio, cfg.tasks.tiles_per_side, cfg.tasks.jigsaw_mode,
                   cfg.scoring.jigsaw_permutations, cfg.scoring.top_k, cfg.scoring.mim_mode, cfg.scoring.seed)

    @classmethod
    def from_model(cls, model: MultiTaskModel, **kw) -> "ScoringOptions":
        tc = model.task_cfg
        return cls(tc.mask_ratio, tc.tiles_per_side, tc.jigsaw_mode, **kw)


def complementary_masks(n: int, mask_ratio: float, seed: int) -> list[np.ndarray]:
    """Split a seeded permutation of ``0..n-1`` into ``ceil(1/ratio)`` near-equal masks."""
    passes = max(2, math.ceil(1.0 / mask_ratio - 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, passes) if chunk.size]


@torch.no_grad()
def score_mim(model: MultiTaskModel, patches: np.ndarray, opts: ScoringOptions):
    """Returns ``(raw (B,), per-patch residual (B, N))``.

    Complementary mode reconstructs each patch once, in the pass where it is
    masked. Single mode uses one seeded mask and leaves unmasked residuals at 0.
    """
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    b, n, _ = patches.shape
    if opts.mim_mode == "single":
        m = num_masked(n, opts.mask_ratio)
        masks = [np.sort(np.random.default_rng(opts.seed).permutation(n)[:m])]
    else:
        masks = complementary_masks(n, opts.mask_ratio, opts.seed)
    residual = np.zeros((b, n))
    covered = np.zeros(n, dtype=bool)
    target = model._t(patches)
    for masked in masks:
        batch = mim_batch_from_mask(patches, masked)
        recon = model.mim_reconstruct(target, torch.as_tensor(batch.visible))
        err = (recon - target).pow(2).sum(-1).numpy()
        residual[:, masked] = err[:, masked]
        covered[masked] = True
    raw = residual[:, covered].mean(1)
    return raw, residual


@torch.no_grad()
def score_jigsaw(model: MultiTaskModel, patches: np.ndarray, opts: ScoringOptions) -> np.ndarray:
    """Mean jigsaw loss over ``R`` seeded tile permutations (shared by all images)."""
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    b, n, _ = patches.shape
    grid = int(round(math.sqrt(n)))
    k = opts.tiles_per_side ** 2
    rng = np.random.default_rng(opts.seed + 1)
    total = np.zeros(b)
    for _ in range(opts.jigsaw_permutations):
        perm = rng.permutation(k)
        batch = build_jigsaw_batch(patches, grid, opts.tiles_per_side, rng, perms=np.tile(perm, (b, 1)))
        probs = torch.sigmoid(model.jigsaw_logits(model._t(batch.patches)))
        total += loss_jigsaw(probs, model._t(batch.targets), opts.jigsaw_mode, reduction="none").numpy()
    return total / opts.jigsaw_permutations


def top_k_mean(values: np.ndarray, k: int) -> np.ndarray:
    values = np.atleast_2d(values)
    k = min(k, values.shape[1])
    return -np.sort(-values, axis=1)[:, :k].mean(1)


@torch.no_grad()
def score_demixup(model: MultiTaskModel, patches: np.ndarray, opts: ScoringOptions):
    """Returns ``(mean of top-k patch probabilities (B,), probabilities (B, N))``."""
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    probs = torch.sigmoid(model.demixup_logits(model._t(patches))).numpy().astype(np.float64)
    return top_k_mean(probs, opts.top_k), probs


@torch.no_grad()
def score_cls(model: MultiTaskModel, patches: np.ndarray, head: str) -> np.ndarray:
    task = {"aug": TaskId.AUGCLS, "gen": TaskId.GENCLS}[head]
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    logits = model.cls_logit(model._t(patches), task).double()
    return torch.sigmoid(logits).numpy()


@dataclass
class ImageScores:
    raw: np.ndarray  # (B, 5) raw scores, columns in TaskId order
    mim_residual: np.ndarray  # (B, N)
    demixup_probs: np.ndarray  # (B, N)

    @property
    def scores(self) -> np.ndarray:
        """Score vectors: MIM and jigsaw passed through ``1 - exp(-x)``."""
        out = self.raw.copy()
        for t in (TaskId.MIM, TaskId.JIGSAW):
            out[:, int(t)] = normalize_score(out[:, int(t)])
        return out


def score_images(model: MultiTaskModel, images: np.ndarray, opts: ScoringOptions) -> ImageScores:
    model.eval()
    p = model.enc_cfg.patch_size
    out_s, out_r, out_d = [], [], []
    for start in range(0, len(images), opts.batch_size):
        patches = patchify_batch(np.asarray(images[start:start + opts.batch_size], dtype=np.float32), p)
        raw_mim, residual = score_mim(model, patches, opts)
        raw_jig = score_jigsaw(model, patches, opts)
        s_dmx, probs = score_demixup(model, patches, opts)
        s = np.stack([raw_mim, raw_jig, s_dmx,
                      score_cls(model, patches, "aug"), score_cls(model, patches, "gen")], axis=1)
        out_s.append(np.atleast_2d(s))
        out_r.append(residual)
        out_d.append(probs)
    return ImageScores(np.concatenate(out_s), np.concatenate(out_r), np.concatenate(out_d))


# ---------------------------------------------------------------------------
# Percentile-rank fusion

PercentileTable = dict  # task label -> ascending list of validation scores


def build_percentile_tables(scores: np.ndarray) -> PercentileTable:
    """Sort each task's raw validation scores; ``scores`` is ``(n_images, 5)``.

    Ranks are taken on raw scores because ``1 - exp(-x)`` saturates in float64
    for large reconstruction errors and would create artificial ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("percentile tables need at least one validation image")
    return {t.label: np.sort(scores[:, int(t)]).tolist() for t in ALL_TASKS}


def save_tables(path: str | Path, tables: PercentileTable, weights: Mapping[str, float] | None = None) -> None:
    payload = {"tables": tables}
    if weights is not None:
        payload["weights"] = dict(weights)
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_tables(path: str | Path) -> tuple[PercentileTable, dict | None]:
    payload = json.loads(Path(path).read_text())
    return payload["tables"], payload.get("weights")


def percentile_rank(score: float, entries) -> float:
    """Mid-rank percentile: ``(#below + 0.5 * #equal) / n``."""
    arr = np.asarray(entries, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty percentile table")
    arr = np.sort(arr)
    lo = np.searchsorted(arr, score, side="left")
    hi = np.searchsorted(arr, score, side="right")
    return float((lo + 0.5 * (hi - lo)) / arr.size)


def uniform_weights(tasks) -> dict[str, float]:
    tasks = list(tasks)
    return {TaskId(t).label: 1.0 / len(tasks) for t in tasks}


def _normalized(weights: Mapping[str, float]) -> dict[str, float]:
    total = sum(weights.values())
    if total <= 0 or any(w < 0 for w in weights.values()):
        raise ValueError("fusion weights must be nonnegative with positive sum")
    return {k: v / total for k, v in weights.items()}


def fuse(scores, tables: PercentileTable, weights: Mapping[str, float]) -> float:
    """Weighted mean of per-task percentile ranks; ``scores`` indexed by TaskId."""
    w = _normalized(weights)
    total = 0.0
    for label, wt in w.items():
        if wt == 0:
            continue
        if label not in tables:
            raise KeyError(f"no percentile table for task {label}")
        total += wt * percentile_rank(scores[int(task_from_label(label))], tables[label])
    return total


def percentiles(scores: np.ndarray, tables: PercentileTable) -> np.ndarray:
    scores = np.atleast_2d(scores)
    out = np.zeros_like(scores, dtype=np.float64)
    for t in ALL_TASKS:
        arr = np.asarray(tables[t.label])
        out[:, int(t)] = [percentile_rank(s, arr) for s in scores[:, int(t)]]
    return out


def simplex_grid(m: int, step: float):
    units = int(round(1.0 / step))
    for combo in itertools.combinations(range(units + m - 1), m - 1):
        parts, prev = [], -1
        for c in combo:
            parts.append(c - prev - 1)
            prev = c
        parts.append(units + m - 2 - prev)
        yield np.array(parts, dtype=np.float64) / units


def fit_fusion_weights(scores: np.ndarray, labels, tables: PercentileTable, tasks, step: float = 0.25):
    """Coarse grid search over the weight simplex maximizing AUROC on labelled data.

    Ties go to the candidate closest to uniform weights.
    """
    from .evaluation import auroc

    tasks = [TaskId(t) for t in tasks]
    pct = percentiles(scores, tables)[:, [int(t) for t in tasks]]
    uniform = np.full(len(tasks), 1.0 / len(tasks))
    best, best_key = None, None
    for w in simplex_grid(len(tasks), step):
        key = (round(auroc(pct @ w, labels), 12), -float(np.abs(w - uniform).sum()))
        if best_key is None or key > best_key:
            best, best_key = w, key
    return {t.label: float(x) for t, x in zip(tasks, best)}


# ---------------------------------------------------------------------------
# Anomaly maps


def _minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rng = x.max() - x.min()
    if not np.isfinite(rng) or rng <= 0:
        return np.zeros_like(x)
    return (x - x.min()) / rng


def anomaly_map(mim_residual: np.ndarray, demixup_probs: np.ndarray, grid: int, patch_size: int) -> np.ndarray:
    """Average of the two min-max normalized patch maps, upsampled to pixels and Gaussian-smoothed."""
    patch_map = 0.5 * (_minmax(mim_residual) + _minmax(demixup_probs))
    pix = np.kron(patch_map.reshape(grid, grid), np.ones((patch_size, patch_size)))
    pix = ndimage.gaussian_filter(pix, sigma=patch_size / 2.0, mode="nearest")
    return np.clip(pix, 0.0, 1.0)


def image_anomaly_maps(model: MultiTaskModel, images: np.ndarray, opts: ScoringOptions,
                       scored: ImageScores | None = None) -> np.ndarray:
    scored = scored or score_images(model, images, opts)
    cfg = model.enc_cfg
    return np.stack([anomaly_map(r, d, cfg.grid, cfg.patch_size)
                     for r, d in zip(scored.mim_residual, scored.demixup_probs)])


def save_map(path: str | Path, amap: np.ndarray, image: np.ndarray | None = None,
             overlay_path: str | Path | None = None) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(np.clip(np.rint(amap * 255), 0, 255).astype(np.uint8)).save(path, format="PNG")
    if overlay_path is not None and image is not None:
        from matplotlib import colormaps

        colored = colormaps["jet"](amap)[:, :, :3]
        base = np.asarray(image, dtype=np.float64)
        if base.ndim == 2:
            base = np.repeat(base[:, :, None], 3, axis=2)
        blend = 0.6 * base + 0.4 * colored
        PILImage.fromarray(np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8)).save(overlay_path, format="PNG")
