"""Joint training: curriculum phases, FAMO weighting, plateau LR schedule, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import fill_missing_grads
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import (ANOMALOUS, DatasetManifest, load_manifest_images, patchify_batch, read_manifest)
from .famo import FamoState, famo_combined_loss, famo_update, famo_weights, gradient_coefficients
from .moe import ALL_TASKS, TaskId, sample_dropout_mask, write_activation_counts
from .pseudo import AUG, GEN, ingest_external_generated, load_corpus, pseudo_pair
from .tasks import (ClsBatch, MultiTaskModel, build_demixup_batch, build_jigsaw_batch, build_mim_batch)

log = logging.getLogger(__name__)

PHASE1_TASKS = (TaskId.MIM, TaskId.JIGSAW, TaskId.DEMIXUP)
METRIC_COLUMNS = (["epoch", "step"] + [f"loss_{t.label}" for t in ALL_TASKS]
                  + [f"weight_{t.label}" for t in ALL_TASKS] + ["lr", "combined", "phase"])
# stream tags for derived seeds
_SHUFFLE, _DROPOUT, _COIN, _VAL = 1000, 1001, 1002, 1003


class TrainingError(RuntimeError):
    pass


def active_tasks(enabled: list[TaskId], epoch: int, phase1_epochs: int) -> tuple[int, list[TaskId]]:
    """Phase number and tasks trained in ``epoch`` (0-based).

    When no enabled task belongs to phase 1, training starts in phase 2.
    """
    p1 = [t for t in enabled if t in PHASE1_TASKS]
    if epoch < phase1_epochs and p1:
        return 1, p1
    return 2, list(enabled)


@dataclass
class TrainData:
    images: np.ndarray  # (n, H, W, C) normal training images
    names: list[str]
    aug: np.ndarray | None = None
    gen: np.ndarray | None = None
    val_images: np.ndarray | None = None  # normal validation images only
    val_aug: np.ndarray | None = None
    val_gen: np.ndarray | None = None


def _pseudo_arrays(images: np.ndarray, seed: int, cfg: RunConfig):
    aug_cfg, ell_cfg = cfg.pseudo.augment(), cfg.pseudo.ellipse(cfg.encoder.image_size)
    pairs = [pseudo_pair(img, seed ^ i, aug_cfg, ell_cfg) for i, img in enumerate(images)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def prepare_data(cfg: RunConfig, train: DatasetManifest | None = None, val: DatasetManifest | None = None) -> TrainData:
    size = cfg.encoder.image_size
    if train is None:
        if not cfg.data.train:
            raise FileNotFoundError("no training manifest configured")
        train = read_manifest(cfg.data.train, "train")
    if val is None and cfg.data.val and Path(cfg.data.val).exists():
        val = read_manifest(cfg.data.val, "val")
    images = load_manifest_images(train, size)
    names = [Path(r.path).stem for r in train.records]
    data = TrainData(images, names)
    needs_pseudo = any(t in (TaskId.AUGCLS, TaskId.GENCLS) for t in cfg.tasks.enabled_tasks)
    if needs_pseudo:
        aug = gen = None
        if cfg.pseudo.corpus_dir:
            aug = load_corpus(cfg.pseudo.corpus_dir, names, AUG, size)
            gen = load_corpus(cfg.pseudo.corpus_dir, names, GEN, size)
        if aug is None or gen is None:
            p_aug, p_gen = _pseudo_arrays(images, cfg.pseudo.seed, cfg)
            aug = p_aug if aug is None else aug
            gen = p_gen if gen is None else gen
        if cfg.pseudo.external_gen_dir:
            ext = ingest_external_generated(cfg.pseudo.external_gen_dir, names, size)
            for i, n in enumerate(names):
                if n in ext:
                    gen[i] = ext[n]
        data.aug, data.gen = aug, gen
    if val is not None:
        normal = DatasetManifest("val", [r for r in val.records if r.label != ANOMALOUS])
        if normal.records:
            data.val_images = load_manifest_images(normal, size)
            if needs_pseudo:
                data.val_aug, data.val_gen = _pseudo_arrays(data.val_images, cfg.pseudo.seed + 1, cfg)
    return data


def build_task_batches(tasks, patches: np.ndarray, index: np.ndarray, pool: np.ndarray, cfg: RunConfig,
                       seed_key, aug: np.ndarray | None = None, gen: np.ndarray | None = None) -> dict:
    """One batch per task for the base images ``pool[index]``; every task draws its own stream."""
    grid = cfg.encoder.image_size // cfg.encoder.patch_size
    tc = cfg.tasks
    batches = {}
    for t in tasks:
        rng = np.random.default_rng([*seed_key, int(t)])
        if t == TaskId.MIM:
            batches[t] = build_mim_batch(patches, tc.mask_ratio, rng)
        elif t == TaskId.JIGSAW:
            batches[t] = build_jigsaw_batch(patches, grid, tc.tiles_per_side, rng)
        elif t == TaskId.DEMIXUP:
            batches[t] = build_demixup_batch(patches, pool, index, tc.mix_ratio, rng)
    if TaskId.AUGCLS in tasks or TaskId.GENCLS in tasks:
        # each sample is shown as exactly one of its two pseudo-anomalies this step,
        # and as the original image to the other classifier
        use_aug = np.random.default_rng([*seed_key, _COIN]).random(len(index)) < 0.5
        p = cfg.encoder.patch_size
        if TaskId.AUGCLS in tasks:
            labels = use_aug.astype(np.float32)
            src = np.where(labels[:, None, None] > 0, patchify_batch(aug, p), patches)
            batches[TaskId.AUGCLS] = ClsBatch(src, labels)
        if TaskId.GENCLS in tasks:
            labels = (~use_aug).astype(np.float32)
            src = np.where(labels[:, None, None] > 0, patchify_batch(gen, p), patches)
            batches[TaskId.GENCLS] = ClsBatch(src, labels)
    return batches


def task_losses(model: MultiTaskModel, tasks, batches: dict, dropout_mask=None) -> torch.Tensor:
    return torch.stack([model.forward_task(t, batches[t], dropout_mask)[0] for t in tasks])


def train_step(model: MultiTaskModel, optimizer: torch.optim.Optimizer, famo: FamoState, tasks,
               batches: dict, dropout_mask=None, debug: bool = False, grad_clip: float | None = None):
    """One optimizer step on the FAMO-combined loss followed by the FAMO logit update.

    Returns ``(losses_before, combined_value)``.
    """
    model.train()
    p = famo_weights(famo)
    losses = task_losses(model, tasks, batches, dropout_mask)
    before = losses.detach().cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(before)):
        raise TrainingError(f"non-finite task losses {before.tolist()}")
    combined = famo_combined_loss(losses, p, famo.floor)
    if debug:
        coef = gradient_coefficients(before, p, famo.floor)
        assert np.all(coef > 0) and abs(coef.sum() - 1.0) < 1e-9
    optimizer.zero_grad(set_to_none=False)
    combined.backward()
    fill_missing_grads(model)
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    with torch.no_grad():
        after = task_losses(model, tasks, batches, dropout_mask).cpu().numpy().astype(np.float64)
    famo.prev_losses = before
    famo_update(famo, after)
    return before, float(combined.detach())


def make_optimizer(model: torch.nn.Module, cfg: RunConfig) -> torch.optim.Optimizer:
    tr = cfg.train
    if tr.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=tr.lr, weight_decay=tr.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=tr.lr, momentum=tr.momentum, weight_decay=tr.weight_decay)


def make_scheduler(optimizer, cfg: RunConfig):
    tr = cfg.train
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=tr.lr_factor, patience=tr.patience, threshold=tr.threshold,
        threshold_mode="rel", min_lr=tr.lr_min)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class TrainResult:
    model: MultiTaskModel
    run_dir: Path | None
    rows: list[list[str]] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    famo: FamoState | None = None


def train(cfg: RunConfig, seed: int, run_dir: str | Path | None = None, data: TrainData | None = None) -> TrainResult:
    """Train one model; writes ``metrics.csv``, ``epochs.csv``, ``last/``, ``best/`` under ``run_dir``."""
    torch.manual_seed(seed)
    data = data or prepare_data(cfg)
    enabled = cfg.tasks.enabled_tasks
    model = MultiTaskModel(cfg.encoder.build(), cfg.tasks.build())
    if cfg.train.standardize_inputs:
        std = float(data.images.std(dtype=np.float64))
        if std > 0:
            model.encoder.set_input_stats(float(data.images.mean(dtype=np.float64)), std)
    optimizer = make_optimizer(model, cfg)
    scheduler = make_scheduler(optimizer, cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(cfg.to_json())

    p = cfg.encoder.patch_size
    pool = patchify_batch(data.images, p)
    n = len(pool)
    bs = min(cfg.train.batch_size, n)
    enc = model.encoder
    moe_layers = len(enc.moe_layers)
    result = TrainResult(model, run_dir)
    famo = None
    phase_tasks: list[TaskId] = []
    best = np.inf
    step = 0

    for epoch in range(cfg.train.epochs):
        phase, tasks = active_tasks(enabled, epoch, cfg.train.phase1_epochs)
        if tasks != phase_tasks:
            if famo is None or cfg.train.famo_reinit:
                famo = FamoState.init(len(tasks), cfg.train.famo_beta, cfg.train.famo_floor)
            else:
                famo = _warm_start(famo, phase_tasks, tasks)
            phase_tasks = tasks
            best = np.inf
        order = np.random.default_rng([seed, epoch, _SHUFFLE]).permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batches = build_task_batches(
                tasks, pool[idx], idx, pool, cfg, (seed, step),
                None if data.aug is None else data.aug[idx], None if data.gen is None else data.gen[idx])
            mask = None
            if moe_layers and cfg.encoder.expert_dropout_rate > 0:
                mask = sample_dropout_mask(cfg.encoder.expert_dropout_rate, enc.assignment, cfg.encoder.num_experts,
                                           moe_layers, np.random.default_rng([seed, step, _DROPOUT]))
            weights = famo_weights(famo)
            lr = optimizer.param_groups[0]["lr"]
            try:
                losses, combined = train_step(model, optimizer, famo, tasks, batches, mask,
                                              grad_clip=cfg.train.grad_clip)
            except (TrainingError, FloatingPointError) as exc:
                _dump_diagnostic(run_dir, epoch, step, tasks, lr, weights, str(exc))
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            result.rows.append(_metric_row(epoch, step, tasks, losses, weights, lr, combined, phase))
            step += 1
        val = validation_loss(model, cfg, data, tasks, famo_weights(famo), seed)
        if val is not None:
            scheduler.step(val)
            result.val_losses.append(val)
        if run_dir is not None:
            _write_metrics(run_dir / "metrics.csv", result.rows)
            with open(run_dir / "epochs.csv", "a" if epoch else "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                if epoch == 0:
                    w.writerow(["epoch", "phase", "val_loss", "lr"])
                w.writerow([epoch, phase, _fmt(val), _fmt(optimizer.param_groups[0]["lr"])])
            if cfg.train.checkpoint_every_epoch or epoch == cfg.train.epochs - 1:
                save_checkpoint(run_dir / "last", model, {"epoch": epoch, "seed": seed})
            if val is not None and val < best:
                best = val
                save_checkpoint(run_dir / "best", model, {"epoch": epoch, "seed": seed, "val_loss": val})
        log.info("seed %d epoch %d phase %d val %s lr %.2e", seed, epoch, phase, val,
                 optimizer.param_groups[0]["lr"])
    if run_dir is not None:
        save_checkpoint(run_dir / "last", model, {"epoch": cfg.train.epochs - 1, "seed": seed})
        write_activation_counts(run_dir / "experts.csv", enc.moe_layers)
    result.famo = famo
    model.eval()
    return result


def _warm_start(old: FamoState, old_tasks, new_tasks) -> FamoState:
    logits = np.zeros(len(new_tasks))
    for i, t in enumerate(new_tasks):
        if t in old_tasks:
            logits[i] = old.logits[old_tasks.index(t)]
    return FamoState(logits, old.beta, old.floor)


@torch.no_grad()
def validation_loss(model: MultiTaskModel, cfg: RunConfig, data: TrainData, tasks, weights, seed: int):
    """``sum_i p_i * L_i`` over the normal validation images, fixed batches, no expert dropout."""
    if data.val_images is None or len(data.val_images) < 2:
        return None
    model.eval()
    p = cfg.encoder.patch_size
    pool = patchify_batch(data.val_images, p)
    idx = np.arange(len(pool))
    totals = np.zeros(len(tasks))
    count = 0
    for start in range(0, len(idx), cfg.train.batch_size):
        sub = idx[start:start + cfg.train.batch_size]
        batches = build_task_batches(
            tasks, pool[sub], sub, pool, cfg, (seed, _VAL, start),
            None if data.val_aug is None else data.val_aug[sub], None if data.val_gen is None else data.val_gen[sub])
        losses = task_losses(model, tasks, batches).numpy()
        totals += losses * len(sub)
        count += len(sub)
    return float(np.dot(weights, totals / count))


def _metric_row(epoch, step, tasks, losses, weights, lr, combined, phase):
    loss_map = dict(zip(tasks, losses))
    w_map = dict(zip(tasks, weights))
    return ([str(epoch), str(step)] + [_fmt(loss_map.get(t)) for t in ALL_TASKS]
            + [_fmt(w_map.get(t)) for t in ALL_TASKS] + [_fmt(lr), _fmt(combined), str(phase)])


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def _dump_diagnostic(run_dir, epoch, step, tasks, lr, weights, message) -> None:
    info = {"epoch": epoch, "step": step, "tasks": [t.label for t in tasks], "lr": lr,
            "weights": [float(w) for w in weights], "error": message}
    log.error("training aborted: %s", info)
    if run_dir is not None:
        (Path(run_dir) / "diagnostic.json").write_text(json.dumps(info, indent=1) + "\n")
