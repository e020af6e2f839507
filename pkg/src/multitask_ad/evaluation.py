"""Image-level AUROC, per-run evaluation, multi-seed reports and the task ablation harness."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import DatasetManifest, load_manifest_images, read_manifest
from .moe import ALL_TASKS, task_from_label
from .scoring import (TABLES_FILE, ImageScores, ScoringOptions, build_percentile_tables, fit_fusion_weights, fuse,
                      image_anomaly_maps, load_tables, percentiles, save_map, save_tables, score_images,
                      uniform_weights)
from .tasks import MultiTaskModel

log = logging.getLogger(__name__)

CHECKPOINT_DIR = "last"
SCORES_FILE = "scores.csv"


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with mid-ranks: ``P(s+ > s-) + 0.5 P(s+ = s-)``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != y.size:
        raise UndefinedMetricError("AUROC needs both classes and 0/1 labels")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Single run


@dataclass
class RunEvaluation:
    seed: int
    fused: np.ndarray
    scored: ImageScores
    percentiles: np.ndarray
    labels: list[int] | None
    fused_auroc: float | None = None
    task_auroc: dict[str, float] = field(default_factory=dict)


def _validation_scores(model: MultiTaskModel, cfg: RunConfig, opts: ScoringOptions):
    if not cfg.data.val or not Path(cfg.data.val).exists():
        raise FileNotFoundError("percentile tables need a validation manifest (data.val)")
    val = read_manifest(cfg.data.val, "val")
    if not val.records:
        raise ValueError("validation split is empty")
    scored = score_images(model, load_manifest_images(val, cfg.encoder.image_size), opts)
    return scored.raw, val


def ensure_tables(ckpt_dir: Path, model: MultiTaskModel, cfg: RunConfig, opts: ScoringOptions):
    """Load persisted percentile tables and fusion weights, building them from validation if absent."""
    path = Path(ckpt_dir) / TABLES_FILE
    if path.exists():
        tables, weights = load_tables(path)
        if weights is not None:
            return tables, weights
    raw, val = _validation_scores(model, cfg, opts)
    tables = build_percentile_tables(raw)
    enabled = cfg.tasks.enabled_tasks
    weights = uniform_weights(enabled)
    if cfg.scoring.fusion == "fit":
        if val.has_labels() and len(set(val.labels)) == 2:
            weights = fit_fusion_weights(raw, val.labels, tables, enabled, cfg.scoring.fusion_grid_step)
        else:
            log.warning("fusion fit needs labelled validation images with both classes; using uniform weights")
    save_tables(path, tables, weights)
    return tables, weights


def write_scores_csv(path: Path, manifest: DatasetManifest, ev: RunEvaluation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image"] + [f"raw_{t.label}" for t in ALL_TASKS] + [f"pct_{t.label}" for t in ALL_TASKS]
                   + ["fused", "label"])
        for i, rec in enumerate(manifest.records):
            label = "" if ev.labels is None else str(ev.labels[i])
            w.writerow([Path(rec.path).name] + [repr(float(x)) for x in ev.scored.raw[i]]
                       + [repr(float(x)) for x in ev.percentiles[i]] + [repr(float(ev.fused[i])), label])


def evaluate_run(run_dir: str | Path, cfg: RunConfig, test: DatasetManifest, seed: int = 0,
                 maps_dir: str | Path | None = None, model: MultiTaskModel | None = None) -> RunEvaluation:
    """Score every test image with the checkpoint in ``run_dir``; writes ``scores.csv`` there."""
    run_dir = Path(run_dir)
    ckpt = run_dir / CHECKPOINT_DIR
    model = model or load_checkpoint(ckpt)
    opts = ScoringOptions.from_config(cfg)
    tables, weights = ensure_tables(ckpt, model, cfg, opts)
    images = load_manifest_images(test, cfg.encoder.image_size)
    scored = score_images(model, images, opts)
    fused = np.array([fuse(r, tables, weights) for r in scored.raw])
    labels = test.labels if test.has_labels() else None
    ev = RunEvaluation(seed, fused, scored, percentiles(scored.raw, tables), labels)
    if labels is not None and len(set(labels)) == 2:
        ev.fused_auroc = auroc(fused, labels)
        ev.task_auroc = {t.label: auroc(scored.raw[:, int(t)], labels) for t in ALL_TASKS}
    else:
        log.warning("test labels missing or single-class: AUROC skipped")
    write_scores_csv(run_dir / SCORES_FILE, test, ev)
    if maps_dir is not None:
        maps_dir = Path(maps_dir)
        maps_dir.mkdir(parents=True, exist_ok=True)
        amaps = image_anomaly_maps(model, images, opts, scored)
        for rec, img, amap in zip(test.records, images, amaps):
            stem = Path(rec.path).stem
            save_map(maps_dir / f"{stem}.map.png", amap, img, maps_dir / f"{stem}.overlay.png")
    return ev


# ---------------------------------------------------------------------------
# Multi-seed report


@dataclass
class EvalReport:
    fingerprint: str
    seeds: list[int]
    fused: list[float | None]
    tasks: dict[str, list[float | None]]

    @staticmethod
    def _stats(values) -> tuple[float | None, float | None]:
        vals = [v for v in values if v is not None]
        if not vals:
            return None, None
        return float(np.mean(vals)), float(np.std(vals))

    @property
    def mean(self):
        return self._stats(self.fused)[0]

    @property
    def std(self):
        return self._stats(self.fused)[1]

    @classmethod
    def from_runs(cls, fingerprint: str, runs: list[RunEvaluation]) -> "EvalReport":
        return cls(fingerprint, [r.seed for r in runs], [r.fused_auroc for r in runs],
                   {t.label: [r.task_auroc.get(t.label) for r in runs] for t in ALL_TASKS})

    def rows(self) -> list[list[str]]:
        header = ["metric"] + [f"seed_{s}" for s in self.seeds] + ["mean", "std"]
        out = [header]
        for name, vals in [("fused", self.fused)] + [(f"task_{k}", v) for k, v in self.tasks.items()]:
            m, s = self._stats(vals)
            out.append([name] + [_cell(v) for v in vals] + [_cell(m), _cell(s)])
        return out

    def summary(self) -> str:
        m, s = self.mean, self.std
        head = f"config {self.fingerprint}  seeds {','.join(map(str, self.seeds))}"
        if m is None:
            return head + "\nAUROC unavailable (unlabelled test set)"
        return head + f"\nimage-level AUROC {100 * m:.2f} ± {100 * s:.2f}"

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out_dir = Path(out_dir)
        rows = self.rows()
        write_table(out_dir / f"{stem}.csv", out_dir / f"{stem}.txt", rows, self.summary())
        (out_dir / f"{stem}.json").write_text(json.dumps(
            {"fingerprint": self.fingerprint, "seeds": self.seeds, "fused": self.fused, "tasks": self.tasks,
             "mean": self.mean, "std": self.std}, indent=1, sort_keys=True) + "\n")


def _cell(v) -> str:
    return "" if v is None else f"{v:.6f}"


def format_table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))).rstrip()
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(csv_path: Path, txt_path: Path, rows: list[list[str]], title: str = "") -> None:
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    txt_path.write_text((title + "\n\n" if title else "") + format_table(rows))


# ---------------------------------------------------------------------------
# Ablation harness

# rows of task flags (mim, jigsaw, demixup, augcls, gencls)
ABLATION_ROWS = (
    (1, 0, 0, 0, 0),
    (0, 1, 0, 0, 0),
    (0, 0, 1, 0, 0),
    (0, 0, 0, 1, 0),
    (0, 0, 0, 0, 1),
    (1, 1, 0, 0, 0),
    (1, 1, 1, 0, 0),
    (1, 1, 1, 1, 0),
    (1, 1, 1, 1, 1),
)


def parse_ablation_rows(spec) -> list[tuple[int, ...]]:
    """Accepts flag vectors (``[1,0,1,0,0]``), flag strings (``"10100"``) or task-label lists."""
    rows = []
    for item in spec:
        if isinstance(item, str) and set(item) <= {"0", "1"} and len(item) == len(ALL_TASKS):
            flags = tuple(int(c) for c in item)
        elif isinstance(item, (list, tuple)) and all(isinstance(x, (bool, int)) for x in item):
            if len(item) != len(ALL_TASKS):
                raise ValueError(f"ablation row {item!r} needs {len(ALL_TASKS)} flags")
            flags = tuple(int(bool(x)) for x in item)
        elif isinstance(item, (list, tuple)):
            chosen = {task_from_label(x) for x in item}
            flags = tuple(int(t in chosen) for t in ALL_TASKS)
        else:
            raise ValueError(f"cannot parse ablation row {item!r}")
        if not any(flags):
            raise ValueError("ablation row with every task disabled")
        rows.append(flags)
    return rows


def row_config(base: RunConfig, flags) -> RunConfig:
    enabled = [t.label for t, f in zip(ALL_TASKS, flags) if f]
    data = base.model_dump()
    data["tasks"]["enabled"] = enabled
    return RunConfig.model_validate(data)


def ablation_table(rows, results: list[float | None]) -> list[list[str]]:
    out = [[t.label for t in ALL_TASKS] + ["auroc"]]
    for flags, res in zip(rows, results):
        out.append(["x" if f else "-" for f in flags] + [_cell(res)])
    return out
