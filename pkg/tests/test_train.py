import csv
import json

import numpy as np
import pytest
import torch

from multitask_ad.data import load_manifest_images, patchify_batch, read_manifest
from multitask_ad.famo import FamoState
from multitask_ad.moe import ALL_TASKS, TaskId
from multitask_ad.train import (METRIC_COLUMNS, PHASE1_TASKS, TrainingError, active_tasks, build_task_batches,
                                make_optimizer, make_scheduler, prepare_data, train, train_step, validation_loss)

from conftest import small_run_config


def test_active_tasks_phases():
    assert active_tasks(list(ALL_TASKS), 0, 2) == (1, list(PHASE1_TASKS))
    assert active_tasks(list(ALL_TASKS), 2, 2) == (2, list(ALL_TASKS))
    assert active_tasks([TaskId.AUGCLS], 0, 5) == (2, [TaskId.AUGCLS])
    assert active_tasks([TaskId.MIM, TaskId.GENCLS], 0, 1) == (1, [TaskId.MIM])


def test_plateau_three_triggers(toy_dir):
    cfg = small_run_config(toy_dir, lr=1e-3, optimizer="sgd", patience=0)
    opt = make_optimizer(torch.nn.Linear(2, 2), cfg)
    sched = make_scheduler(opt, cfg)
    sched.step(1.0)  # establishes the best value
    for _ in range(3):
        sched.step(1.0)
    assert opt.param_groups[0]["lr"] == pytest.approx(1.25e-4, abs=1e-18)


def test_plateau_never_below_floor(toy_dir):
    cfg = small_run_config(toy_dir, lr=1e-3, optimizer="sgd", patience=0)
    opt = make_optimizer(torch.nn.Linear(2, 2), cfg)
    sched = make_scheduler(opt, cfg)
    for _ in range(100):
        sched.step(1.0)
    assert opt.param_groups[0]["lr"] == 1e-6


def test_optimizer_kinds(toy_dir):
    sgd = make_optimizer(torch.nn.Linear(2, 2), small_run_config(toy_dir, optimizer="sgd"))
    assert isinstance(sgd, torch.optim.SGD) and sgd.param_groups[0]["momentum"] == 0.9
    assert isinstance(make_optimizer(torch.nn.Linear(2, 2), small_run_config(toy_dir)), torch.optim.Adam)


@pytest.fixture(scope="module")
def small_data(toy_dir):
    cfg = small_run_config(toy_dir)
    return cfg, prepare_data(cfg)


def test_prepare_data_pseudo_pairs(small_data):
    cfg, data = small_data
    assert data.images.shape == (12, 32, 32, 3)
    assert data.aug.shape == data.gen.shape == data.images.shape
    assert data.val_images is not None and len(data.val_images) == 4  # normal validation images only
    assert not np.array_equal(data.aug, data.images)


def test_cls_batches_show_each_sample_once_as_pseudo(small_data):
    cfg, data = small_data
    pool = patchify_batch(data.images, 8)
    idx = np.arange(6)
    b = build_task_batches(list(ALL_TASKS), pool[idx], idx, pool, cfg, (0, 0), data.aug[idx], data.gen[idx])
    aug, gen = b[TaskId.AUGCLS], b[TaskId.GENCLS]
    assert np.array_equal(aug.labels + gen.labels, np.ones(6))
    for i in range(6):
        expect_aug = patchify_batch(data.aug[i:i + 1], 8)[0] if aug.labels[i] else pool[i]
        assert np.array_equal(aug.patches[i], expect_aug)
        expect_gen = patchify_batch(data.gen[i:i + 1], 8)[0] if gen.labels[i] else pool[i]
        assert np.array_equal(gen.patches[i], expect_gen)


def test_task_batches_deterministic(small_data):
    cfg, data = small_data
    pool = patchify_batch(data.images, 8)
    idx = np.array([3, 1, 4])
    a = build_task_batches(list(PHASE1_TASKS), pool[idx], idx, pool, cfg, (5, 9))
    b = build_task_batches(list(PHASE1_TASKS), pool[idx], idx, pool, cfg, (5, 9))
    assert np.array_equal(a[TaskId.MIM].masked, b[TaskId.MIM].masked)
    assert np.array_equal(a[TaskId.JIGSAW].perms, b[TaskId.JIGSAW].perms)
    assert np.array_equal(a[TaskId.DEMIXUP].patches, b[TaskId.DEMIXUP].patches)
    assert all(a[TaskId.DEMIXUP].donors != idx)


def test_phase1_step_leaves_classifiers_untouched(small_data):
    """Gradient audit: phase-1 steps never reach AugCls/GenCls heads or their experts."""
    from multitask_ad.tasks import MultiTaskModel
    cfg, data = small_data
    torch.manual_seed(0)
    model = MultiTaskModel(cfg.encoder.build(), cfg.tasks.build())
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9)
    frozen = {}
    assignment = model.encoder.assignment
    for t in (TaskId.AUGCLS, TaskId.GENCLS):
        for m in model.head_modules(t):
            for n, p in m.named_parameters():
                frozen[f"{t.label}.{n}"] = p
        for blk in model.encoder.blocks:
            for e in assignment[t]:
                for n, p in blk.ffn.experts[e].named_parameters():
                    frozen[f"{t.label}.expert{e}.{id(blk)}.{n}"] = p
    before = {k: p.detach().clone() for k, p in frozen.items()}
    pool = patchify_batch(data.images, 8)
    idx = np.arange(8)
    famo = FamoState.init(3)
    for step in range(3):
        batches = build_task_batches(list(PHASE1_TASKS), pool[idx], idx, pool, cfg, (0, step))
        train_step(model, opt, famo, list(PHASE1_TASKS), batches, debug=True)
        for k, p in frozen.items():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, k
    for k, p in frozen.items():
        assert torch.equal(p.detach(), before[k]), k


def test_train_step_updates_famo(small_data):
    from multitask_ad.tasks import MultiTaskModel
    cfg, data = small_data
    torch.manual_seed(0)
    model = MultiTaskModel(cfg.encoder.build(), cfg.tasks.build())
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    pool = patchify_batch(data.images, 8)
    idx = np.arange(8)
    famo = FamoState.init(3, beta=0.5)
    batches = build_task_batches(list(PHASE1_TASKS), pool[idx], idx, pool, cfg, (0, 0))
    before, combined = train_step(model, opt, famo, list(PHASE1_TASKS), batches, grad_clip=1.0)
    assert before.shape == (3,) and np.isfinite(combined)
    assert famo.steps == 1 and not np.allclose(famo.logits, 0)
    assert abs(famo.weights.sum() - 1) < 1e-12


def test_non_finite_loss_aborts_with_diagnostic(toy_dir, tmp_path):
    cfg = small_run_config(toy_dir)
    data = prepare_data(cfg)
    data.images = data.images.copy()
    data.images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        train(cfg, 0, tmp_path / "run", data)
    info = json.loads((tmp_path / "run" / "diagnostic.json").read_text())
    assert {"epoch", "step", "tasks", "lr", "weights"} <= set(info)


@pytest.fixture(scope="module")
def trained_twice(toy_dir, tmp_path_factory):
    cfg = small_run_config(toy_dir, epochs=3, phase1_epochs=1)
    root = tmp_path_factory.mktemp("runs")
    data = prepare_data(cfg)
    a = train(cfg, 0, root / "a", data)
    b = train(cfg, 0, root / "b", data)
    return cfg, root, a, b


def test_train_outputs(trained_twice):
    cfg, root, a, _ = trained_twice
    run = root / "a"
    for name in ("config.json", "metrics.csv", "epochs.csv", "experts.csv", "last/model.json", "best/model.json"):
        assert (run / name).exists(), name
    rows = list(csv.reader(open(run / "metrics.csv")))
    assert rows[0] == METRIC_COLUMNS
    assert len(rows) - 1 == 3 * 2  # 12 images, batch 8 -> 2 steps per epoch
    assert len(a.val_losses) == 3


def test_phase_boundary_reinitializes_famo(trained_twice):
    _, root, _, _ = trained_twice
    rows = list(csv.DictReader(open(root / "a" / "metrics.csv")))
    phase1 = [r for r in rows if r["phase"] == "1"]
    phase2 = [r for r in rows if r["phase"] == "2"]
    assert phase1 and phase2
    assert all(r["loss_augcls"] == "" and r["weight_gencls"] == "" for r in phase1)
    assert float(phase1[0]["weight_mim"]) == pytest.approx(1 / 3)
    assert all(float(phase2[0][f"weight_{t.label}"]) == pytest.approx(0.2) for t in ALL_TASKS)


def test_training_is_deterministic(trained_twice):
    _, root, _, _ = trained_twice
    for name in ("metrics.csv", "epochs.csv", "experts.csv", "last/model.bin"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes(), name


def test_validation_loss_is_weighted_sum(trained_twice, toy_dir):
    cfg, _, a, _ = trained_twice
    data = prepare_data(cfg)
    tasks = list(PHASE1_TASKS)
    single = [validation_loss(a.model, cfg, data, tasks, np.eye(3)[i], 0) for i in range(3)]
    w = np.array([0.2, 0.5, 0.3])
    assert validation_loss(a.model, cfg, data, tasks, w, 0) == pytest.approx(float(np.dot(w, single)), rel=1e-6)


def test_train_without_validation(toy_dir, tmp_path):
    cfg = small_run_config(toy_dir, epochs=2, phase1_epochs=1)
    train_manifest = read_manifest(cfg.data.train, "train")
    data = prepare_data(cfg.model_copy(update={"data": cfg.data.model_copy(update={"val": None})}))
    assert data.val_images is None
    res = train(cfg, 1, tmp_path / "nv", data)
    assert res.val_losses == [] and (tmp_path / "nv" / "last" / "model.json").exists()
    assert len(load_manifest_images(train_manifest, 32)) == 12


def test_input_stats_taken_from_training_images(trained_twice):
    cfg, _, a, _ = trained_twice
    data = prepare_data(cfg)
    enc = a.model.encoder
    assert enc.pixel_mean.item() == pytest.approx(data.images.mean(dtype=np.float64), rel=1e-6)
    assert enc.pixel_std.item() == pytest.approx(data.images.std(dtype=np.float64), rel=1e-6)
