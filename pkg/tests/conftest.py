import numpy as np
import pytest
import torch

from multitask_ad.backbone import EncoderConfig
from multitask_ad.config import parse_config
from multitask_ad.data import ToyConfig, make_toy_dataset
from multitask_ad.tasks import MultiTaskModel, TaskConfig


def tiny_encoder(**kw) -> EncoderConfig:
    base = dict(depth=1, width=8, heads=2, patch_size=4, image_size=16, num_experts=5, expert_dropout_rate=0.1)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_tasks(**kw) -> TaskConfig:
    base = dict(tiles_per_side=2, decoder_width=8, decoder_depth=1, decoder_heads=2)
    base.update(kw)
    return TaskConfig(**base)


def tiny_model(dtype=torch.float32, seed=0, enc=None, tasks=None) -> MultiTaskModel:
    torch.manual_seed(seed)
    model = MultiTaskModel(enc or tiny_encoder(), tasks or tiny_tasks())
    return model.to(dtype)


def small_run_config(toy_dir, **train):
    tr = dict(epochs=2, phase1_epochs=1, batch_size=8, optimizer="adam")
    tr.update(train)
    return parse_config({
        "encoder": {"depth": 1, "width": 16, "heads": 2, "patch_size": 8, "image_size": 32},
        "tasks": {"tiles_per_side": 2, "decoder_width": 16, "decoder_depth": 1, "decoder_heads": 2},
        "train": tr,
        "data": {"train": str(toy_dir / "train.txt"), "val": str(toy_dir / "val.txt"),
                 "test": str(toy_dir / "test.txt")},
        "seeds": [0],
    })


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    make_toy_dataset(out, ToyConfig(image_size=32, n_train=12, n_val=8, n_test=8), seed=7)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE_CRITERIA = 12
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(number, passed, detail)`` records one acceptance line and returns ``passed``."""
    def record(number: int, passed: bool, detail: str) -> bool:
        _acceptance[number] = (bool(passed), detail)
        print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, ACCEPTANCE_CRITERIA + 1):
        if n in _acceptance:
            ok, detail = _acceptance[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
