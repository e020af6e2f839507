import json

import numpy as np
import pytest
import torch

from multitask_ad.checkpoint import BLOB, MANIFEST, CheckpointError, load_checkpoint, save_checkpoint

from conftest import tiny_model


def test_roundtrip_preserves_outputs(tmp_path):
    model = tiny_model()
    model.eval()
    save_checkpoint(tmp_path / "ck", model, {"epoch": 3})
    back = load_checkpoint(tmp_path / "ck")
    x = torch.rand(2, 16, 48)
    with torch.no_grad():
        assert torch.equal(model.demixup_logits(x), back.demixup_logits(x))
    assert json.loads((tmp_path / "ck" / MANIFEST).read_text())["extra"] == {"epoch": 3}


def test_manifest_lists_offsets(tmp_path):
    model = tiny_model()
    save_checkpoint(tmp_path, model)
    man = json.loads((tmp_path / MANIFEST).read_text())
    total = sum(int(np.prod(t["shape"])) for t in man["tensors"])
    assert (tmp_path / BLOB).stat().st_size == 4 * total
    offsets = [t["offset"] for t in man["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_save_is_byte_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", tiny_model(seed=3))
    save_checkpoint(tmp_path / "b", tiny_model(seed=3))
    for name in (MANIFEST, BLOB):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_and_truncated(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
    save_checkpoint(tmp_path, tiny_model())
    blob = (tmp_path / BLOB).read_bytes()
    (tmp_path / BLOB).write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_version_mismatch(tmp_path):
    save_checkpoint(tmp_path, tiny_model())
    man = json.loads((tmp_path / MANIFEST).read_text())
    man["format_version"] = 99
    (tmp_path / MANIFEST).write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
