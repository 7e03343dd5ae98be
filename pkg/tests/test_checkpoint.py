import json

import pytest
import torch

from conftest import dual_inputs, tiny_model_config
from sdrformer.checkpoint import Checkpoint, CheckpointError, load_checkpoint
from sdrformer.siamese import SDRFormer


@pytest.fixture
def ckpt():
    torch.manual_seed(0)
    c = Checkpoint.from_model(SDRFormer(tiny_model_config()), {"epoch": 2, "note": "x"})
    c.extra = {"optim.a.exp_avg": torch.arange(6.0).reshape(2, 3)}
    return c


def test_round_trip_is_bit_exact(tmp_path, ckpt):
    ckpt.save(tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.config == ckpt.config
    assert back.meta == ckpt.meta
    assert back.tensors.keys() == ckpt.tensors.keys()
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        assert torch.equal(back.tensors[k], v)
    assert torch.equal(back.extra["optim.a.exp_avg"], ckpt.extra["optim.a.exp_avg"])


def test_rebuilt_model_reproduces_outputs(tmp_path, ckpt):
    ckpt.save(tmp_path / "c")
    a, b = ckpt.build_model().eval(), load_checkpoint(tmp_path / "c").build_model().eval()
    x = dual_inputs()
    with torch.no_grad():
        assert torch.equal(a(*x), b(*x))


def test_manifest_layout(tmp_path, ckpt):
    ckpt.save(tmp_path / "c")
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    entry = manifest["tensors"]["backbone.stem_high.0.weight"]
    assert set(entry) == {"shape", "dtype", "blob", "offset"}
    assert manifest["config"]["n_phases"] == 3


def test_truncated_blob(tmp_path, ckpt):
    d = ckpt.save(tmp_path / "c")
    blob = d / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(d)


def test_wrong_format(tmp_path, ckpt):
    d = ckpt.save(tmp_path / "c")
    raw = json.loads((d / "manifest.json").read_text())
    raw["format"] = "other"
    (d / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(d)


def test_missing_directory(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")
