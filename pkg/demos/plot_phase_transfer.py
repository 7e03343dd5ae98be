"""
Moving a trained model to a different phase count
=================================================

Train on three phases, adapt the checkpoint to eight and check which tensors
were kept.
"""

import tempfile
from dataclasses import replace
from pathlib import Path

import torch

from sdrformer.attention3d import AttentionConfig
from sdrformer.checkpoint import load_checkpoint
from sdrformer.drformer import DRFormerConfig
from sdrformer.siamese import SDRFormer, SDRFormerConfig, adapt_phase_count
from sdrformer.trainer import TrainConfig, evaluate, fit, prepare
from sdrformer.volforge import DatasetManifest, generate_synthetic_dataset

torch.set_num_threads(1)
work = Path(tempfile.mkdtemp(prefix="sdrf_transfer_"))
backbone = DRFormerConfig([8, 16, 32], [1, 1, 1],
                          [AttentionConfig("gsa", heads=1, grid=(2, 4, 4))] * 3)
cfg = TrainConfig(base_lr=1e-3, epochs=2, warmup_epochs=1, crop=(4, 32, 32), resize=None)

###############################################################################
# Source: a three-phase model.
src_data = DatasetManifest.load(generate_synthetic_dataset(
    work / "three", 60, 3, 2, dims=(4, 32, 32), split_fractions=(0.7, 0.3, 0.0)))
torch.manual_seed(0)
source = fit(SDRFormer(SDRFormerConfig(backbone, 3, 2)), src_data, cfg).best

###############################################################################
# Surgery. The shared backbone is copied; everything sized by the phase count
# is drawn fresh.
target, report = adapt_phase_count(source, 8, seed=0)
print(len(report["copied"]), "copied,", len(report["reinitialized"]), "reinitialized")
for name in report["reinitialized"][:6]:
    print("  new:", name, tuple(target.tensors[name].shape))
same = all(torch.equal(target.tensors[k], v) for k, v in source.tensors.items()
           if k.startswith("backbone."))
print("backbone unchanged:", same)

###############################################################################
# Fine-tune on eight-phase data starting from the adapted weights.
dst_data = DatasetManifest.load(generate_synthetic_dataset(
    work / "eight", 60, 8, 2, dims=(4, 32, 32), split_fractions=(0.7, 0.3, 0.0)))
tune_cfg = replace(cfg, epochs=5)
tuned = fit(target.build_model(), dst_data, tune_cfg).best.build_model()
print(evaluate(tuned, prepare(dst_data.load_samples("val")), tune_cfg).summary())

###############################################################################
# The adapted checkpoint round-trips like any other.
target.save(work / "adapted")
print(load_checkpoint(work / "adapted").config.n_phases, "phases on reload")
