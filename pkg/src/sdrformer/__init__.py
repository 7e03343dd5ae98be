"""Multi-phase 3D lesion classification with a siamese dual-resolution transformer."""

from .attention3d import AttentionConfig, TransformerBlock3D, build_attention, dense_mhsa
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .drformer import BCIM, DRFormer, DRFormerConfig, DualResFeatures, ResidualBlock3D
from .metrics import MetricsReport, compute_metrics, t_test_independent
from .siamese import APSM, SDRFormer, SDRFormerConfig, adapt_phase_count, apsm
from .trainer import TrainConfig, TrainingDiverged, evaluate, fit, lr_at
from .volforge import (AugmentationConfig, DatasetManifest, MultiPhaseSample, PhaseVolume,
                       generate_synthetic_dataset, read_volume, write_volume)

__version__ = "0.1.0"

__all__ = [
    "APSM", "AttentionConfig", "AugmentationConfig", "BCIM", "Checkpoint", "CheckpointError",
    "DRFormer", "DRFormerConfig", "DatasetManifest", "DualResFeatures", "MetricsReport",
    "MultiPhaseSample", "PhaseVolume", "ResidualBlock3D", "SDRFormer", "SDRFormerConfig",
    "TrainConfig", "TrainingDiverged", "TransformerBlock3D", "adapt_phase_count", "apsm",
    "build_attention", "compute_metrics", "dense_mhsa", "evaluate", "fit",
    "generate_synthetic_dataset", "load_checkpoint", "lr_at", "read_volume", "save_checkpoint",
    "t_test_independent", "write_volume",
]
