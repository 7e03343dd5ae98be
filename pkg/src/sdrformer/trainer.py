"""Training loop, warmup + cosine learning-rate schedule and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint
from .metrics import MetricsReport, compute_metrics
from .siamese import SDRFormer
from .volforge import (AugmentationConfig, DatasetManifest, MultiPhaseSample, augment_sample,
                       crop_sample, low_resolution, normalize_sample, resize_sample)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 200
    warmup_epochs: int = 5
    batch_size: int = 8
    eval_batch_size: int = 16
    seed: int = 0
    crop: tuple[int, int, int] = (14, 112, 112)
    resize: tuple[int, int, int] | None = (16, 128, 128)
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        self.crop = tuple(int(c) for c in self.crop)
        if self.resize is not None:
            self.resize = tuple(int(c) for c in self.resize)
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then cosine annealing to 0 at `epochs`.

    `epoch` may be fractional (epoch + step / steps_per_epoch).
    """
    e, w, total = float(epoch), cfg.warmup_epochs, cfg.epochs
    if not 0.0 <= e < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if e < w:
        return cfg.base_lr * e / w
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (e - w) / (total - w)))


def _seed_for(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def prepare(samples: Sequence[MultiPhaseSample], resize=None) -> list[MultiPhaseSample]:
    """Resize (if requested) and z-score every phase, once, before any cropping."""
    out = []
    for s in samples:
        if resize is not None and s.shape != tuple(resize):
            s = resize_sample(s, resize)
        out.append(normalize_sample(s))
    return out


def to_tensors(samples: Sequence[MultiPhaseSample]):
    high = torch.from_numpy(np.stack([s.stack() for s in samples])[:, :, None])
    low = torch.from_numpy(low_resolution(high.numpy()).astype(np.float32))
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return high, low, labels


def training_view(s: MultiPhaseSample, cfg: TrainConfig, seed: int) -> MultiPhaseSample:
    s = crop_sample(s, cfg.crop, "random", seed=_seed_for(seed, 0))
    if cfg.augment:
        s = augment_sample(s, cfg.augmentation, seed=_seed_for(seed, 1))
    return s


def eval_view(s: MultiPhaseSample, cfg: TrainConfig) -> MultiPhaseSample:
    return crop_sample(s, cfg.crop, "center")


@torch.no_grad()
def predict(model: SDRFormer, samples: Sequence[MultiPhaseSample], cfg: TrainConfig) -> np.ndarray:
    was_training = model.training
    model.eval()
    probs = []
    for i in range(0, len(samples), cfg.eval_batch_size):
        chunk = [eval_view(s, cfg) for s in samples[i:i + cfg.eval_batch_size]]
        high, low, _ = to_tensors(chunk)
        probs.append(model(high, low).softmax(dim=1).double().numpy())
    model.train(was_training)
    return np.concatenate(probs)


def evaluate(model: SDRFormer, samples: Sequence[MultiPhaseSample], cfg: TrainConfig,
             prepared: bool = True) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if not prepared:
        samples = prepare(samples, cfg.resize)
    scores = predict(model, samples, cfg)
    report = compute_metrics([s.label for s in samples], scores, model.cfg.num_classes)
    if model.cfg.n_phases == 1:
        report.notes.append("APSM bypassed (single-phase input)")
    return report


def _better(a: MetricsReport, b: MetricsReport | None) -> bool:
    if b is None:
        return True
    if a.acc != b.acc:
        return a.acc > b.acc
    return (a.auc or 0.0) > (b.auc or 0.0)


def _optimizer_tensors(model, opt) -> dict[str, torch.Tensor]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in opt.state.items():
        n = names[id(p)]
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"optim.{n}.{key}"] = st[key].detach().clone()
        out[f"optim.{n}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
    return out


def _restore_optimizer(model, opt, extra: dict[str, torch.Tensor]) -> None:
    for n, p in model.named_parameters():
        if f"optim.{n}.step" not in extra:
            continue
        opt.state[p] = {"step": extra[f"optim.{n}.step"].reshape(()).clone(),
                        "exp_avg": extra[f"optim.{n}.exp_avg"].clone(),
                        "exp_avg_sq": extra[f"optim.{n}.exp_avg_sq"].clone()}


@dataclass
class FitResult:
    best: Checkpoint
    log: list[dict]
    best_report: MetricsReport
    model: SDRFormer


def split_data(data, phases: Sequence[str] | None = None) -> dict[str, list[MultiPhaseSample]]:
    if isinstance(data, DatasetManifest):
        return {s: data.load_samples(s, phases) for s in ("train", "val", "test")}
    return {k: list(v) for k, v in data.items()}


def fit(model: SDRFormer, data, cfg: TrainConfig, out_dir: str | Path | None = None,
        resume_from: str | Path | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with AdamW and keep the best-validation checkpoint.

    `data` is a DatasetManifest or a mapping with "train" and "val" sample lists.
    Deterministic for a fixed seed on fixed hardware: data order and augmentation
    draws are pure functions of (seed, epoch, sample index).
    `on_epoch` gets each epoch record; a truthy return stops training early.
    """
    splits = split_data(data)
    train = prepare(splits["train"], cfg.resize)
    val = prepare(splits["val"], cfg.resize)
    if not train or not val:
        raise ValueError("fit needs non-empty train and val splits")
    for s in train + val:
        if s.n_phases != model.cfg.n_phases:
            raise ValueError(f"sample {s.sample_id} has {s.n_phases} phases, model expects "
                             f"{model.cfg.n_phases}")
    val_views = [eval_view(s, cfg) for s in val]

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    start_epoch, history, best, best_report = 0, [], None, None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        last = load_checkpoint(resume_from)
        model.load_state_dict(last.tensors)
        _restore_optimizer(model, opt, last.extra)
        start_epoch = int(last.meta["epoch"]) + 1
        history = list(last.meta.get("history", []))
        best_dir = Path(resume_from).parent / "best"
        if best_dir.exists():
            best = load_checkpoint(best_dir)
            best_report = _report_from_meta(best.meta)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        model.train()
        order = np.random.default_rng(_seed_for(cfg.seed, epoch)).permutation(len(train))
        losses = []
        for step in range(steps_per_epoch):
            idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            batch = [training_view(train[i], cfg, _seed_for(cfg.seed, epoch, i)) for i in idx]
            high, low, labels = to_tensors(batch)
            lr = lr_at(epoch + step / steps_per_epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = F.cross_entropy(model(high, low), labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch} step {step} "
                                       f"(lr={lr:.3g}); check learning rate and input scaling")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())

        report = evaluate(model, val_views, cfg)  # center crop of a crop-sized view is a no-op
        record = {"epoch": epoch, "lr": lr_at(epoch, cfg), "train_loss": float(np.mean(losses)),
                  "steps": steps_per_epoch, "val": report.summary(),
                  "seconds": round(time.time() - t0, 3)}
        history.append(record)
        log.info("epoch %d loss %.4f val acc %.4f", epoch, record["train_loss"], report.acc)
        if _better(report, best_report):
            best_report = report
            best = Checkpoint.from_model(model, {"epoch": epoch, "val": report.summary(),
                                                 "train": cfg.to_dict()})
            if out is not None:
                best.save(out / "best")
        if out is not None:
            last = Checkpoint.from_model(model, {"epoch": epoch, "history": history,
                                                 "train": cfg.to_dict()})
            last.extra = _optimizer_tensors(model, opt)
            last.save(out / "last")
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if on_epoch is not None and on_epoch(record):
            break
    return FitResult(best, history, best_report, model)


def _report_from_meta(meta: dict) -> MetricsReport:
    v = meta.get("val", {})
    return MetricsReport(acc=v.get("acc", 0.0), f1=v.get("f1", 0.0), kappa=v.get("kappa", 0.0),
                         auc=v.get("auc"), confusion=np.zeros((1, 1), dtype=np.int64),
                         per_class=[])
