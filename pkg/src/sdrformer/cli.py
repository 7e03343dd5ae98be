"""Command line for the multi-phase classifier: synth, train, eval, ablate, transfer,
profile, gradcam, coeffs, roc.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .checkpoint import Checkpoint, load_checkpoint
from .metrics import compute_metrics
from .siamese import SDRFormer, SDRFormerConfig, adapt_phase_count
from .trainer import TrainConfig, eval_view, evaluate, fit, prepare, to_tensors
from .volforge import AugmentationConfig, DatasetManifest, generate_synthetic_dataset

log = logging.getLogger("sdrformer")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: SDRFormerConfig = field(default_factory=SDRFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    out_dir: str | None = None
    seed: int | None = None


def _strict(cls, raw: dict, where: str) -> dict:
    unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return raw


def parse_run_config(raw: dict) -> RunConfig:
    _strict(RunConfig, raw, "run config")
    model = SDRFormerConfig.from_dict(raw.get("model", {}))
    train_raw = dict(_strict(TrainConfig, raw.get("train", {}), "train"))
    if "augmentation" in train_raw:
        train_raw["augmentation"] = AugmentationConfig(
            **_strict(AugmentationConfig, train_raw["augmentation"], "train.augmentation"))
    return RunConfig(model, TrainConfig(**train_raw), raw.get("data"), raw.get("out_dir"),
                     raw.get("seed"))


def load_run_config(path: str | os.PathLike) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
        return parse_run_config(raw)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc


def resolve_seed(flag: int | None, config_seed: int | None = None) -> int:
    if flag is not None:
        return flag
    if config_seed is not None:
        return int(config_seed)
    return int(os.environ.get("SDRF_SEED", 0))


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected D,H,W positive integers, got {text!r}")
    return tuple(parts)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o).__name__)


def _report_payload(report) -> dict:
    d = report.to_dict()
    d["labels"] = report.labels.tolist()
    d["scores"] = report.scores.tolist()
    return d


def _subset(manifest: DatasetManifest, phases: str | None) -> list[str] | None:
    if phases is None:
        return None
    names = [p for p in phases.split(",") if p]
    bad = [n for n in names if n not in manifest.phase_names]
    if bad or not names:
        raise UsageError(f"phases {bad or phases!r} not in manifest phase_names {manifest.phase_names}")
    return names


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load manifest {path}: {exc}") from exc


def _splits(manifest, phases=None):
    return {s: manifest.load_samples(s, phases) for s in ("train", "val", "test")}


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    path = generate_synthetic_dataset(
        args.out, n_samples=args.n, n_phases=args.phases, n_classes=args.classes, dims=args.dims,
        contrast=args.contrast, noise_sd=args.noise, seed=resolve_seed(args.seed),
        split_fractions=tuple(args.splits), phase_jitter=args.jitter,
        signal_phases=[int(p) for p in args.signal_phases.split(",")] if args.signal_phases else None)
    print(path)
    return 0


def _train_run(model_cfg: SDRFormerConfig, train_cfg: TrainConfig, splits, out: Path,
               init: Checkpoint | None = None) -> dict:
    torch.manual_seed(train_cfg.seed)
    model = init.build_model() if init is not None else SDRFormer(model_cfg)
    result = fit(model, splits, train_cfg, out_dir=out)
    best = result.best.build_model()
    eval_split = "test" if splits.get("test") else "val"
    report = evaluate(best, prepare(splits[eval_split], train_cfg.resize), train_cfg)
    payload = {"split": eval_split, **_report_payload(report)}
    _write_json(out / "report.json", payload)
    analysis.roc_export(report, out / "roc.csv")
    return payload


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    manifest = _load_manifest(args.data or rc.data)
    if rc.model.n_phases != manifest.n_phases:
        raise UsageError(f"config n_phases={rc.model.n_phases} but manifest has "
                         f"{manifest.n_phases} phases {manifest.phase_names}")
    if rc.model.num_classes != manifest.n_classes:
        raise UsageError(f"config num_classes={rc.model.num_classes} but manifest has "
                         f"{manifest.n_classes} classes")
    rc.train.seed = resolve_seed(args.seed, rc.seed if rc.seed is not None else rc.train.seed)
    out = Path(args.out or rc.out_dir or "run")
    payload = _train_run(rc.model, rc.train, _splits(manifest), out)
    print(json.dumps({k: payload[k] for k in ("split", "acc", "auc", "f1", "kappa")}))
    return 0


def _train_cfg_from_ckpt(ckpt: Checkpoint) -> TrainConfig:
    raw = dict(ckpt.meta.get("train", {}))
    if not raw:
        return TrainConfig()
    raw["augmentation"] = AugmentationConfig(**raw.get("augmentation", {}))
    return TrainConfig(**raw)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.data)
    phases = _subset(manifest, args.phases)
    n = len(phases) if phases else manifest.n_phases
    if n != ckpt.config.n_phases:
        raise UsageError(f"checkpoint expects {ckpt.config.n_phases} phases, got {n}; "
                         "phase subsets need a model trained on that subset (see `ablate`)")
    tcfg = _train_cfg_from_ckpt(ckpt)
    samples = manifest.load_samples(args.split, phases)
    report = evaluate(ckpt.build_model(), prepare(samples, tcfg.resize), tcfg)
    payload = {"split": args.split, "phases": phases or manifest.phase_names,
               **_report_payload(report)}
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps({k: payload[k] for k in ("split", "acc", "auc", "f1", "kappa", "notes")}))
    return 0


def _ablation_job(job: dict) -> dict:
    torch.set_num_threads(1)
    model_cfg, train_cfg = job["model"], job["train"]
    manifest = DatasetManifest.load(job["data"])
    splits = _splits(manifest, job["phases"])
    out = Path(job["out"])
    payload = _train_run(model_cfg, train_cfg, splits, out)
    prof = analysis.profile(model_cfg, train_cfg.crop)
    summary = {"name": job["name"], "phases": job["phases"] or manifest.phase_names,
               "bcim": model_cfg.bcim_enabled, "apsm": model_cfg.apsm_enabled,
               "params": prof.params, "flops_g": prof.flops_g,
               **{k: payload[k] for k in ("split", "acc", "auc", "f1", "kappa", "notes")}}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_ablate(args) -> int:
    rc = load_run_config(args.config)
    manifest = _load_manifest(args.data or rc.data)
    rc.train.seed = resolve_seed(args.seed, rc.seed if rc.seed is not None else rc.train.seed)
    subsets = [_subset(manifest, p) for p in args.phases] if args.phases else [None]
    toggles = ([(False, False), (True, False), (False, True), (True, True)] if args.grid
               else [(not args.no_bcim, not args.no_apsm)])
    out = Path(args.out or rc.out_dir or "ablation")
    jobs = []
    for phases in subsets:
        for bcim, apsm in toggles:
            cfg = copy.deepcopy(rc.model)
            cfg.n_phases = len(phases) if phases else manifest.n_phases
            cfg.num_classes = manifest.n_classes
            cfg.bcim_enabled, cfg.apsm_enabled = bcim, apsm
            name = "+".join(phases or manifest.phase_names) + f"_bcim{int(bcim)}_apsm{int(apsm)}"
            jobs.append({"name": name, "model": cfg, "train": rc.train, "phases": phases,
                         "data": str(Path(args.data or rc.data)), "out": str(out / name)})
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    _write_json(out / "ablation.json", results)
    for r in results:
        print(json.dumps({k: r[k] for k in ("name", "acc", "params", "notes")}))
    return 0


def cmd_transfer(args) -> int:
    src = load_checkpoint(getattr(args, "from"))
    rc = load_run_config(args.config)
    manifest = _load_manifest(args.data or rc.data)
    if args.phases != manifest.n_phases:
        raise UsageError(f"--phases {args.phases} but manifest has {manifest.n_phases} phases")
    adapted, report = adapt_phase_count(src, args.phases, num_classes=manifest.n_classes,
                                        seed=resolve_seed(args.seed, rc.seed))
    out = Path(args.out or rc.out_dir or "transfer")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "surgery_report.json", report)
    adapted.save(out / "initial")
    rc.train.seed = resolve_seed(args.seed, rc.seed if rc.seed is not None else rc.train.seed)
    payload = _train_run(adapted.config, rc.train, _splits(manifest), out, init=adapted)
    print(json.dumps({"reinitialized": len(report["reinitialized"]),
                      "copied": len(report["copied"]),
                      **{k: payload[k] for k in ("split", "acc", "auc", "f1", "kappa")}}))
    return 0


def cmd_profile(args) -> int:
    cfg = load_run_config(args.config).model if args.config else SDRFormerConfig()
    if args.phases is not None:
        cfg.n_phases = args.phases
    rep = analysis.profile(cfg, args.dims)
    payload = {**rep.to_dict(), "overhead": analysis.overhead_table(cfg, args.dims)}
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps({"flops_g": rep.flops_g, "params_m": rep.params_m,
                      "overhead": {k: {"flops": v["flops_overhead"], "params": v["params_overhead"]}
                                   for k, v in payload["overhead"].items()}}))
    return 0


def _single_sample(manifest, sample_id, ckpt):
    entries = [e for e in manifest.samples if e["sample_id"] == sample_id]
    if not entries:
        raise UsageError(f"sample {sample_id!r} not in manifest")
    tcfg = _train_cfg_from_ckpt(ckpt)
    samples = [s for s in manifest.load_samples(entries[0]["split"]) if s.sample_id == sample_id]
    view = eval_view(prepare(samples, tcfg.resize)[0], tcfg)
    high, low, _ = to_tensors([view])
    return view, high, low


def cmd_gradcam(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.data)
    _, high, low = _single_sample(manifest, args.sample, ckpt)
    try:
        maps = analysis.gradcam3d(ckpt.build_model(), high, low, args.target, args.stream,
                                  args.stage)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for sal, name in zip(maps, manifest.phase_names):
        path = out / f"{args.sample}_{name}_{sal.stream}_stage{sal.stage}.vvol"
        analysis.save_saliency(path, sal)
        files.append(str(path))
    _write_json(out / f"{args.sample}_gradcam.json",
                {"target_class": maps[0].target_class, "stream": args.stream,
                 "stage": maps[0].stage, "files": files})
    print("\n".join(files))
    return 0


def cmd_coeffs(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.data)
    model = ckpt.build_model()
    if args.sample:
        view, high, low = _single_sample(manifest, args.sample, ckpt)
        ids = [view.sample_id]
    else:
        tcfg = _train_cfg_from_ckpt(ckpt)
        views = [eval_view(s, tcfg) for s in prepare(manifest.load_samples(args.split), tcfg.resize)]
        high, low, _ = to_tensors(views)
        ids = [v.sample_id for v in views]
    payload = analysis.export_phase_coefficients(model, high, low, args.out, ids,
                                                 manifest.phase_names, render=not args.no_render)
    if not payload["applicable"]:
        print(payload["reason"])
    else:
        print(Path(args.out) / "coefficients.json")
    return 0


def cmd_roc(args) -> int:
    if args.report:
        raw = json.loads(Path(args.report).read_text())
        if "scores" not in raw or "labels" not in raw:
            raise UsageError(f"{args.report} carries no scores")
        report = compute_metrics(raw["labels"], raw["scores"])
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("roc needs --report or both --checkpoint and --data")
        ckpt = load_checkpoint(args.checkpoint)
        tcfg = _train_cfg_from_ckpt(ckpt)
        manifest = _load_manifest(args.data)
        report = evaluate(ckpt.build_model(), prepare(manifest.load_samples(args.split),
                                                      tcfg.resize), tcfg)
    print(analysis.roc_export(report, args.out))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdrformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-phase dataset")
    s.add_argument("--n", type=_positive, required=True)
    s.add_argument("--phases", type=_positive, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--dims", type=_triple, default=(6, 36, 36))
    s.add_argument("--contrast", type=float, default=0.8)
    s.add_argument("--noise", type=float, default=0.3)
    s.add_argument("--jitter", type=float, default=0.0, help="per-sample lesion intensity sd")
    s.add_argument("--signal-phases", default=None, help="comma-separated phase indices")
    s.add_argument("--splits", type=float, nargs=3, default=(0.8, 0.2, 0.0),
                   metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--phases", default=None, help="comma-separated phase names")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate phase-subset / module ablations")
    a.add_argument("--config", required=True)
    a.add_argument("--data", default=None)
    a.add_argument("--phases", action="append", default=None,
                   help="comma-separated phase subset; repeat for several subsets")
    a.add_argument("--no-bcim", action="store_true")
    a.add_argument("--no-apsm", action="store_true")
    a.add_argument("--grid", action="store_true", help="run Baseline / w BCIM / w APSM / full")
    a.add_argument("--jobs", type=_positive, default=1)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    tr = sub.add_parser("transfer", help="adapt a checkpoint to a new phase count and fine-tune")
    tr.add_argument("--from", required=True, metavar="CHECKPOINT")
    tr.add_argument("--phases", type=_positive, required=True)
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--out", default=None)
    tr.set_defaults(func=cmd_transfer)

    pr = sub.add_parser("profile", help="FLOPs / parameter report with module overheads")
    pr.add_argument("--config", default=None)
    pr.add_argument("--dims", type=_triple, default=(14, 112, 112))
    pr.add_argument("--phases", type=_positive, default=None)
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_profile)

    g = sub.add_parser("gradcam", help="3D Grad-CAM per phase for one sample")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--sample", required=True)
    g.add_argument("--stream", default="high")
    g.add_argument("--stage", type=int, default=None)
    g.add_argument("--target", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gradcam)

    c = sub.add_parser("coeffs", help="export APSM phase coefficients")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--sample", default=None)
    c.add_argument("--split", default="test", choices=("train", "val", "test"))
    c.add_argument("--no-render", action="store_true")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_coeffs)

    r = sub.add_parser("roc", help="export ROC points as CSV")
    r.add_argument("--report", default=None, help="report.json written by train/eval")
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--data", default=None)
    r.add_argument("--split", default="test", choices=("train", "val", "test"))
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sdrformer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - scriptable exit code
        log.debug("failure", exc_info=True)
        print(f"sdrformer {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
