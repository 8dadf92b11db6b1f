"""Command-line surface tying the phases into reproducible runs.

Verbs: synth-data, train-teacher, moc (compress the teacher into a
student), train-prompts, bia (adapt the student to unlabeled real images),
eval, bench, dehaze. Exit codes: 0 success, 2 input error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import torch
import torch.nn.functional as F

from . import config as cfgmod
from . import data as datamod
from .errors import InputError, NumericError
from .guidance import ImageEmbeddingBackend, PromptPair, train_prompts
from .losses import LossWeights
from .metrics import bench_efficiency, evaluate_model
from .models import (
    DehazeNet,
    load_checkpoint,
    save_checkpoint,
    student_config,
    teacher_config,
)
from .training import TrainConfig, run_bia, run_moc, train_teacher

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dehazekit",
        description="Compact dehazing: compress a teacher into a student, "
        "then adapt it to unlabeled real images.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic or simulated-real dataset")
    _add_common(p)
    p.add_argument("--kind", choices=("paired", "real", "light-haze"), default="paired",
                   help="paired synthetic domain, simulated real domain, or "
                        "mildly-hazed images for prompt-classifier coverage")
    p.add_argument("--n", type=int, default=None, help="number of images/pairs")
    p.add_argument("--clean-dir", type=Path, default=None,
                   help="optional directory of clean source images")

    p = sub.add_parser("train-teacher", help="naive end-to-end supervised training")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="paired dataset directory")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("moc", help="compress the teacher into a student "
                                   "(distillation with feature alignment)")
    _add_common(p)
    p.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
    p.add_argument("--data", type=Path, required=True, help="paired dataset directory")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-prompts", help="fit the haze/clear prompt classifier")
    _add_common(p)
    p.add_argument("--hazy", type=Path, required=True, nargs="+",
                   help="dataset directories providing hazy images (paired or "
                        "unlabeled); pass several to cover haze severities")
    p.add_argument("--clear", type=Path, required=True,
                   help="paired dataset directory providing clean images")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("bia", help="adapt the student to unlabeled real images "
                                   "(EMA-tracked bilevel updates)")
    _add_common(p)
    p.add_argument("--student", type=Path, required=True, help="student checkpoint")
    p.add_argument("--real", type=Path, required=True, help="real dataset directory")
    p.add_argument("--prompts", type=Path, required=True, help="prompt pair json")
    p.add_argument("--backend", type=Path, required=True, help="backend checkpoint")
    p.add_argument("--mode", choices=("full", "lower-only", "upper-only"), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a model over a dataset")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--no-ground-truth", action="store_true",
                   help="treat the dataset as unlabeled")

    p = sub.add_parser("bench", help="benchmark parameters, FLOPs and latency")
    _add_common(p)
    p.add_argument("--model", type=Path, default=None,
                   help="checkpoint to benchmark (default: both default configs)")
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])

    p = sub.add_parser("dehaze", help="run a model on a single image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    return parser


def _resolved(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfgmod.resolve_config(getattr(args, "config", None), overrides)


def _load_any_dataset(path: Path):
    try:
        return datamod.PairedDataset.load(path)
    except InputError:
        return datamod.RealDataset.load(path)


def _cmd_synth_data(args) -> int:
    cfg = _resolved(args)
    n = args.n if args.n is not None else int(cfg["data.n"])
    size = int(cfg["data.size"])
    seed = int(cfg["seed"])
    if args.kind == "paired":
        ds = datamod.build_synthetic_dataset(args.clean_dir, n=n, seed=seed, size=size)
    elif args.kind == "light-haze":
        ds = datamod.build_light_haze_dataset(n=n, seed=seed, size=size)
    else:
        ds = datamod.build_real_dataset(n=n, seed=seed, size=size)
    ds.save(args.out)
    cfgmod.write_manifest(args.out, "synth-data", cfg,
                          {"kind": args.kind, "n": n, "size": size})
    print(f"wrote {n} {args.kind} images to {args.out}")
    return EXIT_OK


def _train_cfg(cfg: dict, section: str, steps_override: int | None) -> TrainConfig:
    """Map the flat config onto the phase scalars one verb needs."""
    weights = LossWeights(
        l1_weight=float(cfg["loss.l1_weight"]),
        ssim_weight=float(cfg["loss.ssim_weight"]),
        perceptual_weight=float(cfg["loss.perceptual_weight"]),
    )
    steps_key = {"teacher": "teacher.steps", "moc": "moc.n_steps", "bia": "bia.t_steps"}
    steps = steps_override if steps_override is not None else int(cfg[steps_key[section]])
    lr = float(cfg[f"{section}.lr"])
    lr_end = min(float(cfg[f"{section}.lr_end"]), lr)
    return TrainConfig(
        eta_moc=lr if section != "bia" else float(cfg["moc.lr"]),
        eta_bia=lr if section == "bia" else float(cfg["bia.lr"]),
        lr_end=lr_end,
        alpha=float(cfg["bia.alpha"]),
        n_moc=steps if section != "bia" else int(cfg["moc.n_steps"]),
        t_bia=steps if section == "bia" else int(cfg["bia.t_steps"]),
        batch_size=int(cfg[f"{section}.batch_size"]),
        seed=int(cfg["seed"]),
        augment=bool(cfg["moc.augment"]),
        loss_weights=weights,
    )


def _cmd_train_teacher(args) -> int:
    cfg = _resolved(args)
    tc = _train_cfg(cfg, "teacher", args.steps)
    data = datamod.PairedDataset.load(args.data)
    model = DehazeNet(teacher_config(), role="teacher", seed=tc.seed)
    train_teacher(model, data, tc, log_path=args.out / "train_log.csv",
                  ckpt_dir=args.out / "teacher")
    cfgmod.write_manifest(args.out, "train-teacher", cfg,
                          {"checkpoint": "teacher", "steps": tc.n_moc})
    print(f"teacher trained for {tc.n_moc} steps -> {args.out / 'teacher'}")
    return EXIT_OK


def _cmd_moc(args) -> int:
    cfg = _resolved(args)
    tc = _train_cfg(cfg, "moc", args.steps)
    data = datamod.PairedDataset.load(args.data)
    teacher, _ = load_checkpoint(args.teacher)
    student = DehazeNet(student_config(), role="student-syn", seed=tc.seed)
    run_moc(teacher, student, data, tc, log_path=args.out / "moc_log.csv",
            ckpt_dir=args.out / "student_moc")
    cfgmod.write_manifest(args.out, "moc", cfg,
                          {"checkpoint": "student_moc", "steps": tc.n_moc})
    print(f"student compressed over {tc.n_moc} steps -> {args.out / 'student_moc'}")
    return EXIT_OK


def _cmd_train_prompts(args) -> int:
    cfg = _resolved(args)
    seed = int(cfg["seed"])
    steps = args.steps if args.steps is not None else int(cfg["prompts.steps"])
    hazy_images: list = []
    for path in args.hazy:
        ds = _load_any_dataset(path)
        hazy_images.extend(ds.images if hasattr(ds, "images") else ds.hazy)
    clear_ds = datamod.PairedDataset.load(args.clear)
    backend = ImageEmbeddingBackend(dim=int(cfg["prompts.dim"]), seed=seed)
    prompts = train_prompts(
        hazy_images, clear_ds.clean, backend,
        steps=steps, lr=float(cfg["prompts.lr"]), seed=seed,
        batch_size=int(cfg["prompts.batch_size"]),
        temperature=float(cfg["prompts.temperature"]),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    prompts.save(args.out / "prompts.json")
    backend.save(args.out / "backend")
    cfgmod.write_manifest(args.out, "train-prompts", cfg,
                          {"holdout_accuracy": prompts.holdout_accuracy, "steps": steps})
    print(f"prompts trained, holdout accuracy {prompts.holdout_accuracy:.3f} -> {args.out}")
    return EXIT_OK


def _cmd_bia(args) -> int:
    cfg = _resolved(args)
    tc = _train_cfg(cfg, "bia", args.steps)
    if args.alpha is not None:
        tc = replace(tc, alpha=args.alpha)
    mode = args.mode if args.mode is not None else str(cfg["bia.mode"])
    student, _ = load_checkpoint(args.student)
    real = datamod.RealDataset.load(args.real)
    prompts = PromptPair.load(args.prompts)
    backend = ImageEmbeddingBackend.load(args.backend)
    run_bia(student, real, prompts, backend, tc, mode=mode,
            log_path=args.out / "bia_log.csv", ckpt_dir=args.out / "student_bia")
    cfgmod.write_manifest(args.out, "bia", cfg,
                          {"checkpoint": "student_bia", "mode": mode, "steps": tc.t_bia})
    print(f"adaptation ({mode}) over {tc.t_bia} steps -> {args.out / 'student_bia'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolved(args)
    model, _ = load_checkpoint(args.model)
    with_gt = not args.no_ground_truth
    dataset = datamod.PairedDataset.load(args.data) if with_gt \
        else _load_any_dataset(args.data)
    report = evaluate_model(model, dataset, with_ground_truth=with_gt, out_dir=args.out)
    cfgmod.write_manifest(args.out, "eval", cfg, {"aggregate": report.aggregate})
    for key, value in sorted(report.aggregate.items()):
        print(f"{key}: {value:.4f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _resolved(args)
    shapes = [(1, 3, s, s) for s in args.sizes]
    args.out.mkdir(parents=True, exist_ok=True)
    reports = {}
    if args.model is not None:
        model, _ = load_checkpoint(args.model)
        reports["model"] = bench_efficiency(model, shapes)
    else:
        seed = int(cfg["seed"])
        reports["teacher"] = bench_efficiency(
            DehazeNet(teacher_config(), role="teacher", seed=seed), shapes)
        reports["student"] = bench_efficiency(
            DehazeNet(student_config(), seed=seed), shapes)
    for name, rep in reports.items():
        rep.to_json(args.out / f"efficiency_{name}.json")
        print(f"{name}: params={rep.params} flops={rep.flops} latency_ms={rep.latency_ms}")
    cfgmod.write_manifest(args.out, "bench", cfg, {"models": sorted(reports)})
    return EXIT_OK


def _cmd_dehaze(args) -> int:
    model, _ = load_checkpoint(args.model)
    img = datamod.load_image(args.input)
    divisor = model.config.downsample_factor ** (model.config.stages - 1)
    h, w = img.shape[-2:]
    pad_h = (-h) % divisor
    pad_w = (-w) % divisor
    x = img.unsqueeze(0)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    with torch.no_grad():
        out, _ = model(x)
    out = out[0, :, :h, :w].clamp(0.0, 1.0)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    datamod.save_image(out, args.output)
    print(f"dehazed {args.input} -> {args.output}")
    return EXIT_OK


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train-teacher": _cmd_train_teacher,
    "moc": _cmd_moc,
    "train-prompts": _cmd_train_prompts,
    "bia": _cmd_bia,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "dehaze": _cmd_dehaze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
