"""Command-line driver.

Subcommands: flops, gen-data, train-teacher, distill, eval, ablate,
dump-attn. Exit codes: 0 success, 2 usage/config error, 3 numerical
divergence. All outputs are deterministic given config and seed; the only
non-reproducible fields are wall times.

Training options come from an INI config file ([train] and [weights]
sections) and/or flags; flags win. DSDISTILL_OUT sets the default output
root.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dst1
from .attention import attention_map
from .cost_model import LayerGeometry, flops_report
from .data import generate, load_dataset, save_dataset
from .losses import LossWeights
from .metrics import UndefinedMetricError
from .nets import student_spec, teacher_spec
from .train import (Checkpoint, TrainConfig, TrainingDivergence, _tapset,
                    distill_student, evaluate_net, train_teacher)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _out_root() -> str:
    return os.environ.get("DSDISTILL_OUT", "runs")


class CliError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="dsdistill", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="print the extraction-cost report")
    p.add_argument("--n", type=int, default=256, help="feature channels")
    p.add_argument("--h", type=int, default=80)
    p.add_argument("--w", type=int, default=45)
    p.add_argument("--c", type=int, default=19, help="category count")
    p.add_argument("--hp", type=int, default=65, help="logits height")
    p.add_argument("--wp", type=int, default=65, help="logits width")
    p.add_argument("--k", type=int, default=2, help="tapped layer count")
    p.add_argument("--format", choices=("json", "table", "both"), default="both")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--h", type=int, default=64)
    p.add_argument("--w", type=int, default=64)
    p.add_argument("--c", type=int, default=6)
    p.add_argument("--shapes", default="mixed")
    p.add_argument("--noise-sigma", type=float, default=0.30)

    for name in ("train-teacher", "distill"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a dataset")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--val-data", help="validation dataset directory")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--poly-power", type=float)
        p.add_argument("--log-interval", type=int)
        p.add_argument("--augment", action="store_true", default=None)
        if name == "train-teacher":
            p.add_argument("--channels", type=int, default=32,
                           help="teacher base channel width")
        else:
            p.add_argument("--teacher", help="teacher checkpoint path")
            p.add_argument("--channels", type=int, default=8,
                           help="student base channel width")
            p.add_argument("--loss", dest="loss_mode",
                           choices=("dsd", "psd", "csd", "kd", "at",
                                    "fitnet", "affinity"))
            p.add_argument("--alpha", type=float)
            p.add_argument("--beta", type=float)
            p.add_argument("--tau", type=float)
            p.add_argument("--pairs", help="adjacent | all | l:h,h:b list")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("ablate", help="grid of distillation runs -> CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--losses", default="kd,csd")
    p.add_argument("--taus", default="1,2,4,8")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--channels", type=int, default=8)

    p = sub.add_parser("dump-attn", help="write attention/residual maps as DST1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--pairs", default="adjacent")
    return top


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str | None) -> TrainConfig:
    cfg = TrainConfig()
    if not path:
        return cfg
    ini = configparser.ConfigParser()
    read = ini.read(path)
    if not read:
        raise CliError(f"cannot read config file {path}")
    d = cfg.to_dict()
    if ini.has_section("train"):
        for key, raw in ini.items("train"):
            if key not in d or key == "weights":
                raise CliError(f"unknown [train] key {key!r}")
            current = d[key]
            if isinstance(current, bool):
                d[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                d[key] = int(raw)
            elif isinstance(current, float):
                d[key] = float(raw)
            else:
                d[key] = raw.strip()
    if ini.has_section("weights"):
        for key, raw in ini.items("weights"):
            if key not in d["weights"]:
                raise CliError(f"unknown [weights] key {key!r}")
            d["weights"][key] = float(raw)
    return TrainConfig.from_dict(d)


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    d = cfg.to_dict()
    flag_map = {"seed": "seed", "iterations": "iterations",
                "batch_size": "batch_size", "lr": "base_lr",
                "momentum": "momentum", "weight_decay": "weight_decay",
                "poly_power": "poly_power", "log_interval": "log_interval",
                "augment": "augment", "loss_mode": "loss_mode"}
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    for flag in ("alpha", "beta", "tau"):
        val = getattr(args, flag, None)
        if val is not None:
            d["weights"][flag] = val
    pairs = getattr(args, "pairs", None)
    if pairs is not None:
        d["pair_policy"] = {"all": "all-pairs"}.get(pairs, pairs)
    return TrainConfig.from_dict(d)


def _dataset(path: str):
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot load dataset {path}: {e}") from e


def _write_run(out_dir: Path, ckpt: Checkpoint, report, ckpt_name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.save(out_dir / ckpt_name)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "trace.csv").write_text(report.trace_csv())


# ---------------------------------------------------------------------------
# commands


def _cmd_flops(args) -> int:
    try:
        geom = LayerGeometry(n=args.n, h=args.h, w=args.w, c=args.c,
                             hp=args.hp, wp=args.wp, k=args.k)
        rep = flops_report(geom)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.format in ("json", "both"):
        print(rep.to_json())
    if args.format in ("table", "both"):
        print(rep.to_table())
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    samples = generate(args.seed, args.n, args.h, args.w, args.c,
                       shape_policy=args.shapes, noise_sigma=args.noise_sigma)
    save_dataset(samples, args.out, {
        "seed": args.seed, "n": args.n, "h": args.h, "w": args.w,
        "c": args.c, "shape_policy": args.shapes,
        "noise_sigma": args.noise_sigma,
    })
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def _cmd_train_teacher(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    samples, meta = _dataset(args.data)
    val = _dataset(args.val_data)[0] if args.val_data else None
    spec = teacher_spec(meta["c"], base=args.channels)
    ckpt, report = train_teacher(spec, samples, cfg, val_samples=val,
                                 dataset_meta=meta)
    out = Path(args.out or Path(_out_root()) / "teacher")
    _write_run(out, ckpt, report, "teacher.ckpt")
    print(f"teacher checkpoint + report in {out}")
    return EXIT_OK


def _cmd_distill(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    samples, meta = _dataset(args.data)
    val = _dataset(args.val_data)[0] if args.val_data else None
    spec = student_spec(meta["c"], base=args.channels)
    teacher = Checkpoint.load(args.teacher) if args.teacher else None
    ckpt, report = distill_student(teacher, spec, samples, cfg,
                                   val_samples=val, dataset_meta=meta)
    out = Path(args.out or Path(_out_root()) / "student")
    _write_run(out, ckpt, report, "student.ckpt")
    print(f"student checkpoint + report in {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    samples, meta = _dataset(args.data)
    if not samples:
        raise CliError("dataset is empty; metrics are undefined")
    if ckpt.spec.num_classes != meta["c"]:
        raise CliError(
            f"checkpoint has {ckpt.spec.num_classes} classes, dataset {meta['c']}")
    try:
        metrics = evaluate_net(ckpt.net(), samples, args.batch_size)
    except UndefinedMetricError as e:
        raise CliError(str(e)) from e
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    base = _apply_overrides(_load_config(args.config), args)
    samples, meta = _dataset(args.data)
    val = _dataset(args.val_data)[0]
    teacher = Checkpoint.load(args.teacher)
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    taus = [float(s) for s in args.taus.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out or Path(_out_root()) / "ablate")
    cell_dir = out / "cells"
    cell_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    failures = 0
    for loss in losses:
        for tau in taus:
            cell_rows = []
            for seed in seeds:
                d = base.to_dict()
                d["loss_mode"] = loss
                d["seed"] = seed
                d["weights"]["tau"] = tau
                cfg = TrainConfig.from_dict(d)
                digest = hashlib.sha256(json.dumps(
                    {"cfg": cfg.to_dict(), "teacher": teacher.spec.digest(),
                     "data": meta, "channels": args.channels},
                    sort_keys=True).encode()).hexdigest()[:16]
                cell_file = cell_dir / f"{digest}.json"
                if cell_file.exists():
                    row = json.loads(cell_file.read_text())
                else:
                    try:
                        spec = student_spec(meta["c"], base=args.channels)
                        _, report = distill_student(teacher, spec, samples,
                                                    cfg, val_samples=val,
                                                    dataset_meta=meta)
                    except (TrainingDivergence, ValueError) as e:
                        print(f"cell loss={loss} tau={tau} seed={seed} "
                              f"failed: {e}", file=sys.stderr)
                        failures += 1
                        continue
                    row = {"loss": loss, "tau": tau, "seed": seed,
                           "miou": report.final["miou"],
                           "pixel_acc": report.final["pixel_acc"]}
                    cell_file.write_text(json.dumps(row, sort_keys=True))
                cell_rows.append(row)
                rows.append(row)
            if cell_rows:
                mious = np.array([r["miou"] for r in cell_rows])
                accs = np.array([r["pixel_acc"] for r in cell_rows])
                rows.append({"loss": loss, "tau": tau, "seed": "mean",
                             "miou": float(mious.mean()),
                             "pixel_acc": float(accs.mean())})
                rows.append({"loss": loss, "tau": tau, "seed": "std",
                             "miou": float(mious.std()),
                             "pixel_acc": float(accs.std())})

    lines = ["loss,tau,seed,miou,pixel_acc"]
    for r in rows:
        lines.append(f"{r['loss']},{r['tau']},{r['seed']},"
                     f"{r['miou']!r},{r['pixel_acc']!r}")
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    print(f"grid CSV in {out / 'ablate.csv'}")
    return EXIT_OK if failures == 0 else 1


def _cmd_dump_attn(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    samples, _ = _dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise CliError(f"index {args.index} outside dataset of {len(samples)}")
    out = Path(args.out or Path(_out_root()) / "attn")
    out.mkdir(parents=True, exist_ok=True)
    net = ckpt.net()
    _, taps = net.forward(samples[args.index].image[None])
    per_sample = {k: v[0] for k, v in taps.items()}
    for name, feat in per_sample.items():
        dst1.dump(attention_map(feat), out / f"attn_{name}.dst1")
    policy = {"all": "all-pairs"}.get(args.pairs, args.pairs)
    tap_set = _tapset(per_sample, policy)
    for key, ra in tap_set.residual_maps().items():
        dst1.dump(ra, out / f"ra_{key}.dst1")
    print(f"maps in {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {
        "flops": _cmd_flops,
        "gen-data": _cmd_gen_data,
        "train-teacher": _cmd_train_teacher,
        "distill": _cmd_distill,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "dump-attn": _cmd_dump_attn,
    }[args.command]
    try:
        return handler(args)
    except TrainingDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
