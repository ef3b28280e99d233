"""Command-line entry point: prepare-data | train | sample | evaluate | ablate.

Exit status 0 on success, 1 on usage errors, 2 on runtime failures, with
runtime failures printed as one structured JSON diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import diffusion, evaluation
from .data import Manifest, NormalizationScheme, build_phantom_dataset, denormalize, normalize, write_grid
from .schedule import respace_schedule
from .training import (
    TrainConfig,
    apply_override,
    load_checkpoint,
    model_from_checkpoint,
    train_loop,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _data_root(value: str | None) -> Path:
    if value:
        return Path(value)
    env = os.environ.get("DISCDIFF_DATA_DIR")
    if env:
        return Path(env)
    raise UsageError(
        "no data location given: pass --data or set DISCDIFF_DATA_DIR"
    )


def _load_manifest(data: str | None) -> Manifest:
    root = _data_root(data)
    path = root if root.name.endswith(".json") else root / "manifest.json"
    return Manifest.load(path)


def _deep_merge(base: dict, extra: dict, prefix: str = "") -> None:
    for key, value in extra.items():
        if key not in base:
            raise UsageError(f"unknown config key {prefix + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_merge(base[key], value, prefix + key + ".")
        else:
            base[key] = value


def _resolve_config(args) -> TrainConfig:
    doc = TrainConfig().to_dict()
    if args.config:
        _deep_merge(doc, json.loads(Path(args.config).read_text(encoding="utf-8")))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            apply_override(doc, key, value)
        except KeyError as e:
            raise UsageError(str(e)) from e
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def _build_parser() -> _Parser:
    parser = _Parser(prog="discdiff")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build a synthetic phantom dataset")
    p.add_argument("--phantoms", type=int, default=20, help="number of volumes")
    p.add_argument("--slices-per-volume", type=int, default=4)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--scale", type=int, choices=(2, 4), default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("sample", help="restore one slice from its conditions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, metavar="SLICE_ID")
    p.add_argument("--data", default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--sampling-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--sampling-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and score the three ablations")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--out", required=True)
    return parser


def _cmd_prepare_data(args) -> int:
    out = Path(args.out) if args.out else _data_root(None)
    manifest = build_phantom_dataset(
        out,
        n_volumes=args.phantoms,
        slices_per_volume=args.slices_per_volume,
        resolution=args.resolution,
        scale=args.scale,
        seed=args.seed,
    )
    counts = {s: len(manifest.split_records(s)) for s in ("train", "val", "test")}
    print(json.dumps({"manifest": str(out / "manifest.json"), "records": counts}))
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    manifest = _load_manifest(args.data)
    train_loop(manifest, config, args.out, resume_from=args.resume)
    print(json.dumps({"run_dir": args.out, "iterations": config.iterations}))
    return 0


def _sampling_schedule(config: TrainConfig, steps: int | None):
    n = steps if steps is not None else config.sampling_steps
    return respace_schedule(config.schedule.build(), n)


def _cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    net, config = model_from_checkpoint(ck)
    schedule = _sampling_schedule(config, args.sampling_steps)
    manifest = _load_manifest(args.data)
    record = manifest.record(args.input)
    lr = manifest.load_grid(record, "lr_t2")
    aux = manifest.load_grid(record, "hr_t1")
    lr_scheme = NormalizationScheme.for_grid(lr)
    cond = diffusion.ConditionPair(
        normalize(lr, lr_scheme),
        normalize(aux, NormalizationScheme.for_grid(aux)),
    )
    base = torch.Generator().manual_seed(args.seed)
    samples = diffusion.sample_hr(cond, net, schedule, args.k, base)
    # Without a reference target, intensities are restored on the
    # zero-filled input's scale.
    restored = np.stack([denormalize(s, lr_scheme) for s in samples])
    mean_map, std_map = evaluation.uncertainty_maps(restored)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, grid in enumerate(restored):
        name = f"{record.slice_id}_sample{i}"
        write_grid(out / f"{name}.f32", grid)
        evaluation.save_grayscale(out / f"{name}.png", grid)
        files[f"sample{i}"] = f"{name}.f32"
    evaluation.save_grayscale(out / f"{record.slice_id}_mean.png", mean_map)
    files["mean"] = f"{record.slice_id}_mean.png"
    if std_map is not None:
        evaluation.save_grayscale(out / f"{record.slice_id}_std.png", std_map)
        files["std"] = f"{record.slice_id}_std.png"
    summary = {
        "slice_id": record.slice_id,
        "k": args.k,
        "sampling_steps": schedule.T,
        "seed": args.seed,
        "files": files,
    }
    (out / "sample.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def _cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    net, config = model_from_checkpoint(ck)
    schedule = _sampling_schedule(config, args.sampling_steps)
    manifest = _load_manifest(args.data)
    report = evaluation.evaluate_dataset(
        manifest,
        net,
        schedule,
        split=args.split,
        k=args.k,
        seed=args.seed,
        out_dir=args.out,
    )
    print(
        json.dumps(
            {
                "split": report["split"],
                "mean_psnr": evaluation._encode(report["mean_psnr"]),
                "mean_ssim": report["mean_ssim"],
                "baseline_mean_psnr": evaluation._encode(report["baseline_mean_psnr"]),
                "baseline_mean_ssim": report["baseline_mean_ssim"],
            }
        )
    )
    return 0


ABLATIONS = ("no_disent", "mse_instead_of_charbonnier", "no_curriculum")


def _cmd_ablate(args) -> int:
    base = _resolve_config(args)
    manifest = _load_manifest(args.data)
    out = Path(args.out)
    rows = {}
    for name in ABLATIONS:
        doc = copy.deepcopy(base.to_dict())
        doc["ablations"] = {flag: flag == name for flag in ABLATIONS}
        config = TrainConfig.from_dict(doc)
        run_dir = out / name
        train_loop(manifest, config, run_dir)
        net, _ = model_from_checkpoint(load_checkpoint(run_dir / "checkpoint_final.pt"))
        report = evaluation.evaluate_dataset(
            manifest,
            net,
            _sampling_schedule(config, None),
            split="test",
            k=args.k,
            seed=config.seed,
            out_dir=run_dir / "eval",
        )
        rows[name] = {
            "mean_psnr": report["mean_psnr"],
            "mean_ssim": report["mean_ssim"],
        }
    doc = {
        name: {
            "mean_psnr": evaluation._encode(row["mean_psnr"]),
            "mean_ssim": row["mean_ssim"],
        }
        for name, row in rows.items()
    }
    (out / "comparison.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    width = max(len(n) for n in rows)
    print(f"{'configuration'.ljust(width)}  {'psnr':>8}  {'ssim':>7}")
    for name, row in rows.items():
        print(f"{name.ljust(width)}  {row['mean_psnr']:>8.3f}  {row['mean_ssim']:>7.4f}")
    return 0


_COMMANDS = {
    "prepare-data": _cmd_prepare_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        # argparse --help exits 0 through here
        return 0 if e.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        diagnostic = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(diagnostic), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
