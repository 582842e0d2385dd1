"""Command-line driver for reproducible experiments.

Configuration is a flat ``key=value`` text file (``#`` comments allowed);
nesting is spelled with dotted keys. Unknown keys are rejected by name, and
every training run writes its fully resolved configuration next to its
outputs so results stay reproducible from the artifacts alone.

Subcommands: train, eval, ablate, cam, inspect.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import cam as cam_mod
from .backbones import BackboneSpec, build, param_count
from .data import AugmentConfig, Dataset, load_cifar10, normalize, synth_split
from .errors import ChandivError, ConfigError
from .train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    train,
)

ABLATE_VARIANTS = ("none", "gap_only", "attn_only", "positive_corr", "full", "se")

DEFAULTS = {
    "seed": "0",
    "out_dir": "runs/out",
    "backbone.stage_channels": "16,32,64",
    "backbone.blocks_per_stage": "1",
    "backbone.block_kind": "residual",
    "backbone.attention": "none",
    "backbone.attention_placement": "tail",
    "backbone.num_classes": "10",
    "backbone.input_shape": "3,32,32",
    "backbone.se_reduction": "4",
    "backbone.stem_stride": "1",
    "train.lr": "0.1",
    "train.momentum": "0.9",
    "train.weight_decay": "5e-4",
    "train.epochs": "10",
    "train.batch_size": "128",
    "train.schedule": "0.5:0.1,0.75:0.1",
    "train.threads": "1",
    "augment.enabled": "true",
    "augment.pad": "4",
    "augment.hflip_prob": "0.5",
    "data.kind": "synth",
    "data.train": "",
    "data.eval": "",
    "data.limit_train": "0",
    "data.limit_eval": "0",
    "data.synth.n_train": "2000",
    "data.synth.n_eval": "500",
    "data.synth.classes": "10",
    "data.synth.shape": "3,16,16",
    "ablate.seeds": "0,1,2",
}


def parse_config(path: str | None) -> dict:
    """Load defaults plus overrides from a flat key=value file."""
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
            cfg[key] = value
    return cfg


def resolved_text(cfg: dict) -> str:
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg)) + "\n"


def _ints(value: str) -> tuple:
    return tuple(int(v) for v in value.split(",") if v != "")

def _bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def _schedule(value: str) -> tuple:
    if not value.strip():
        return ()
    steps = []
    for part in value.split(","):
        frac, factor = part.split(":")
        steps.append((float(frac), float(factor)))
    return tuple(steps)


def backbone_spec(cfg: dict, attention: str | None = None) -> BackboneSpec:
    return BackboneSpec(
        stage_channels=_ints(cfg["backbone.stage_channels"]),
        blocks_per_stage=int(cfg["backbone.blocks_per_stage"]),
        block_kind=cfg["backbone.block_kind"],
        attention=cfg["backbone.attention"] if attention is None else attention,
        attention_placement=cfg["backbone.attention_placement"],
        num_classes=int(cfg["backbone.num_classes"]),
        input_shape=_ints(cfg["backbone.input_shape"]),
        se_reduction=int(cfg["backbone.se_reduction"]),
        stem_stride=int(cfg["backbone.stem_stride"]),
    )


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        lr=float(cfg["train.lr"]),
        momentum=float(cfg["train.momentum"]),
        weight_decay=float(cfg["train.weight_decay"]),
        epochs=int(cfg["train.epochs"]),
        batch_size=int(cfg["train.batch_size"]),
        seed=int(cfg["seed"]) if seed is None else seed,
        schedule=_schedule(cfg["train.schedule"]),
        threads=int(cfg["train.threads"]),
    )


def augment_config(cfg: dict) -> AugmentConfig:
    return AugmentConfig(
        pad=int(cfg["augment.pad"]),
        hflip_prob=float(cfg["augment.hflip_prob"]),
        enabled=_bool(cfg["augment.enabled"]),
    )


def _limit(ds: Dataset, n: int) -> Dataset:
    if n <= 0 or n >= len(ds):
        return ds
    return Dataset(images=ds.images[:n], labels=ds.labels[:n],
                   class_count=ds.class_count)


def load_datasets(cfg: dict):
    """Returns (train, eval) normalized with the training split's stats,
    plus the raw [0,1] eval images for display purposes."""
    kind = cfg["data.kind"]
    if kind == "synth":
        raw_train, raw_eval = synth_split(
            int(cfg["seed"]),
            int(cfg["data.synth.n_train"]),
            int(cfg["data.synth.n_eval"]),
            int(cfg["data.synth.classes"]),
            _ints(cfg["data.synth.shape"]),
        )
    elif kind == "cifar10":
        if not cfg["data.train"] or not cfg["data.eval"]:
            raise ConfigError("data.kind=cifar10 needs data.train and data.eval paths")
        raw_train = _limit(load_cifar10(cfg["data.train"]), int(cfg["data.limit_train"]))
        raw_eval = _limit(load_cifar10(cfg["data.eval"]), int(cfg["data.limit_eval"]))
    else:
        raise ConfigError(f"unknown data.kind {kind!r} (expected synth or cifar10)")
    ds_train = normalize(raw_train)
    ds_eval = normalize(raw_eval, ds_train.mean, ds_train.std)
    return ds_train, ds_eval, raw_eval


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = str(args.seed)
    if getattr(args, "threads", None) is not None:
        cfg["train.threads"] = str(args.threads)
    if getattr(args, "out", None) is not None and "out_dir" in cfg:
        cfg["out_dir"] = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    ds_train, ds_eval, _ = load_datasets(cfg)
    spec = backbone_spec(cfg)
    net = build(spec, seed=int(cfg["seed"]))
    history, best = train(net, ds_train, ds_eval, train_config(cfg),
                          augment_config(cfg))
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    history.to_csv(os.path.join(out_dir, "history.csv"))
    with open(os.path.join(out_dir, "checkpoint.cdiv"), "wb") as f:
        f.write(best)
    with open(os.path.join(out_dir, "config.resolved"), "w") as f:
        f.write(resolved_text(cfg))
    print(f"best_top1={max(history.eval_top1):.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    net = load_checkpoint(args.checkpoint)
    _, ds_eval, _ = load_datasets(cfg)
    print(f"top1={evaluate(net, ds_eval):.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    seeds = _ints(cfg["ablate.seeds"])
    ds_train, ds_eval, _ = load_datasets(cfg)
    rows = []
    for variant in ABLATE_VARIANTS:
        spec = backbone_spec(cfg, attention=variant)
        total, _, _ = param_count(build(spec, seed=0))
        scores = []
        for seed in seeds:
            net = build(spec, seed=seed)
            history, _ = train(net, ds_train, ds_eval,
                               train_config(cfg, seed=seed), augment_config(cfg))
            scores.append(max(history.eval_top1))
        rows.append((variant, total, scores, sum(scores) / len(scores)))

    header = ["variant", "params"] + [f"top1@seed{s}" for s in seeds] + ["mean"]
    lines = [",".join(header)]
    for variant, total, scores, mean in rows:
        lines.append(",".join([variant, str(total)]
                              + [f"{s:.6f}" for s in scores] + [f"{mean:.6f}"]))
    table = "\n".join(lines) + "\n"

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write(table)
    with open(os.path.join(out_dir, "config.resolved"), "w") as f:
        f.write(resolved_text(cfg))
    print(table, end="")
    return 0


def cmd_cam(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    net = load_checkpoint(args.checkpoint)
    ds_train, ds_eval, raw_eval = load_datasets(cfg)
    if args.image is not None:
        display = cam_mod.read_ppm(args.image)
        model_input = ((display - ds_train.mean[:, None, None])
                       / ds_train.std[:, None, None])
    else:
        index = args.index or 0
        if not 0 <= index < len(ds_eval):
            raise ConfigError(f"--index {index} outside dataset of {len(ds_eval)}")
        display = raw_eval.images[index]
        model_input = ds_eval.images[index]
    result = cam_mod.compute_cam(net, model_input)
    cam_mod.emit_heatmap(result, display, args.out)
    print(f"pred={result.predicted_class}")
    return 0


def cmd_inspect(args) -> int:
    cfg = _apply_overrides(parse_config(args.config), args)
    net = build(backbone_spec(cfg), seed=int(cfg["seed"]))
    total, total_macs, rows = param_count(net)
    width = max(len(name) for name, _, _ in rows)
    print(f"{'layer'.ljust(width)}  {'params':>10}  {'macs':>12}")
    for name, n_params, macs in rows:
        print(f"{name.ljust(width)}  {n_params:>10}  {macs:>12}")
    print(f"{'total'.ljust(width)}  {total:>10}  {total_macs:>12}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chandiv",
        description="Train, evaluate and inspect channel-diversification CNNs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, checkpoint=False, out=False):
        p.add_argument("--config", required=config_required,
                       help="flat key=value configuration file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="BLAS thread cap; >1 relaxes bitwise determinism")

    p = sub.add_parser("train", help="train one model per the config")
    common(p, out=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="report checkpoint top-1 on the eval split")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train every block variant and compare")
    common(p, out=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("cam", help="write a class-activation heatmap")
    common(p, checkpoint=True, out=True)
    p.add_argument("--image", help="input image as binary PPM (P6)")
    p.add_argument("--index", type=int, help="eval dataset index (default 0)")
    p.set_defaults(fn=cmd_cam)

    p = sub.add_parser("inspect", help="print parameter and MAC accounting")
    common(p)
    p.set_defaults(fn=cmd_inspect)

    args = parser.parse_args(argv)
    if getattr(args, "fn", None) is cmd_cam and args.out is None:
        parser.error("cam requires --out")
    try:
        return args.fn(args)
    except ChandivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
