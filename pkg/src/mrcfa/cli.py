"""Command line: gen, train, eval, ablate, cost.

Settings resolve as flags > ``--config`` file > defaults. The config file is
flat ``key=value`` text whose keys are model config fields plus the training
keys ``steps``, ``lr``, ``optimizer`` and ``poly``.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mrcfa.cost import cost_affinity_path, measure_runtime
from mrcfa.data import (
    dataset_num_classes,
    is_empty_dir,
    load_dataset,
    make_dataset,
    parse_key_values,
    save_dataset,
)
from mrcfa.experiments import AXES, ablation, ablation_csv
from mrcfa.io import FormatError, load_tensors, save_tensors
from mrcfa.model import MRCFA, ModelConfig
from mrcfa.train import NonFiniteLoss, evaluate, train

log = logging.getLogger("mrcfa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.tns"
CONFIG = "config.txt"
LOSS_CSV = "loss.csv"
TRAIN_KEYS = {"steps": int, "lr": float, "optimizer": str, "poly": bool}
TRAIN_DEFAULTS = {"steps": 200, "lr": 0.01, "optimizer": "sgd", "poly": False}


class UsageError(ValueError):
    pass


def int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def dims_arg(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = [int(v) for v in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")


# flag dest -> model config field
MODEL_FLAGS = {
    "p": "p",
    "n": "n_top",
    "scales": "num_scales",
    "offsets": "reference_offsets",
    "strides": "strides",
    "channels": "channels",
    "c_hat": "c_hat",
    "mode": "mode",
    "seed": "seed",
    "freeze_ref": "freeze_ref",
    "sar": "sar",
    "maa": "maa",
    "precision": "precision",
}


def add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--p", type=float, help="token selection ratio in (0, 1]")
    g.add_argument("--n", type=int, help="top-n rows summed per key token")
    g.add_argument("--scales", type=int, help="number of feature scales L")
    g.add_argument("--offsets", type=int_list, help="reference offsets, e.g. --offsets=-9,-6,-3 ('none' for T=1)")
    g.add_argument("--strides", type=int_list, help="encoder stage strides, e.g. 4,8,16")
    g.add_argument("--channels", type=int_list, help="encoder stage channels, e.g. 16,32,64")
    g.add_argument("--c-hat", type=int, help="fused feature channels")
    g.add_argument("--mode", choices=("mrcfa", "pyramid"))
    g.add_argument("--seed", type=int)
    g.add_argument("--freeze-ref", action="store_const", const=True, help="no gradient through reference frames")
    g.add_argument("--no-sar", dest="sar", action="store_const", const=False, help="drop the per-scale refinement")
    g.add_argument("--no-maa", dest="maa", action="store_const", const=False, help="drop the cross-scale aggregation")
    g.add_argument("--precision", choices=("f32", "f64"))


def add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int, help=f"optimizer steps (default {TRAIN_DEFAULTS['steps']})")
    g.add_argument("--lr", type=float, help=f"learning rate (default {TRAIN_DEFAULTS['lr']})")
    g.add_argument("--optimizer", choices=("sgd", "adamw"))
    g.add_argument("--poly", action="store_const", const=True, help="polynomial learning-rate decay")


def read_config_file(path: Optional[str]) -> dict[str, str]:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    return parse_key_values(p.read_text())


def resolve(args: argparse.Namespace, **fixed) -> tuple[ModelConfig, dict]:
    """Model config and training settings from defaults, file and flags."""
    file_vals = read_config_file(getattr(args, "config", None))
    model_vals: dict = {}
    train_vals = dict(TRAIN_DEFAULTS)
    for key, raw in file_vals.items():
        if key in TRAIN_KEYS:
            kind = TRAIN_KEYS[key]
            train_vals[key] = raw.lower() in ("1", "true", "yes", "on") if kind is bool else kind(raw)
        else:
            model_vals[key] = raw
    try:
        cfg = ModelConfig.from_mapping(model_vals)
    except KeyError as e:
        raise UsageError(f"config file: {e.args[0]}") from None
    changes = {MODEL_FLAGS[d]: v for d, v in vars(args).items() if d in MODEL_FLAGS and v is not None}
    for key in TRAIN_KEYS:
        if getattr(args, key, None) is not None:
            train_vals[key] = getattr(args, key)
    changes.update(fixed)
    return cfg.replace(**changes), train_vals


def check_size(size: tuple[int, int], cfg: ModelConfig) -> None:
    deepest = cfg.strides[-1]
    if size[0] % deepest or size[1] % deepest:
        raise UsageError(f"--size {size[0]}x{size[1]} is not divisible by the deepest encoder stride {deepest}")


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if not is_empty_dir(out) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(path: str):
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    clips = load_dataset(root)
    if not clips:
        raise UsageError(f"dataset {root} has no videos")
    return clips, dataset_num_classes(root, clips)


def data_config(cfg: ModelConfig, clips, classes: int) -> ModelConfig:
    size = tuple(clips[0].frames[0].shape[1:])
    check_size(size, cfg)
    return cfg.replace(image_size=size, num_classes=classes)


def save_checkpoint(out: Path, model: MRCFA) -> None:
    save_tensors(out / CHECKPOINT, model.state_dict())
    (out / CONFIG).write_text(model.cfg.to_text())


def load_checkpoint(path: str) -> MRCFA:
    p = Path(path)
    ckpt = p / CHECKPOINT if p.is_dir() else p
    cfg_path = ckpt.parent / CONFIG
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    if not cfg_path.is_file():
        raise FileNotFoundError(f"checkpoint config {cfg_path} not found")
    model = MRCFA(ModelConfig.from_mapping(parse_key_values(cfg_path.read_text())))
    try:
        model.load_state_dict(load_tensors(ckpt))
    except (KeyError, ValueError) as e:
        raise FormatError(ckpt, 0, f"checkpoint does not match its config: {e}") from None
    return model


def emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    cfg, _ = resolve(args)
    size = args.size
    check_size(size, cfg)
    out = prepare_out(args.out, args.force)
    clips = make_dataset(
        args.seed,
        args.videos,
        args.frames,
        size,
        args.classes,
        noise=args.noise,
        flicker=args.flicker,
        flicker_noise=args.flicker_noise,
    )
    meta = {"num_classes": args.classes, "size": f"{size[0]}x{size[1]}", "seed": args.seed}
    save_dataset(out, clips, meta)
    print(f"wrote {len(clips)} videos x {args.frames} frames ({size[0]}x{size[1]}, {args.classes} classes) to {out}")
    for c in clips:
        print(f"  {c.video_id}\t{len(c)}")
    return EXIT_OK


def cmd_train(args) -> int:
    clips, classes = load_data(args.data)
    cfg, tv = resolve(args)
    cfg = data_config(cfg, clips, classes)
    out = prepare_out(args.out, args.force)
    model = MRCFA(cfg)
    log.info("training %d parameters for %d steps (T=%d, p=%g, L=%d)", model.num_parameters(), tv["steps"], cfg.T, cfg.p, cfg.num_scales)
    result = train(model, clips, tv["steps"], lr=tv["lr"], optimizer=tv["optimizer"], poly=tv["poly"], log_every=args.log_every)
    save_checkpoint(out, model)
    (out / LOSS_CSV).write_text(result.to_csv())
    if result.losses:
        print(f"final loss {result.losses[-1]:.4f} after {len(result.losses)} steps")
    print(f"checkpoint written to {out / CHECKPOINT}")
    return EXIT_OK


def cmd_eval(args) -> int:
    clips, classes = load_data(args.data)
    if args.gt_as_prediction:
        report = evaluate(None, clips, classes, args.vc_window, not args.lax_vc, gt_as_prediction=True)
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --gt-as-prediction is given")
        model = load_checkpoint(args.ckpt)
        if model.cfg.num_classes != classes:
            raise UsageError(f"checkpoint predicts {model.cfg.num_classes} classes but the dataset has {classes}")
        size = tuple(clips[0].frames[0].shape[1:])
        if tuple(model.cfg.image_size) != size:
            raise UsageError(f"checkpoint expects {model.cfg.image_size} frames but the dataset has {size}")
        report = evaluate(model, clips, classes, args.vc_window, not args.lax_vc)
    emit(report.to_csv(), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if len(args.values) < 2:
        raise UsageError("--values needs at least two entries")
    train_clips, classes = load_data(args.data)
    test_clips, test_classes = load_data(args.eval_data) if args.eval_data else (train_clips, classes)
    if test_classes != classes:
        raise UsageError(f"train data has {classes} classes, eval data {test_classes}")
    cfg, tv = resolve(args)
    cfg = data_config(cfg, train_clips, classes)
    rows = ablation(
        args.axis,
        args.values,
        cfg,
        train_clips,
        test_clips,
        tv["steps"],
        seeds=args.seeds,
        lr=tv["lr"],
        optimizer=tv["optimizer"],
        window=args.vc_window,
    )
    emit(ablation_csv(rows, args.vc_window), args.out)
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg, _ = resolve(args)
    if args.dims:
        check_size(args.dims, cfg)
        cfg = cfg.replace(image_size=args.dims)
    report = cost_affinity_path(cfg)
    text = report.to_csv()
    if args.runtime:
        stats = measure_runtime(cfg, repeats=args.runtime)
        text += f"# forward seconds: median {stats.median:.6f} iqr {stats.iqr:.6f} over {len(stats.samples)} runs\n"
    emit(text, args.out)
    return EXIT_OK


def value_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrcfa", description=__doc__.split("\n")[0])
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic moving-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--videos", type=int, default=8)
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--size", type=dims_arg, default=(32, 32), help="N or HxW")
    g.add_argument("--classes", type=int, default=4, help="class count including background")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--flicker", type=float, default=0.0, help="probability a frame gets extra noise")
    g.add_argument("--flicker-noise", type=float, default=0.0)
    g.add_argument("--strides", type=int_list, help="encoder strides the size must suit")
    g.add_argument("--config")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--force", action="store_true")
    t.add_argument("--log-every", type=int, default=0)
    add_model_flags(t)
    add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", help="checkpoint file or training output directory")
    e.add_argument("--vc-window", type=int, default=4)
    e.add_argument("--lax-vc", action="store_true", help="count constant predictions as consistent even when wrong")
    e.add_argument("--gt-as-prediction", action="store_true", help="score the labels against themselves")
    e.add_argument("--out", help="CSV path (default stdout)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score one model per value of an axis")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", help="held-out dataset (default: --data)")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--values", required=True, type=value_list, help="comma-separated, e.g. 1.0,0.5,0.1")
    a.add_argument("--seeds", type=int_list, default=(0,))
    a.add_argument("--vc-window", type=int, default=4)
    a.add_argument("--config")
    a.add_argument("--out", help="CSV path (default stdout)")
    add_model_flags(a)
    add_train_flags(a)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cost", help="analytic cost of the affinity path")
    c.add_argument("--dims", type=dims_arg, help="frame size N or HxW")
    c.add_argument("--runtime", type=int, default=0, help="also time this many forward passes (>= 3)")
    c.add_argument("--config")
    c.add_argument("--out", help="CSV path (default stdout)")
    add_model_flags(c)
    c.set_defaults(func=cmd_cost)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
