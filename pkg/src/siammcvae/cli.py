"""Command-line entry point: ``siammcvae {gen-data,train,restore,evaluate,sweep}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data, harness
from .tensor import NonFiniteError

# exit codes by diagnostic category
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5, 6

# flag -> config key; value type comes from the config itself
_FLAGS = {
    "steps": "steps", "batch-size": "batch_size", "beta": "beta", "kl-form": "kl_form",
    "mask-ratio": "mask_ratio", "mask-mode": "mask_mode", "frame-gap": "frame_gap",
    "lr": "lr", "beta1": "beta1", "beta2": "beta2", "adam-eps": "adam_eps", "seed": "seed",
    "train-pairs": "train_pairs", "eval-pairs": "eval_pairs", "kernel": "attention_kernel",
    "reparam": "reparam_enabled", "checkpoint-every": "checkpoint_every",
    "data": "data_dir", "out": "out_dir",
}


def _add_config_flags(p, exclude=()):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for flag, key in _FLAGS.items():
        if flag not in exclude:
            p.add_argument(f"--{flag}", dest=f"cfg_{key}", metavar=key.upper())


def _resolve_config(args, base=None):
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else (base or cfgmod.TrainConfig())
    pairs = []
    for item in args.set:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    for key in _FLAGS.values():
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            pairs.append((key, v))
    return cfgmod.apply_overrides(cfg, pairs)


def _load_pairs(path, gap):
    return data.load_dataset(path, gap=gap)


def cmd_gen_data(args):
    pairs = data.synthetic_dataset(args.pairs, args.gap, args.seed, length=args.length,
                                   H=args.height, W=args.width, background=args.background)
    path = data.write_dataset(args.out, pairs)
    print(f"wrote {len(pairs)} pairs to {path}")


def cmd_train(args):
    cfg = _resolve_config(args)
    resume = ckpt.load(args.resume) if args.resume else None
    res = harness.train(cfg, cfg.out_dir, resume=resume)
    print(json.dumps({"out_dir": str(res.out_dir), "steps": cfg.steps,
                      "final_loss": res.losses[-1] if res.losses else None,
                      "eval": res.summary}, indent=1))


def cmd_evaluate(args):
    ck = ckpt.load(args.checkpoint)
    cfg = ck.config
    if args.mask_mode:
        cfg = cfg.with_(mask_mode=args.mask_mode)
    pairs = _load_pairs(args.data, cfg.frame_gap) if args.data else harness.heldout_pairs(cfg)
    ratio = cfg.mask_ratio if args.mask_ratio is None else args.mask_ratio
    seed = cfg.seed if args.seed is None else args.seed
    ev = harness.evaluate(ck.params, cfg, pairs, ratio, seed, masked_only=args.masked_only)
    ev.write(args.out)
    cfgmod.save(cfg, Path(args.out) / "config.txt")
    print(json.dumps(ev.summary(), indent=1))


def cmd_restore(args):
    ck = ckpt.load(args.checkpoint)
    if args.pair:
        a, b = args.pair
        pair = data.FramePair(data.read_image(a), data.read_image(b), 0, Path(b).stem)
    else:
        src = _load_pairs(args.data, ck.config.frame_gap) if args.data else harness.heldout_pairs(ck.config)
        if not 0 <= args.index < len(src):
            raise IndexError(f"pair index {args.index} out of range (dataset has {len(src)})")
        pair = src[args.index]
    mask = [int(t) for t in args.mask.split(",")] if args.mask else None
    _, panel = harness.restore(ck.params, ck.config, pair, mask=mask,
                               mask_ratio=args.mask_ratio, seed=args.seed)
    data.write_image(args.out, panel)
    print(f"wrote panel (masked | model | ground truth) to {args.out}")


def cmd_sweep(args):
    cfg = _resolve_config(args)
    ck = ckpt.load(args.checkpoint) if args.checkpoint else None
    rows = harness.sweep(args.kind, cfg, cfg.out_dir, checkpoint=ck)
    cols = harness.SWEEP_COLUMNS
    print("\t".join(cols))
    for r in rows:
        print("\t".join(f"{r[c]:.6g}" if isinstance(r[c], float) else str(r[c]) for c in cols))


def build_parser():
    ap = argparse.ArgumentParser(prog="siammcvae", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic frame-pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=64)
    p.add_argument("--gap", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--background", choices=("gradient", "noise-texture"), default="gradient")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint and the baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset dir or manifest (default: held-out synthetic set)")
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--mask-mode", choices=("random", "block"))
    p.add_argument("--seed", type=int)
    p.add_argument("--masked-only", action="store_true",
                   help="MSE/MAE/PSNR over masked pixels only")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("restore", help="write a masked | model | ground-truth panel")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pair", nargs=2, metavar=("A1", "A2"), help="two PPM frames")
    g.add_argument("--data", help="dataset dir or manifest")
    p.add_argument("--index", type=int, default=0)
    m = p.add_mutually_exclusive_group()
    m.add_argument("--mask-ratio", type=float, default=None)
    m.add_argument("--mask", help="comma-separated masked patch indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .ppm")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("sweep", help="run one of the ablation/sweep drivers")
    p.add_argument("--kind", required=True, choices=sorted(harness.SWEEPS))
    p.add_argument("--checkpoint", help="model for mask_ratio/frame_gap sweeps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "restore" and args.mask is None and args.mask_ratio is None:
        args.mask_ratio = 0.9
    try:
        args.func(args)
    except cfgmod.ConfigError as e:
        return _fail("config", e, EXIT_CONFIG)
    except ckpt.CheckpointError as e:
        return _fail("checkpoint", e, EXIT_CHECKPOINT)
    except (NonFiniteError, harness.TrainingAborted) as e:
        return _fail("numeric", e, EXIT_NUMERIC)
    except (OSError, ValueError, IndexError) as e:
        return _fail("data", e, EXIT_DATA)
    return EXIT_OK


def _fail(category, err, code):
    print(f"error [{category}]: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
