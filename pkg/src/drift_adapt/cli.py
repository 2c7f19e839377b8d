"""Command-line entry point: ``drift-adapt <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .corruptions import KINDS, Corruption, apply
from .experiment import MODES, ConfigError, resolve_config, run_ablation, run_experiment
from .model import build_model, save_weights
from .synth import load_dataset, make_dataset, save_dataset
from .tensor import write_tensor
from .train import TrainConfig, train_source

log = logging.getLogger("drift_adapt")


def _thread_limit():
    """Cap BLAS threads from DRIFT_ADAPT_THREADS (0 or unset means library default)."""
    raw = os.environ.get("DRIFT_ADAPT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DRIFT_ADAPT_THREADS must be an integer, got {raw!r}")
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
    overrides = {
        "dataset": args.dataset, "split": args.split, "model": args.model, "mode": args.mode,
        "momentum": args.momentum, "batch_size": args.batch_size, "output": args.output,
        "mask_dir": args.mask_dir,
    }
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    if args.corruption is not None or args.severity is not None:
        cfg["corruption"] = dict(cfg.get("corruption", {}))
        if args.corruption is not None:
            cfg["corruption"]["kind"] = args.corruption
        if args.severity is not None:
            cfg["corruption"]["severity"] = args.severity
    for flag, section, key in (("alpha0", "dm", "alpha0"), ("gamma_dm", "dm", "gamma_dm"),
                               ("beta0", "im", "beta0"), ("gamma_im", "im", "gamma_im"),
                               ("p0", "im", "p0"), ("gamma_blend", "im", "gamma_blend"),
                               ("tau", "im", "tau"), ("order_seed", "seeds", "order"),
                               ("corruption_seed", "seeds", "corruption")):
        value = getattr(args, flag)
        if value is not None:
            cfg[section] = dict(cfg.get(section, {}), **{key: value})
    return cfg


def cmd_gen_data(args) -> int:
    splits = (("train", args.train), ("val", args.val), ("test", args.test))
    ds = make_dataset(args.seed, splits, args.num_classes, args.size, args.size)
    path = save_dataset(ds, args.out)
    print(f"wrote {path}")
    return 0


def cmd_train_source(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      sgd_momentum=args.sgd_momentum, seed=args.seed)
    model = build_model(ds.num_classes, seed=args.seed)
    eval_sets = {name: ds[name] for name in ("val", "test") if name in ds.splits}
    model, train_log = train_source(ds["train"], model, cfg, eval_sets=eval_sets)
    save_weights(model, args.out)
    log_path = Path(args.log or Path(args.out).with_suffix(".log.json"))
    log_path.write_text(train_log.to_json())
    print(f"wrote {args.out} and {log_path}; metrics {train_log.metrics}")
    return 0


def cmd_corrupt(args) -> int:
    root = Path(args.dataset).parent
    manifest = json.loads(Path(args.dataset).read_text())
    count = 0
    for split in args.splits or manifest["splits"]:
        for i, entry in enumerate(manifest["splits"][split]):
            src = root / entry["image"]
            from .tensor import read_tensor
            img = read_tensor(src)
            out = apply(img, Corruption(args.kind, args.severity, args.seed ^ i))
            dst = src.with_name(f"{src.stem}.{args.kind}-{args.severity}{src.suffix}")
            write_tensor(out, dst)
            count += 1
    print(f"wrote {count} corrupted images")
    return 0


def cmd_adapt(args) -> int:
    report = run_experiment(_load_config(args))
    print(f"{report.mode}: mIoU {report.miou:.4f}")
    return 0


def cmd_eval(args) -> int:
    args.mode = "source-only"
    return cmd_adapt(args)


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = cfg.pop("output", None) or "ablation.json"
    results = run_ablation(cfg)
    payload = {"report_version": 1, "config": resolve_config(dict(cfg, output=None)), "miou": results}
    Path(out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    for label, miou in results.items():
        print(f"{label:24s} {miou:.4f}")
    return 0


def _experiment_flags(p, with_mode=True):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--dataset", help="dataset manifest.json")
    p.add_argument("--split")
    p.add_argument("--model", help="weight file")
    if with_mode:
        p.add_argument("--mode", choices=MODES)
    else:
        p.set_defaults(mode=None)
    p.add_argument("--momentum", type=float, help="constant momentum for fixed-momentum mode")
    p.add_argument("--corruption", choices=KINDS)
    p.add_argument("--severity", type=int, choices=range(1, 6))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--output", help="report JSON path")
    p.add_argument("--mask-dir", help="write predicted masks as PPM images here")
    for name in ("alpha0", "gamma_dm", "beta0", "gamma_im", "p0", "gamma_blend", "tau"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    p.add_argument("--order-seed", type=int)
    p.add_argument("--corruption-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drift-adapt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=20)
    p.add_argument("--test", type=int, default=80)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source model on clean data")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--sgd-momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("corrupt", help="write corrupted copies next to the original images")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--severity", type=int, default=3, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", nargs="*")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("adapt", help="adapt online over a corrupted stream and score it")
    _experiment_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="score the source model without adaptation")
    _experiment_flags(p, with_mode=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every ablation mode on one stream")
    _experiment_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, OSError, KeyError) as e:
        print(f"drift-adapt: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
