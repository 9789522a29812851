"""Command-line interface: train, eval, grad-check, bench, scan-viz.

Heavy imports happen inside command handlers, after --threads has had a
chance to pin the BLAS thread pools via environment variables (they are
read when numpy first loads, so this module must stay import-light).

Exit codes: 0 success, 1 gradient-check breach, 2 bad configuration or
usage, 3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_BAD_CONFIG = 2
EXIT_NUMERIC = 3

# defaults for the key=value config file; unknown keys are rejected
CONFIG_DEFAULTS = {
    "preset": "micro",
    "num_classes": 4,
    "samples": 4000,
    "data_seed": 11,
    "eval_fraction": 0.1,
    "use_das": True,
    "use_convpos": True,
    "use_convffn": True,
    "offset_range": 0.5,
    "drop_path": 0.0,
    "dtype": "f32",
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "weight_decay": 0.05,
    "label_smoothing": 0.1,
    "batch_size": 32,
    "epochs": 8,
    "warmup_frac": 0.05,
    "budget_seconds": 0.0,      # 0 disables the cap
}

_HYPER_KEYS = ("lr", "beta1", "beta2", "weight_decay", "label_smoothing",
               "batch_size", "epochs", "warmup_frac")
_MODEL_KEYS = ("use_das", "use_convpos", "use_convffn", "offset_range",
               "drop_path")


class CliError(Exception):
    """Usage/config problem; maps to exit code 2."""


def load_config(path) -> dict:
    from .fileio import parse_config_text

    if path is None:
        return dict(CONFIG_DEFAULTS)
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path) as f:
        overrides = parse_config_text(f.read())
    unknown = sorted(set(overrides) - set(CONFIG_DEFAULTS))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(overrides)
    for key, default in CONFIG_DEFAULTS.items():
        want = type(default)
        have = cfg[key]
        if want in (int, float) and isinstance(have, (int, float)) \
                and not isinstance(have, bool):
            cfg[key] = want(have)
        elif not isinstance(have, want):
            raise CliError(
                f"config key {key!r} expects {want.__name__}, "
                f"got {have!r}")
    return cfg


def _dtype_of(cfg) -> "object":
    import numpy as np

    if cfg["dtype"] not in ("f32", "f64"):
        raise CliError(f"dtype must be f32 or f64, got {cfg['dtype']!r}")
    return np.float32 if cfg["dtype"] == "f32" else np.float64


def write_manifest(out_dir, command: str, resolved: dict, seed: int):
    from .fileio import canonical_config_text

    entries = dict(resolved)
    entries["command"] = command
    entries["seed"] = seed
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        # timestamp is the only line that varies between identical runs
        f.write(f"# written {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        f.write(f"# argv: {' '.join(sys.argv)}\n")
        f.write(canonical_config_text(entries))
        f.write("\n")


def _checkpoint_path(path) -> str:
    if not os.path.exists(path):
        raise CliError(f"checkpoint not found: {path}")
    return path


def _make_data(cfg):
    from .data import generate_dataset, train_eval_split

    images, labels = generate_dataset(cfg["samples"], cfg["num_classes"],
                                      cfg["data_seed"])
    return train_eval_split(images, labels, cfg["eval_fraction"])


def _model_config(cfg):
    from .model import preset

    return preset(cfg["preset"], num_classes=cfg["num_classes"],
                  **{k: cfg[k] for k in _MODEL_KEYS})


def _hyper(cfg):
    from .train import TrainHyper

    return TrainHyper(**{k: cfg[k] for k in _HYPER_KEYS})


def cmd_train(args) -> int:
    from .train import TrainState, train

    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    write_manifest(args.out, "train", cfg, args.seed)
    train_x, train_y, eval_x, eval_y = _make_data(cfg)
    state = TrainState.fresh(_model_config(cfg), _hyper(cfg), seed=args.seed,
                             dtype=_dtype_of(cfg))
    if args.resume:
        state = TrainState.load(_checkpoint_path(args.resume),
                                dtype=_dtype_of(cfg))
    budget = cfg["budget_seconds"] or None
    rows = train(state, train_x, train_y, eval_images=eval_x,
                 eval_labels=eval_y, budget_seconds=budget,
                 metrics_path=os.path.join(args.out, "metrics.csv"),
                 out_dir=args.out, log=print)
    val_rows = [r for r in rows if r["split"] == "val"]
    if val_rows:
        print(f"best val accuracy {state.best_accuracy:.6f}")
    print(f"checkpoints and metrics written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import TrainState, evaluate

    cfg = load_config(args.config)
    state = TrainState.load(_checkpoint_path(args.checkpoint))
    _, _, eval_x, eval_y = _make_data(cfg)
    loss, acc = evaluate(state.model, eval_x, eval_y,
                         batch_size=cfg["batch_size"])
    print(f"val loss {loss:.6f}")
    print(f"val accuracy {acc:.6f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, "eval", cfg, args.seed)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    rows = run_suite(op=args.op)
    breaches = 0
    for r in rows:
        status = "ok" if r["ok"] else "BREACH"
        print(f"{r['op']:18s} rel_err {r['rel_err']:.3e} "
              f"(threshold {r['threshold']:.0e})  {status}")
        breaches += 0 if r["ok"] else 1
    if breaches:
        print(f"{breaches} gradient check(s) failed")
        return EXIT_GRADCHECK
    print(f"all {len(rows)} gradient checks passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import fit_slope, measure, write_csv

    lengths = tuple(int(x) for x in args.lengths.split(","))
    rows = measure(lengths=lengths, reps=args.reps, log=print)
    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "bench.csv"), rows)
    write_manifest(args.out, "bench",
                   {"lengths": lengths, "reps": args.reps}, args.seed)
    for kernel in ("scan", "attention"):
        print(f"{kernel} growth exponent: {fit_slope(rows, kernel):.3f}")
    print(f"measurements written to {args.out}/bench.csv")
    return EXIT_OK


def cmd_scan_viz(args) -> int:
    import numpy as np

    from . import tensor as T
    from .data import generate_dataset, read_ppm
    from .fileio import Checkpoint
    from .model import Model
    from .viz import render_scan_svg

    ckpt = Checkpoint.load(_checkpoint_path(args.checkpoint))
    model = Model.from_checkpoint(ckpt)
    if args.input:
        image = read_ppm(args.input)
    else:
        k = 4
        images, _ = generate_dataset((args.index // k + 1) * k, k,
                                     seed=args.seed)
        image = images[args.index]
    sink: list = []
    with T.no_grad():
        model.forward_features(image[None].astype(model.dtype),
                               capture_stage=args.stage, plan_sink=sink)
    if not sink:
        raise CliError(f"stage {args.stage} has no blocks to visualize")
    plan = sink[0]
    os.makedirs(args.out, exist_ok=True)
    svg = render_scan_svg(plan, image=np.asarray(image, dtype=np.float64))
    svg_path = os.path.join(args.out, "path.svg")
    with open(svg_path, "w") as f:
        f.write(svg)
    with open(os.path.join(args.out, "plan.txt"), "w") as f:
        f.write(plan.serialize())
    write_manifest(args.out, "scan-viz",
                   {"checkpoint": args.checkpoint, "stage": args.stage,
                    "input": args.input or "(generated)"}, args.seed)
    print(f"wrote {svg_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dascan",
        description="Train, probe, and visualize adaptive-scan SSM models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="pin BLAS/OpenMP thread count")
        if out_default is not None:
            p.add_argument("--out", default=out_default,
                           help="output directory")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    common(p, out_default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--op", default="all")
    common(p)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("bench", help="sequence-length scaling benchmark")
    p.add_argument("--lengths", default="256,512,1024,2048,4096,8192")
    p.add_argument("--reps", type=int, default=5)
    common(p, out_default="runs/bench")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("scan-viz", help="render a checkpoint's scan path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", type=int, default=4, choices=(1, 2, 3, 4))
    p.add_argument("--input", default=None, help="PPM image to scan")
    p.add_argument("--index", type=int, default=0,
                   help="generated-sample index when no --input")
    common(p, out_default="runs/scan-viz")
    p.set_defaults(fn=cmd_scan_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return EXIT_BAD_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception as e:  # defer import so --threads stays effective
        from .errors import ContractError, DomainError, NumericsError

        if isinstance(e, NumericsError):
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e, (ContractError, DomainError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_BAD_CONFIG
        raise


def entrypoint():
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
