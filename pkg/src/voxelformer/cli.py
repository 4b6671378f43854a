"""Command-line surface: describe | gradcheck | train | infer | bench.

Exit codes: 0 success, 1 validation error, 2 numerical-check failure,
3 I/O error.

Heavy imports happen inside main() after threading environment variables are
pinned, so `--threads 1` genuinely caps BLAS pools as well.
"""

import argparse
import os
import sys


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voxelformer",
        description="windowed-attention 3D segmentation: training, inference, "
                    "and verification harness on synthetic volumes")
    p.add_argument("--device", choices=["cpu"], default="cpu",
                   help="compute device (cpu only)")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", help="print config, parameter breakdown, and FLOPs")
    d.add_argument("--config", help="run config JSON (defaults built in)")
    d.add_argument("--input-shape", default=None,
                   help="spatial extents D,H,W for the FLOP estimate")
    d.add_argument("--reference-profile", action="store_true",
                   help="use the default architecture at the published 4x128^3 input")

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--f64", action="store_true", default=True,
                   help="run in float64 (always on; flag kept for explicitness)")
    g.add_argument("--quick", action="store_true",
                   help="operator checks only, skip end-to-end models")

    t = sub.add_parser("train", help="train on synthetic volumes")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--seed", type=int, default=None, help="override model seed")
    t.add_argument("--steps", type=int, default=None, help="override train steps")
    t.add_argument("--out", default="run_out", help="output directory")
    t.add_argument("--threads", type=int, default=0,
                   help="native kernel threads (0 = all cores)")

    i = sub.add_parser("infer", help="segment a raw volume file with a checkpoint")
    i.add_argument("--config", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="raw volume file (C,D,H,W) or (D,H,W)")
    i.add_argument("--out", required=True, help="output label volume path")
    i.add_argument("--tta", action="store_true",
                   help="average predictions over the 8 flip combinations")

    b = sub.add_parser("bench", help="forward latency benchmark")
    b.add_argument("--config", help="run config JSON (defaults built in)")
    b.add_argument("--input-shape", default=None, help="spatial extents D,H,W")
    b.add_argument("--repeats", type=int, default=200)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--threads", type=int, default=1,
                   help="kernel threads (default 1: single-threaded, recorded in report)")
    b.add_argument("--compare-backends", action="store_true",
                   help="time both the compiled and numpy kernel backends")
    return p


def _pin_threads(n: int) -> None:
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _parse_shape(text, fallback):
    if text is None:
        return fallback
    parts = [int(v) for v in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError(f"--input-shape wants D,H,W, got {text!r}")
    return tuple(parts)


def _load_run_config(path):
    from .config import RunConfig, load_run_config
    if path is None:
        return RunConfig()
    return load_run_config(path)


def _cmd_describe(args) -> int:
    import json

    from .model import PUBLISHED_REFERENCE, analytic_param_count, count_params, estimate_flops
    from .model import build_model

    cfg = _load_run_config(args.config)
    shape = _parse_shape(args.input_shape, (cfg.data.volume_size,) * 3)
    if args.reference_profile:
        shape = _parse_shape(args.input_shape, (128, 128, 128))

    model = build_model(cfg.model)
    total, breakdown = count_params(model)
    analytic_total, _ = analytic_param_count(cfg.model)
    flops, flop_breakdown = estimate_flops(cfg.model, shape)

    print("config:")
    print(json.dumps(cfg.model.to_dict(), indent=2))
    print(f"\nparameters (runtime {total:,}, analytic {analytic_total:,}):")
    for key in breakdown:
        print(f"  {key:16s} {breakdown[key]:>12,}")
    print(f"  {'total':16s} {total:>12,}")
    print(f"\nanalytic FLOPs at input {shape} (batch 1): {flops / 1e9:.3f} G")
    for key, val in flop_breakdown.items():
        print(f"  {key:16s} {val / 1e9:>12.4f} G")
    ref = PUBLISHED_REFERENCE
    print(f"\npublished reference ({ref['input']}): {ref['params_millions']}M params, "
          f"{ref['gflops']} GFLOPs, {ref['gpu_ms']} ms GPU -- context only")
    if total != analytic_total:
        print("error: runtime and analytic parameter counts disagree", file=sys.stderr)
        return 2
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_all, run_op_checks

    results = run_op_checks() if args.quick else run_all()
    failed = 0
    for r in results:
        print(r.line())
        failed += not r.passed
    if failed:
        print(f"{failed} gradient check(s) failed", file=sys.stderr)
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .training import foreground_mean, train_run

    cfg = _load_run_config(args.config)
    if args.seed is not None:
        cfg.model = replace(cfg.model, seed=args.seed)
    if args.steps is not None:
        cfg.train = replace(cfg.train, steps=args.steps)
    cfg.validate()

    if args.threads >= 0:
        from . import backends
        if backends.NATIVE_AVAILABLE:
            from . import _native
            _native.set_num_threads(args.threads)

    result = train_run(cfg, out_dir=args.out, log=print)
    final = result.history[-1]
    print(f"done: {result.steps_run} steps, final loss {final['loss_total']:.4f}")
    if result.val_foreground_dice:
        step, dice = result.val_foreground_dice[-1]
        print(f"validation foreground dice at step {step + 1}: {dice:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _cmd_infer(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .functional import pad_volume_to_multiple
    from .synthetic import read_volume, write_volume
    from .tensor import Tensor, no_grad
    from .training import tta_predict

    cfg = _load_run_config(args.config)
    model = load_checkpoint(args.checkpoint, cfg.model)

    vol = read_volume(args.input).astype(np.float32)
    if vol.ndim == 3:
        vol = vol[None]
    if vol.ndim != 4 or vol.shape[0] != cfg.model.in_channels:
        raise ValueError(
            f"input volume has shape {vol.shape}; expected "
            f"({cfg.model.in_channels}, D, H, W)")
    orig = vol.shape[1:]

    x, _ = pad_volume_to_multiple(Tensor(vol[None]), 16)
    if args.tta:
        probs = tta_predict(model, x)
        labels = np.argmax(probs[0], axis=0)
    else:
        with no_grad():
            out = model.forward(x, training=False)
        labels = np.argmax(out.logits.data[0], axis=0)
    labels = labels[: orig[0], : orig[1], : orig[2]].astype(np.int32)
    write_volume(args.out, labels)
    print(f"wrote labels {labels.shape} to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from .benchmark import bench_model, compare_backends

    cfg = _load_run_config(args.config)
    shape = _parse_shape(args.input_shape, (cfg.data.volume_size,) * 3)

    if args.compare_backends:
        reports = compare_backends(cfg.model, shape, repeats=args.repeats,
                                   warmup=args.warmup, threads=args.threads)
        for name, report in reports.items():
            print(f"--- {name} ---")
            for line in report.lines():
                print(f"  {line}")
        return 0
    report = bench_model(cfg.model, shape, repeats=args.repeats, warmup=args.warmup,
                         threads=args.threads, batch=args.batch)
    for line in report.lines():
        print(line)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if getattr(args, "threads", None) is not None:
        _pin_threads(args.threads)
    elif args.command in ("bench", "gradcheck"):
        _pin_threads(1)

    from .checkpoint import CheckpointError
    from .model import ConfigError

    try:
        handler = {
            "describe": _cmd_describe,
            "gradcheck": _cmd_gradcheck,
            "train": _cmd_train,
            "infer": _cmd_infer,
            "bench": _cmd_bench,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
