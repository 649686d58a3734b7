"""Command-line interface.

Exit codes: 0 success, 1 validation/configuration error, 2 format error,
3 numeric or convergence failure. Every run echoes its resolved
configuration to stderr as one JSON line for reproducibility. Command
output goes to stdout (JSON where the output is structured).

REPSF_THREADS caps BLAS worker threads for the whole process. Results do
not depend on it: the convolution kernels already pin their reductions to a
deterministic order.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__
from . import io as rio
from .density import DensityMap, GaussianConfig, align_to_output, generate_density
from .errors import (
    FormatError,
    NumericError,
    RepsfError,
    StateError,
    ValidationError,
)
from .loss import SinkhornConfig, eval_metrics, total_loss
from .model import (
    ModelConfig,
    build_model,
    config_from_dict,
    load_model,
    merge_model,
    model_macs,
    model_params,
    repsfnet_forward,
    save_model,
)
from .prng import SplitMix64
from .reparam import equivalence_check
from .tensor import Tensor4

REFERENCE_PARAMS_M = 26.06  # reference design targets printed by `stats`
REFERENCE_MACS_G = 62.59


class _Parser(argparse.ArgumentParser):
    """argparse variant honoring the exit-code contract (usage errors -> 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    print(json.dumps({"resolved_config": resolved}, sort_keys=True), file=sys.stderr)


def _parse_size(text: str) -> tuple[int, int]:
    """'WxH' -> (h, w); the first number is the image width."""
    try:
        w_str, h_str = text.lower().split("x")
        w, h = int(w_str), int(h_str)
    except ValueError:
        raise ValidationError(f"size must look like 640x480, got {text!r}") from None
    if w < 1 or h < 1:
        raise ValidationError(f"size must be positive, got {text!r}")
    return h, w


def _load_config(path, seed) -> ModelConfig:
    if path is None:
        cfg = ModelConfig()
    else:
        with open(path, "rb") as fh:
            try:
                doc = json.loads(fh.read().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"config is not valid JSON: {exc}") from None
        cfg = config_from_dict(doc)
    if seed is not None:
        cfg = ModelConfig(
            backbone=replace(cfg.backbone, seed=seed), fusion=cfg.fusion
        )
    return cfg


def _dtype_of(name: str):
    return np.float64 if name == "float64" else np.float32


def _load_map(path) -> DensityMap:
    arr = rio.load_tensor(path)
    if arr.ndim == 4 and arr.shape[:2] == (1, 1):
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected a 2-D density map, got shape {arr.shape}")
    return DensityMap(arr)


def cmd_init(args) -> int:
    cfg = _load_config(args.config, args.seed)
    model = build_model(cfg, dtype=_dtype_of(args.dtype))
    save_model(args.out, model, merged=False)
    print(json.dumps({
        "written": str(args.out),
        "seed": cfg.seed,
        "params": model_params(model, merged=False),
    }))
    return 0


def cmd_forward(args) -> int:
    model = load_model(args.weights)
    arr = rio.load_tensor(args.input)
    if arr.ndim != 4:
        raise ValidationError(f"input tensor must be 4-D (1,3,H,W), got shape {arr.shape}")
    image = Tensor4.from_array(arr.astype(model.dtype, copy=False))
    if args.merged and not model.merged:
        merge_model(model)
    dm = repsfnet_forward(image, model, merged=args.merged or model.merged, method=args.method)
    rio.save_tensor(args.out, dm.values)
    print(json.dumps({"written": str(args.out), "shape": [dm.h, dm.w], "count": dm.count()}))
    return 0


def cmd_reparam(args) -> int:
    model = load_model(args.weights)
    if model.merged:
        raise ValidationError("input bundle is already merged")
    merge_model(model)
    save_model(args.out, model, merged=True)
    print(json.dumps({
        "written": str(args.out),
        "params_branch": model_params(model, merged=False),
        "params_merged": model_params(model, merged=True),
    }))
    return 0


def cmd_equiv(args) -> int:
    model = load_model(args.weights)
    if model.merged:
        raise ValidationError("equivalence needs a branch-form bundle")
    if args.merged:
        other = load_model(args.merged)
        if not other.merged:
            raise ValidationError("--merged bundle does not carry merged weights")
        if other.config != model.config:
            raise ValidationError("--merged bundle was built from a different config")
        for stage, ostage in zip(model.backbone.stages, other.backbone.stages):
            for block, oblock in zip(stage.blocks, ostage.blocks):
                block.merged = oblock.merged
                block.rep.merged = oblock.merged
    else:
        merge_model(model)
    reports = []
    all_passed = True
    for si, stage in enumerate(model.backbone.stages):
        for bi, block in enumerate(stage.blocks):
            rep = equivalence_check(
                block.rep, trials=args.trials, tol=args.tol,
                seed=args.seed + 1000 * si + bi, spatial=args.spatial,
            )
            reports.append({"block": f"stages.{si}.blocks.{bi}", **asdict(rep)})
            all_passed &= rep.passed
    side = 32 * max(1, (max(model.config.backbone.stage_kernels) + 31) // 32)
    rng = SplitMix64(args.seed)
    img = rng.uniform(3 * side * side, -1.0, 1.0).reshape(1, 3, side, side)
    image = Tensor4(img.astype(model.dtype))
    branch = repsfnet_forward(image, model, merged=False)
    merged = repsfnet_forward(image, model, merged=True)
    e2e = float(np.max(np.abs(branch.values - merged.values)))
    e2e_passed = e2e <= args.tol
    all_passed &= e2e_passed
    print(json.dumps({
        "blocks": reports,
        "end_to_end": {"input": [1, 3, side, side], "max_abs_diff": e2e,
                        "tolerance": args.tol, "passed": e2e_passed},
        "passed": all_passed,
    }, indent=2))
    if not all_passed:
        raise NumericError(f"equivalence failed: end-to-end diff {e2e:.3e} > {args.tol}")
    return 0


def cmd_gen_density(args) -> int:
    ann = rio.load_annotations(args.ann)
    mode = "adaptive" if args.adaptive else "fixed"
    if args.adaptive and len(ann) < 2:
        print("warning: fewer than 2 points; falling back to fixed sigma", file=sys.stderr)
    cfg = GaussianConfig(
        mode=mode, sigma=args.sigma, truncation=args.truncation,
        k_nn=args.k, beta=args.beta,
    )
    dm = generate_density(ann, cfg)
    if args.stride and args.stride > 1:
        dm = align_to_output(dm, args.stride)
    rio.save_tensor(args.out, dm.values)
    if args.pgm:
        rio.export_pgm(dm, args.pgm, scale="auto")
    print(f"count {dm.count():.6f}")
    print(json.dumps({"written": str(args.out), "shape": [dm.h, dm.w],
                      "points": len(ann), "count": dm.count()}))
    return 0


def cmd_loss(args) -> int:
    pred = _load_map(args.pred)
    gt = _load_map(args.gt)
    cfg = SinkhornConfig(epsilon=args.epsilon, max_iters=args.iters, tolerance=args.tol)
    report = total_loss(pred, gt, cfg, count_mode=args.count_mode)
    print(json.dumps(asdict(report)))
    if not report.converged:
        raise NumericError(
            f"Sinkhorn did not reach tolerance {args.tol} in {args.iters} iterations"
        )
    return 0


def cmd_eval(args) -> int:
    def load_counts(path):
        with open(path, "rb") as fh:
            try:
                doc = json.loads(fh.read().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: not valid JSON: {exc}") from None
        if not isinstance(doc, list) or not all(isinstance(v, (int, float)) for v in doc):
            raise FormatError(f"{path}: expected a JSON array of numbers")
        return doc

    report = eval_metrics(load_counts(args.pred_list), load_counts(args.gt_list))
    print(json.dumps(asdict(report)))
    return 0


def cmd_stats(args) -> int:
    cfg = _load_config(args.config, None)
    h, w = _parse_size(args.size)
    model = build_model(cfg, dtype=_dtype_of(args.dtype))
    params_b = model_params(model, merged=False)
    params_m = model_params(model, merged=True)
    macs_b = model_macs(model, h, w, merged=False)
    macs_m = model_macs(model, h, w, merged=True)
    doc = {
        "size": args.size,
        "params": {"branch": params_b, "merged": params_m},
        "macs": {"branch": macs_b, "merged": macs_m},
        "reference": {"params_m": REFERENCE_PARAMS_M, "macs_g": REFERENCE_MACS_G},
        "gap": {
            "params_m": round(params_m / 1e6 - REFERENCE_PARAMS_M, 3),
            "macs_g": round(macs_m / 1e9 - REFERENCE_MACS_G, 3),
        },
    }
    print(json.dumps(doc, indent=2))
    print(
        f"params: {params_m / 1e6:.2f} M merged ({params_b / 1e6:.2f} M branch) "
        f"vs reference {REFERENCE_PARAMS_M:.2f} M | "
        f"macs @{args.size}: {macs_m / 1e9:.2f} G merged ({macs_b / 1e9:.2f} G branch) "
        f"vs reference {REFERENCE_MACS_G:.2f} G",
        file=sys.stderr,
    )
    return 0


def cmd_bench(args) -> int:
    model = load_model(args.weights)
    h, w = _parse_size(args.size)
    rng = SplitMix64(args.seed)
    img = rng.uniform(3 * h * w, -1.0, 1.0).reshape(1, 3, h, w)
    image = Tensor4(img.astype(model.dtype))

    def time_mode(merged: bool):
        for _ in range(args.warmup):
            repsfnet_forward(image, model, merged=merged, method=args.method)
        samples = []
        for _ in range(args.runs):
            t0 = time.perf_counter()
            repsfnet_forward(image, model, merged=merged, method=args.method)
            samples.append((time.perf_counter() - t0) * 1e3)
        ordered = sorted(samples)
        p95 = ordered[min(len(ordered) - 1, int(round(0.95 * (len(ordered) - 1))))]
        return {"median_ms": statistics.median(samples), "p95_ms": p95, "runs": args.runs}

    doc = {"size": args.size}
    if not model.merged:
        doc["branch"] = time_mode(False)
        merge_model(model)
    doc["merged"] = time_mode(True)
    print(json.dumps(doc, indent=2))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="repsf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"repsf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="build a seeded model and write a weight bundle")
    p.add_argument("--config", default=None, help="model config JSON (defaults built in)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("forward", help="run an image tensor through a bundle")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True, help="image tensor (.rsft, 1x3xHxW)")
    p.add_argument("--out", required=True, help="density-map tensor to write")
    p.add_argument("--merged", action="store_true", help="use single-kernel forms")
    p.add_argument("--method", choices=["gemm", "naive"], default="gemm")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("reparam", help="merge branches and write an inference bundle")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("equiv", help="certify merged == branch on random inputs")
    p.add_argument("--weights", required=True, help="branch-form bundle")
    p.add_argument("--merged", default=None,
                   help="merged bundle to verify (default: merge in memory)")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spatial", type=int, default=None, help="per-block input size")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("gen-density", help="point annotations -> density map")
    p.add_argument("--ann", required=True, help="annotation JSON")
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--truncation", type=float, default=4.0)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--stride", type=int, default=None, help="sum-pool to this stride")
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", default=None, help="also write a 16-bit PGM preview")
    p.set_defaults(func=cmd_gen_density)

    p = sub.add_parser("loss", help="counting + OT loss between two maps")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--count-mode", choices=["l1", "l2"], default="l1")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("eval", help="MAE / MSE over predicted vs true counts")
    p.add_argument("--pred-list", required=True)
    p.add_argument("--gt-list", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="parameter and MAC report vs reference")
    p.add_argument("--config", default=None)
    p.add_argument("--size", required=True, help="input size as WxH, e.g. 640x480")
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="forward-pass latency (branch and merged)")
    p.add_argument("--weights", required=True)
    p.add_argument("--size", required=True, help="input size as WxH")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["gemm", "naive"], default="gemm")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("REPSF_THREADS")
    if threads:
        try:
            limit = max(1, int(threads))
        except ValueError:
            print(f"repsf: invalid REPSF_THREADS={threads!r}", file=sys.stderr)
            return 1
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=limit, user_api="blas")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors / --version
        return int(exc.code or 0)
    _echo_config(args)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"repsf: format error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"repsf: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, StateError) as exc:
        print(f"repsf: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"repsf: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except RepsfError as exc:  # anything else package-defined is a validation failure
        print(f"repsf: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
