"""Command-line harness: fixtures, forward runs, gradient checks, scan benchmark, counts, diffs.

Exit codes: 0 success, 1 comparison or check failure, 2 usage error, 3 input inconsistency.
Structured output (JSON or CSV) goes to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .fixtures import (ManifestError, gen_fixtures, load_tensors, params_from_tensors, read_manifest,
                       targets_from_tensors, write_tensors)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INPUT = 0, 1, 2, 3

# Fields that fix parameter shapes; a fixture built under other values cannot be reused.
_SHAPE_FIELDS = ("image_h", "image_w", "channels", "heads", "points", "state_dim", "num_points",
                 "share_ss2d_paths")


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"textmamba: {msg}", file=sys.stderr)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"{path} not found")
    return RunConfig.load(p)


def _check_writable(out: str) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e.strerror or e}") from e
    return p


def cmd_gen_fixtures(args) -> int:
    cfg = _load_config(args.config)
    out = _check_writable(args.out)
    path = gen_fixtures(args.seed, out, cfg)
    _emit({"manifest": str(path), "seed": args.seed})
    return EXIT_OK


def check_fixture_config(cfg: RunConfig, manifest: dict) -> None:
    """Compare the run config with the config recorded when the fixtures were made."""
    fixture_cfg = manifest.get("config")
    if fixture_cfg is None:
        return
    for name in _SHAPE_FIELDS:
        if name in fixture_cfg and fixture_cfg[name] != getattr(cfg, name):
            raise ConfigError(name, f"config has {getattr(cfg, name)!r}, fixtures were built "
                                    f"with {fixture_cfg[name]!r}")
    for name in ("num_blocks", "decoder_layers"):
        if name in fixture_cfg and getattr(cfg, name) > fixture_cfg[name]:
            raise ConfigError(name, f"config asks for {getattr(cfg, name)}, fixtures provide "
                                    f"{fixture_cfg[name]}")


def run_forward(cfg: RunConfig, fixtures: str | Path):
    from .model import model_forward

    check_fixture_config(cfg, read_manifest(fixtures))
    tensors = load_tensors(fixtures)
    targets = targets_from_tensors(cfg, tensors)
    params = params_from_tensors(cfg, tensors)
    tokens = cfg.num_tokens
    if cfg.num_proposals > tokens:
        raise ConfigError("num_proposals", f"{cfg.num_proposals} exceeds the {tokens} encoder tokens")
    image = tensors["image"].astype(cfg.np_dtype)
    return model_forward(image, params, cfg, targets)


def forward_tensors(out) -> dict[str, np.ndarray]:
    loss = out.loss
    return {
        "scores": out.scores,
        "proposal_indices": out.indices.astype(np.float64),
        "masks": out.masks,
        "priors": out.priors,
        "control_points": out.points,
        "loss.total": np.array(loss.total),
        "loss.cls": np.array(loss.cls),
        "loss.seg": np.array(loss.seg),
        "loss.reg": np.array(loss.reg),
    }


def cmd_forward(args) -> int:
    cfg = _load_config(args.config)
    out_dir = _check_writable(args.out)
    out = run_forward(cfg, args.fixtures)
    tensors = forward_tensors(out)
    write_tensors(out_dir, tensors, seed=cfg.seed, extra={"config": cfg.to_dict()})
    loss = out.loss
    _emit({"loss": {"total": loss.total, "cls": loss.cls, "seg": loss.seg, "reg": loss.reg},
           "shapes": {k: list(v.shape) for k, v in tensors.items()},
           "out": str(out_dir)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import MODULES, default_tol, run_gradcheck

    if args.module not in MODULES:
        raise UsageError(f"unknown module {args.module!r}; valid: {', '.join(MODULES)}")
    tol = default_tol(args.module) if args.tol is None else args.tol
    report = run_gradcheck(args.module, eps=args.eps)
    ok = report.passed(tol)
    _emit({"module": args.module, "tol": tol, "passed": ok, **report.to_dict()})
    if report.nonfinite:
        _err(f"{len(report.nonfinite)} of {report.probes} probes skipped (non-finite f)")
    return EXIT_OK if ok else EXIT_FAIL


def _parse_lengths(text: str) -> list[int]:
    try:
        lengths = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"--lengths must be comma-separated integers: {text!r}") from e
    if not lengths or lengths != sorted(lengths) or lengths[0] < 1:
        raise UsageError("--lengths must be positive and sorted ascending")
    return lengths


def cmd_bench_scan(args) -> int:
    from .bench import bench_scan, rows_to_csv

    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    rows = bench_scan(_parse_lengths(args.lengths), args.state, args.channels, args.reps)
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import param_counts

    _emit(param_counts(_load_config(args.config)))
    return EXIT_OK


def compare_dirs(golden: str | Path, candidate: str | Path, tol: float = 0.0) -> dict:
    """Per-tensor max absolute / relative deviation. ``tol=0`` demands bit-identical values."""
    g = load_tensors(golden)
    c = load_tensors(candidate)
    report = {"tol": tol, "missing": sorted(set(g) - set(c)), "unexpected": sorted(set(c) - set(g)),
              "tensors": {}, "failed": []}
    for name in sorted(set(g) & set(c)):
        a, b = g[name], c[name]
        if a.shape != b.shape or a.dtype != b.dtype:
            report["tensors"][name] = {"shape_golden": list(a.shape), "shape_candidate": list(b.shape),
                                       "dtype_golden": str(a.dtype), "dtype_candidate": str(b.dtype)}
            report["failed"].append(name)
            continue
        if tol == 0:
            same = a.tobytes() == b.tobytes()
        diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
        max_abs = float(diff.max()) if diff.size else 0.0
        scale = float(np.abs(a).max()) if a.size else 0.0
        max_rel = max_abs / scale if scale > 0 else max_abs
        report["tensors"][name] = {"max_abs": max_abs, "max_rel": max_rel}
        if (tol == 0 and not same) or (tol > 0 and max_abs > tol):
            report["failed"].append(name)
    report["passed"] = not (report["missing"] or report["unexpected"] or report["failed"])
    return report


def cmd_compare(args) -> int:
    report = compare_dirs(args.golden, args.candidate, args.tol)
    _emit(report)
    if not report["passed"]:
        for key in ("missing", "unexpected", "failed"):
            if report[key]:
                _err(f"{key}: {', '.join(report[key])}")
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="textmamba", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-fixtures", help="write seeded image, ground truth and parameters")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config JSON (defaults if omitted)")
    p.set_defaults(func=cmd_gen_fixtures)

    p = sub.add_parser("forward", help="run the detector on a fixture directory")
    p.add_argument("--config", required=True)
    p.add_argument("--fixtures", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("gradcheck", help="finite-difference check of one module")
    p.add_argument("--module", required=True)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=None, help="default 1e-4 (1e-3 for e2e)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="sequential vs parallel scan timing (CSV)")
    p.add_argument("--lengths", required=True, help="comma-separated, ascending")
    p.add_argument("--state", type=int, default=16)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("params", help="per-module scalar parameter counts")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("compare", help="diff two tensor directories")
    p.add_argument("--golden", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--tol", type=float, default=0.0)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        _err(str(e))
        return EXIT_USAGE
    except (ConfigError, ManifestError) as e:
        _err(f"input inconsistency: {e}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
