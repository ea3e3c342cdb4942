"""Command-line front end over CSV/JSON files.

Subcommands: validate, calibrate, estimate, tune, ate, simulate.
Exit codes: 0 success, 1 usage error, 2 solver non-convergence,
3 data validation failure.

Every run writes a manifest sidecar recording the command, input file
hashes, parsed options, package version, seed and a convergence
summary; data artifacts embed the manifest hash (a JSON field, or a
leading ``# manifest_hash=...`` comment line in CSV).  The hash covers
only the deterministic manifest fields, so identical inputs give
byte-identical artifacts.  All floating-point output uses 17
significant digits for exact round-trips.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import pandas as pd

from . import __version__
from .calibrate import SolverOptions, build_soft_targets, solve_newton
from .cluster import CausalFrame, ClusterDesign, causal_ate, cluster_estimate, cluster_pseudo_values, cluster_variance
from .core import (
    InvalidFrameError,
    MixedEffectsSpec,
    PopulationFrame,
    SoftCalError,
    validate_frame,
)
from .estimate import estimate_report, weighted_mean
from .loss import FAMILY_ALIASES, LossSpec
from .sim import MetricsTable, ScenarioConfig, run_monte_carlo
from .tune import TuneError, select_gamma

from scipy import stats


# ---------------------------------------------------------------------------
# CSV ingestion (one row per population unit)
# ---------------------------------------------------------------------------


def read_frame_csv(path: str) -> tuple[PopulationFrame, dict[str, np.ndarray]]:
    """Read a population CSV: delta, y, optional q, x1_*, x2_* columns.

    Two-stage and causal files add ``cluster``, ``d_i``, ``N_i`` and
    ``A`` columns, returned in the extras dict.
    """
    df = pd.read_csv(path, comment="#")
    if "delta" not in df.columns:
        raise InvalidFrameError("CSV must contain a 'delta' column")
    x1_cols = [c for c in df.columns if c.startswith("x1_")]
    x2_cols = [c for c in df.columns if c.startswith("x2_")]
    if not x1_cols:
        raise InvalidFrameError("CSV must contain x1_* columns")
    delta = df["delta"].to_numpy()
    y = df["y"].to_numpy(dtype=float) if "y" in df.columns else None
    q = df["q"].to_numpy(dtype=float) if "q" in df.columns else None
    frame = PopulationFrame(
        x1=df[x1_cols].to_numpy(dtype=float),
        x2=df[x2_cols].to_numpy(dtype=float) if x2_cols else np.zeros((len(df), 0)),
        delta=delta,
        y=y,
        q_scale=q,
    )
    extras = {
        name: df[name].to_numpy()
        for name in ("cluster", "d_i", "N_i", "A")
        if name in df.columns
    }
    return frame, extras


def write_frame_csv(path: str, frame: PopulationFrame, extras: dict | None = None) -> None:
    """Inverse of read_frame_csv, mostly for tests and data preparation."""
    data: dict[str, np.ndarray] = {"delta": frame.delta.astype(int)}
    if frame.y is not None:
        data["y"] = frame.y.filled(np.nan)
    data["q"] = frame.q_scale
    for j in range(frame.p):
        data[f"x1_{j}"] = frame.x1[:, j]
    for j in range(frame.q):
        data[f"x2_{j}"] = frame.x2[:, j]
    for name, col in (extras or {}).items():
        data[name] = col
    pd.DataFrame(data).to_csv(path, index=False, float_format="%.17g")


def design_from_extras(extras: dict[str, np.ndarray]) -> ClusterDesign:
    for col in ("cluster", "d_i", "N_i"):
        if col not in extras:
            raise InvalidFrameError(f"cluster design needs a '{col}' column")
    raw = extras["cluster"]
    labels, codes = np.unique(raw, return_inverse=True)
    k = len(labels)
    d_cluster = np.empty(k)
    n_pop = np.empty(k, dtype=int)
    for j in range(k):
        rows = codes == j
        d_vals = np.unique(extras["d_i"][rows])
        n_vals = np.unique(extras["N_i"][rows])
        if len(d_vals) != 1 or len(n_vals) != 1:
            raise InvalidFrameError(f"cluster {labels[j]!r} has mixed d_i or N_i values")
        d_cluster[j] = float(d_vals[0])
        n_pop[j] = int(n_vals[0])
    n_per = np.bincount(codes, minlength=k)
    return ClusterDesign(
        cluster_id=codes, d_cluster=d_cluster, n_per=n_per, n_pop_per=n_pop
    )


# ---------------------------------------------------------------------------
# manifest and deterministic serialization
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if np.isnan(x):
        return "NaN"
    if np.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(float(x), ".17g")


def _to_json(obj, indent: int = 0) -> str:
    """Minimal JSON emitter with 17-significant-digit floats."""
    pad = "  " * indent
    pad_in = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{pad_in}{json.dumps(str(k))}: {_to_json(v, indent + 1)}"
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{pad_in}{_to_json(v, indent + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    return json.dumps(str(obj))


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Provenance record for one CLI run."""

    def __init__(self, command: str, inputs: list[str], options: dict, seed):
        self.command = command
        self.inputs = {p: _file_sha256(p) for p in inputs}
        self.options = options
        self.version = __version__
        self.seed = seed
        self.started = time.time()
        self.convergence: dict = {}
        self.duration_seconds: float | None = None

    def hashed_payload(self) -> dict:
        # wall-clock duration is recorded but kept out of the hash so
        # identical runs produce byte-identical artifacts
        return {
            "command": self.command,
            "inputs": self.inputs,
            "options": self.options,
            "version": self.version,
            "seed": self.seed,
        }

    @property
    def hash(self) -> str:
        payload = json.dumps(self.hashed_payload(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def finish(self) -> None:
        self.duration_seconds = time.time() - self.started

    def write(self, artifact_path: str) -> None:
        if self.duration_seconds is None:
            self.finish()
        doc = dict(self.hashed_payload())
        doc["manifest_hash"] = self.hash
        doc["duration_seconds"] = self.duration_seconds
        doc["convergence"] = self.convergence
        with open(artifact_path + ".manifest.json", "w") as fh:
            fh.write(_to_json(doc) + "\n")


def _write_weights_csv(path: str, indices: np.ndarray, weights: np.ndarray, manifest: RunManifest) -> None:
    with open(path, "w") as fh:
        fh.write(f"# manifest_hash={manifest.hash}\n")
        fh.write("index,weight\n")
        for i, w in zip(indices, weights):
            fh.write(f"{int(i)},{_fmt_float(w)}\n")


# ---------------------------------------------------------------------------
# option parsing helpers
# ---------------------------------------------------------------------------


def _loss_from_args(args) -> LossSpec:
    if args.bounds is not None:
        lo, hi = (float(v) for v in args.bounds.split(","))
        return LossSpec(args.loss, lower=lo, upper=hi)
    return LossSpec(args.loss)


def _dq_from_args(args, q: int):
    if args.dq == "identity":
        return None
    return np.loadtxt(args.dq, delimiter=",")


def _seed_from_args(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get("SOFTCAL_SEED", "0"))


def _resolve_gamma(args, frame, loss_spec, spec, design_weights):
    if args.gamma == "auto":
        tuned = select_gamma(
            frame,
            loss_spec,
            spec,
            folds=args.folds,
            seed=_seed_from_args(args),
            design_weights=design_weights,
        )
        return tuned.gamma_selected
    return float(args.gamma)


def _load_problem(args):
    frame, extras = read_frame_csv(args.input)
    report = validate_frame(frame)
    if not report.passed:
        raise InvalidFrameError(str(report))
    design = None
    if getattr(args, "design", "unit") == "cluster":
        design = design_from_extras(extras)
    return frame, extras, design


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_validate(args) -> int:
    frame, _ = read_frame_csv(args.input)
    report = validate_frame(frame)
    print(str(report))
    return 0 if report.passed else 3


def _cmd_calibrate(args) -> int:
    frame, extras, design = _load_problem(args)
    loss_spec = _loss_from_args(args)
    d_ij = design.unit_weights() if design is not None else None
    dq = _dq_from_args(args, frame.q)

    manifest = RunManifest(
        "calibrate",
        [args.input],
        {
            "loss": loss_spec.family,
            "bounds": args.bounds,
            "gamma": args.gamma,
            "dq": args.dq,
            "design": args.design,
            "folds": args.folds,
        },
        _seed_from_args(args),
    )
    gamma = _resolve_gamma(args, frame, loss_spec, MixedEffectsSpec(d_q=dq), d_ij)
    spec = MixedEffectsSpec(d_q=dq, gamma=gamma)
    targets = build_soft_targets(frame, spec, d_ij)
    result = solve_newton(frame, loss_spec, targets, design_weights=d_ij)
    manifest.options["gamma_resolved"] = gamma
    manifest.convergence = {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "max_residual": result.max_residual,
    }
    indices = np.flatnonzero(frame.delta)
    _write_weights_csv(args.out, indices, result.weights, manifest)
    manifest.write(args.out)
    if not result.converged:
        print("solver did not converge; best iterate written", file=sys.stderr)
        return 2
    return 0


def _cmd_estimate(args) -> int:
    frame, extras, design = _load_problem(args)
    loss_spec = _loss_from_args(args)
    d_ij = design.unit_weights() if design is not None else None
    dq = _dq_from_args(args, frame.q)
    manifest = RunManifest(
        "estimate",
        [args.input],
        {
            "loss": loss_spec.family,
            "bounds": args.bounds,
            "gamma": args.gamma,
            "dq": args.dq,
            "design": args.design,
            "folds": args.folds,
            "level": args.level,
        },
        _seed_from_args(args),
    )
    gamma = _resolve_gamma(args, frame, loss_spec, MixedEffectsSpec(d_q=dq), d_ij)
    spec = MixedEffectsSpec(d_q=dq, gamma=gamma)
    targets = build_soft_targets(frame, spec, d_ij)
    result = solve_newton(frame, loss_spec, targets, design_weights=d_ij)
    manifest.options["gamma_resolved"] = gamma

    if design is not None:
        theta = cluster_estimate(frame, design, result)
        psi = cluster_pseudo_values(frame, design, result, loss_spec, targets)
        v1 = cluster_variance(
            frame, design, result, loss_spec, targets, pseudo_values=psi
        )
        v2 = 0.0
        z = stats.norm.ppf(0.5 + args.level / 2)
        half = z * float(np.sqrt(v1 / design.n))
        ci = [theta - half, theta + half]
        method = f"soft_{loss_spec.family}_cluster"
    else:
        report = estimate_report(
            frame, result, loss_spec, targets, level=args.level,
            method=f"soft_{loss_spec.family}",
        )
        theta, v1, v2 = report.theta, report.v1, report.v2
        ci = [report.ci_low, report.ci_high]
        method = report.method

    manifest.convergence = {
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
    }
    doc = {
        "theta": theta,
        "v1": v1,
        "v2": v2,
        "ci": ci,
        "method": method,
        "converged": bool(result.converged),
        "gamma": gamma,
        "manifest_hash": manifest.hash,
    }
    payload = _to_json(doc) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload)
        manifest.write(args.out)
    else:
        sys.stdout.write(payload)
    return 0 if result.converged else 2


def _cmd_tune(args) -> int:
    frame, extras, design = _load_problem(args)
    loss_spec = _loss_from_args(args)
    d_ij = design.unit_weights() if design is not None else None
    dq = _dq_from_args(args, frame.q)
    manifest = RunManifest(
        "tune",
        [args.input],
        {"loss": loss_spec.family, "bounds": args.bounds, "folds": args.folds,
         "design": args.design, "dq": args.dq},
        _seed_from_args(args),
    )
    tuned = select_gamma(
        frame,
        loss_spec,
        MixedEffectsSpec(d_q=dq),
        folds=args.folds,
        seed=_seed_from_args(args),
        design_weights=d_ij,
    )
    doc = {
        "gamma_star": tuned.gamma_star,
        "grid": list(tuned.grid),
        "mse": list(tuned.mse),
        "gamma_selected": tuned.gamma_selected,
        "folds": tuned.folds,
        "reml_boundary": bool(tuned.reml.boundary) if tuned.reml else None,
        "manifest_hash": manifest.hash,
    }
    payload = _to_json(doc) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload)
        manifest.write(args.out)
    else:
        sys.stdout.write(payload)
    return 0


def _cmd_ate(args) -> int:
    frame, extras, design = _load_problem(args)
    if design is None:
        raise InvalidFrameError("ate requires --design cluster")
    if "A" not in extras:
        raise InvalidFrameError("ate requires an 'A' treatment column")
    loss_spec = _loss_from_args(args)
    dq = _dq_from_args(args, frame.q)
    manifest = RunManifest(
        "ate",
        [args.input],
        {"loss": loss_spec.family, "bounds": args.bounds, "gamma": args.gamma,
         "folds": args.folds, "level": args.level, "dq": args.dq},
        _seed_from_args(args),
    )
    gamma = None if args.gamma == "auto" else float(args.gamma)
    report = causal_ate(
        frame,
        CausalFrame(extras["A"]),
        design,
        MixedEffectsSpec(d_q=dq),
        loss_spec,
        gamma=gamma,
        folds=args.folds,
        seed=_seed_from_args(args),
        level=args.level,
    )
    manifest.convergence = {"converged": bool(report.converged)}
    doc = {
        "theta": report.theta,
        "v1": report.v1,
        "v2": report.v2,
        "ci": [report.ci_low, report.ci_high],
        "method": report.method,
        "converged": bool(report.converged),
        "gamma": report.gamma,
        "manifest_hash": manifest.hash,
    }
    payload = _to_json(doc) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload)
        manifest.write(args.out)
    else:
        sys.stdout.write(payload)
    return 0 if report.converged else 2


def _cmd_simulate(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.workers is not None:
        raw["workers"] = args.workers
    if "estimators" in raw:
        raw["estimators"] = tuple(raw["estimators"])
    cfg = ScenarioConfig(**raw)
    manifest = RunManifest(
        "simulate", [args.config], {"workers": cfg.workers}, cfg.seed
    )
    table = run_monte_carlo(cfg)
    manifest.convergence = {
        "reps_used": table.reps_used,
        "failures": table.failures,
    }
    _write_metrics_csv(args.out, table, manifest)
    manifest.write(args.out)
    return 0


def _write_metrics_csv(path: str, table: MetricsTable, manifest: RunManifest) -> None:
    with open(path, "w") as fh:
        fh.write(f"# manifest_hash={manifest.hash}\n")
        fh.write("metric," + ",".join(table.estimators) + "\n")
        rows = [
            ("bias", table.bias),
            ("variance", table.variance),
            ("mse", table.mse),
            ("coverage", table.coverage),
        ]
        for name, values in rows:
            cells = ",".join(_fmt_float(values[e]) for e in table.estimators)
            fh.write(f"{name},{cells}\n")


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_common(sub, with_gamma=True):
    sub.add_argument("--input", required=True, help="population CSV")
    sub.add_argument(
        "--loss",
        required=True,
        choices=sorted(FAMILY_ALIASES) + sorted(set(FAMILY_ALIASES.values())),
        help="loss family (short or long name)",
    )
    sub.add_argument("--bounds", default=None, help="L,U for bounded families")
    if with_gamma:
        sub.add_argument("--gamma", default="auto", help="penalty value or 'auto'")
    sub.add_argument("--dq", default="identity", help="'identity' or CSV matrix path")
    sub.add_argument("--design", choices=["unit", "cluster"], default="unit")
    sub.add_argument("--folds", type=int, default=5)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--level", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softcal", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="check a population CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=_cmd_validate)

    p = subs.add_parser("calibrate", help="solve for calibration weights")
    _add_common(p)
    p.add_argument("--out", required=True, help="weights CSV path")
    p.set_defaults(func=_cmd_calibrate)

    p = subs.add_parser("estimate", help="point estimate with variance")
    _add_common(p)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=_cmd_estimate)

    p = subs.add_parser("tune", help="select the penalty by cross-fitted MSE")
    _add_common(p, with_gamma=False)
    p.add_argument("--out", default=None, help="result JSON path (default stdout)")
    p.set_defaults(func=_cmd_tune)

    p = subs.add_parser("ate", help="average treatment effect by per-arm calibration")
    _add_common(p)
    p.add_argument("--out", default=None, help="report JSON path (default stdout)")
    p.set_defaults(func=_cmd_ate)

    p = subs.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--config", required=True, help="scenario JSON")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    return parser


def dispatch(argv: list[str]) -> int:
    """Route argv to a subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except InvalidFrameError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 3
    except (SoftCalError, TuneError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
