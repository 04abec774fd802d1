"""Experiment orchestration: config handling, drivers, artifacts.

Every run writes one directory containing manifest.json (config echo, seed,
versions, wall time), a summary.json with the driver's assertion outcomes,
and plot-ready CSVs. Identical (config, seed) produce byte-identical CSVs
for any worker count. Exit codes: 0 ok, 1 config error, 2 runtime error,
3 assertion failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import PhiFunctional, limit_law_Zn, path_constancy, ratio_convergence, tail_fit
from .offspring import AssumptionError, check_assumptions, preset
from .walk import estimate_renewal, harmonicity_residuals, star_constants

COMMANDS = (
    "check-assumptions",
    "tail",
    "limit-law",
    "path-constancy",
    "walk-constants",
    "renewal-tables",
    "ratio-convergence",
)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    model: str = "uniform-unit"
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    chunk_size: int = 20_000
    outdir: str = "runs"
    run_dir: str | None = None
    # replicate budgets
    reps: int = 1_000_000
    samples: int = 100_000
    # grids
    n_grid: list = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    s_grid: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    k_max: int = 40
    # path-constancy
    delta: float = 0.25
    accept: int = 2000
    epsilon: float | None = None
    epsilon_factor: float = 0.2
    batch: int = 20_000
    max_batches: int = 5000
    max_pop: int = 1_000_000_000
    export_paths: bool = False
    # renewal tables
    side: str = "both"
    grid: list = field(default_factory=lambda: [round(0.0625 * i, 4) for i in range(53)])
    depth: int = 10_000
    harmonicity_xs: list = field(default_factory=list)
    outer_draws: int = 50_000
    # ratio-convergence functional
    alpha: list = field(default_factory=lambda: [1.0, 1.0])
    beta: list = field(default_factory=lambda: [1.0, 1.0])
    gamma: list = field(default_factory=lambda: [1.0, 1.0])
    # assertion tolerances
    slope_range: list = field(default_factory=lambda: [-1.6, -1.4])
    sup_floor: float = 0.02
    ratio_window: float = 0.05

    def as_dict(self) -> dict:
        return asdict(self)


_KNOWN_KEYS = {f.name for f in fields(ExperimentConfig)}


def load_config(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    unknown = set(data) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return data


def validate(config: ExperimentConfig) -> list[str]:
    """Semantic checks; returns human-readable diagnostics (empty = valid)."""
    problems = []
    if config.command not in COMMANDS:
        problems.append(f"command: unknown command {config.command!r}")
    try:
        model = preset(config.model, **config.overrides)
    except ValueError as exc:
        problems.append(f"model: {exc}")
        model = None
    if model is not None:
        if not (0.0 < model.chi < 0.5):
            problems.append(f"chi: must lie in (0, 1/2), got {model.chi}")
        for msg in model.a1_violations():
            problems.append(f"model bounds: {msg}")
    if not config.n_grid:
        problems.append("n_grid: must be a nonempty increasing list")
    elif list(config.n_grid) != sorted(set(int(v) for v in config.n_grid)):
        problems.append("n_grid: must be strictly increasing integers")
    elif int(config.n_grid[0]) < 1:
        problems.append("n_grid: horizons must be >= 1")
    if config.reps < 1:
        problems.append("reps: must be >= 1")
    if config.samples < 1:
        problems.append("samples: must be >= 1")
    if config.workers < 1:
        problems.append("workers: must be >= 1")
    if config.chunk_size < 1:
        problems.append("chunk_size: must be >= 1")
    if not (0.0 < config.delta < 0.5):
        problems.append(f"delta: must lie in (0, 1/2), got {config.delta}")
    if config.accept < 1:
        problems.append("accept: must be >= 1")
    if any(not (0.0 <= s <= 1.0) for s in config.s_grid):
        problems.append("s_grid: values must lie in [0, 1]")
    if config.command == "limit-law" and len(config.n_grid) != 2:
        problems.append("n_grid: limit-law needs exactly two horizons (n, 2n)")
    if config.command == "tail" and config.n_grid and len(config.n_grid) >= 1:
        if len(config.n_grid) < 2 or config.n_grid[-1] < 10 * config.n_grid[0]:
            problems.append("n_grid: tail fit needs a grid spanning at least one decade")
    if config.side not in ("both", "plus", "minus"):
        problems.append(f"side: must be both/plus/minus, got {config.side!r}")
    if config.grid and (sorted(config.grid) != list(config.grid) or config.grid[0] < 0):
        problems.append("grid: must be sorted and nonnegative")
    if config.depth < 1:
        problems.append("depth: must be >= 1")
    for name in ("alpha", "beta", "gamma"):
        vals = getattr(config, name)
        if len(vals) != 2 or any(v <= 0 for v in vals):
            problems.append(f"{name}: needs two positive values")
    return problems


# --- deterministic serialization ------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(v):
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v)}")


def _run_dir(config: ExperimentConfig) -> Path:
    if config.run_dir:
        path = Path(config.run_dir)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        tag = hashlib.sha256(str(config.seed).encode()).hexdigest()[:6]
        path = Path(config.outdir) / f"{config.command}-{stamp}-{tag}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- drivers --------------------------------------------------------------------


def _cmd_check_assumptions(config, model, outdir) -> tuple[dict, bool]:
    try:
        report = check_assumptions(model, config.samples, seed=config.seed)
    except AssumptionError as exc:
        summary = {"a1": {"pass": False, "detail": str(exc)}, "all_pass": False}
        return summary, False
    return report.as_dict(), report.all_pass


def _cmd_tail(config, model, outdir) -> tuple[dict, bool]:
    fit = tail_fit(
        model, config.n_grid, config.reps,
        seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
    )
    write_csv(
        outdir / "tail.csv",
        ["n", "p_hat", "stderr", "scaled", "scaled_stderr", "replicates"],
        [
            (int(n), p, se, sc, ssc, fit.replicates)
            for n, p, se, sc, ssc in zip(fit.n_grid, fit.p, fit.stderr, fit.scaled, fit.scaled_stderr)
        ],
    )
    gap, gap_se = fit.stabilization_gap()
    lo, hi = config.slope_range
    slope_ok = lo <= fit.slope <= hi
    stab_ok = abs(gap) <= 3.0 * gap_se
    summary = {
        "slope": fit.slope,
        "slope_se": fit.slope_se,
        "slope_ci": list(fit.slope_ci),
        "intercept": fit.intercept,
        "intercept_se": fit.intercept_se,
        "tail_constant_estimate": float(fit.scaled[-1]),
        "stabilization_gap": gap,
        "stabilization_3sigma": 3.0 * gap_se,
        "assertions": {"slope_in_range": bool(slope_ok), "scaled_stabilized": bool(stab_ok)},
    }
    return summary, bool(slope_ok and stab_ok)


def _cmd_limit_law(config, model, outdir) -> tuple[dict, bool]:
    res = limit_law_Zn(
        model, (config.n_grid[0], config.n_grid[1]),
        s_grid=config.s_grid, k_max=config.k_max, replicates=config.reps,
        seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
    )
    tol = np.maximum(config.sup_floor, 3.0 * res.combined_stderr)
    write_csv(
        outdir / "limit-law.csv",
        ["s", "ratio_lo", "stderr_lo", "ratio_hi", "stderr_hi", "abs_diff", "tolerance",
         "replicates"],
        [
            (s, res.ratios[0][j], res.stderr[0][j], res.ratios[1][j], res.stderr[1][j],
             res.distances[j], tol[j], res.replicates[0])
            for j, s in enumerate(res.s_grid)
        ],
    )
    write_csv(
        outdir / "limit-law-pmf.csv",
        ["k", "pmf_lo", "stderr_lo", "pmf_hi", "stderr_hi"],
        [
            (int(k), res.pmf[0][j], res.pmf_stderr[0][j], res.pmf[1][j], res.pmf_stderr[1][j])
            for j, k in enumerate(res.pmf_k)
        ],
    )
    ok = res.passes(config.sup_floor)
    summary = {
        "n_pair": list(res.n_pair),
        "sup_distance": res.sup_distance,
        "endpoint_zero": float(res.ratios[0][res.s_grid == 0.0][0]) if np.any(res.s_grid == 0.0) else None,
        "endpoint_one": float(res.ratios[0][res.s_grid == 1.0][0]) if np.any(res.s_grid == 1.0) else None,
        "assertions": {"sup_distance_within_tolerance": bool(ok)},
    }
    return summary, bool(ok)


def _cmd_path_constancy(config, model, outdir) -> tuple[dict, bool]:
    res, ensembles = path_constancy(
        model, config.n_grid, config.delta, config.accept,
        seed=config.seed, epsilon=config.epsilon, epsilon_factor=config.epsilon_factor,
        batch=config.batch, max_batches=config.max_batches, max_pop=config.max_pop,
        workers=config.workers, keep_paths=True,
    )
    write_csv(
        outdir / "path-constancy.csv",
        ["n", "epsilon", "exceedance", "stderr", "accepted", "attempts", "discards"],
        [
            (int(n), res.epsilon, p, se, int(a), int(att), int(d))
            for n, p, se, a, att, d in zip(
                res.n_grid, res.exceedance, res.stderr, res.accepted, res.attempts, res.discards
            )
        ],
    )
    if config.export_paths:
        for paths in ensembles:
            with open(outdir / f"paths-n{paths.n}.jsonl", "w") as fh:
                for i in range(paths.accepted):
                    fh.write(json.dumps({
                        "seed": paths.seed, "n": paths.n,
                        "z": paths.z[i].tolist(), "s": paths.s[i].tolist(),
                    }, sort_keys=True) + "\n")
    ok = res.monotone_pass()
    summary = {
        "delta": res.delta,
        "epsilon": res.epsilon,
        "exceedance": res.exceedance.tolist(),
        "stderr": res.stderr.tolist(),
        "partial": bool(res.partial),
        "assertions": {"exceedance_monotone_1sigma": bool(ok)},
    }
    return summary, bool(ok)


def _cmd_walk_constants(config, model, outdir) -> tuple[dict, bool]:
    st = star_constants(
        model, config.n_grid, config.reps,
        seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
    )
    write_csv(
        outdir / "walk-constants.csv",
        ["n", "k1", "k1_stderr", "k1_scaled", "k1_scaled_stderr",
         "k2", "k2_stderr", "k2_scaled", "k2_scaled_stderr"],
        [
            (int(n), st.k1[i], st.k1_stderr[i], st.scaled_k1[i], st.scaled_k1_stderr[i],
             st.k2[i], st.k2_stderr[i], st.scaled_k2[i], st.scaled_k2_stderr[i])
            for i, n in enumerate(st.n_grid)
        ],
    )
    r1, r1_se = st.consecutive_ratios("k1")
    ok = abs(r1[-1] - 1.0) <= config.ratio_window + 3.0 * r1_se[-1]
    summary = {
        "last_ratio_k1": float(r1[-1]),
        "last_ratio_k1_se": float(r1_se[-1]),
        "window": config.ratio_window,
        "assertions": {"scaled_k1_ratio_near_one": bool(ok)},
    }
    return summary, bool(ok)


def _cmd_renewal_tables(config, model, outdir) -> tuple[dict, bool]:
    summary = {"assertions": {}}
    ok = True
    sides = ("plus", "minus") if config.side == "both" else (config.side,)
    for side in sides:
        if side == "plus" and config.harmonicity_xs:
            table, rep = harmonicity_residuals(
                model, config.harmonicity_xs, config.grid, depth=config.depth,
                replicates=config.reps, outer_draws=config.outer_draws,
                seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
            )
            passed = rep.passes(3.0)
            summary["harmonicity"] = {
                "xs": rep.xs.tolist(),
                "residual": rep.residual.tolist(),
                "stderr": rep.stderr.tolist(),
                "max_abs_sigma": rep.max_abs_sigma,
            }
            summary["assertions"]["harmonicity_within_3_sigma"] = bool(passed)
            ok = ok and passed
        else:
            table = estimate_renewal(
                model, side, config.grid, depth=config.depth, replicates=config.reps,
                seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
            )
        name = "u" if side == "plus" else "v"
        write_csv(
            outdir / f"renewal-{name}.csv",
            ["x", "value", "stderr", "K", "N"],
            [
                (x, v, se, table.depth, table.replicates)
                for x, v, se in zip(table.grid, table.values, table.stderr)
            ],
        )
        summary[f"{name}_at_zero"] = float(table.values[0])
        mono = bool(np.all(np.diff(table.partials, axis=0) >= -1e-12))
        summary["assertions"][f"{name}_partial_sums_monotone"] = mono
        ok = ok and mono
    return summary, bool(ok)


def _cmd_ratio_convergence(config, model, outdir) -> tuple[dict, bool]:
    functional = PhiFunctional(
        alpha=tuple(config.alpha), beta=tuple(config.beta), gamma=tuple(config.gamma)
    )
    res = ratio_convergence(
        model, functional, config.n_grid, config.reps,
        seed=config.seed, chunk_size=config.chunk_size, workers=config.workers,
    )
    write_csv(
        outdir / "ratio-convergence.csv",
        ["n", "ratio", "stderr", "replicates"],
        [(int(n), res.ratio[i], res.stderr[i], res.replicates) for i, n in enumerate(res.n_grid)],
    )
    ok = res.stabilization_pass() and res.bound_pass()
    summary = {
        "bound": res.bound,
        "ratios": res.ratio.tolist(),
        "assertions": {
            "last_two_within_3_sigma": bool(res.stabilization_pass()),
            "below_uniform_bound": bool(res.bound_pass()),
        },
    }
    return summary, bool(ok)


_DRIVERS = {
    "check-assumptions": _cmd_check_assumptions,
    "tail": _cmd_tail,
    "limit-law": _cmd_limit_law,
    "path-constancy": _cmd_path_constancy,
    "walk-constants": _cmd_walk_constants,
    "renewal-tables": _cmd_renewal_tables,
    "ratio-convergence": _cmd_ratio_convergence,
}


def run(config: ExperimentConfig) -> int:
    """Execute one command; writes artifacts, returns the process exit code."""
    problems = validate(config)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    model = preset(config.model, **config.overrides)
    outdir = _run_dir(config)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.time()
    try:
        summary, passed = _DRIVERS[config.command](config, model, outdir)
    except Exception as exc:  # noqa: BLE001 - boundary: report and signal failure
        write_json(outdir / "manifest.json", {
            "command": config.command, "config": config.as_dict(), "error": repr(exc),
            "started_at": started, "versions": _versions(),
        })
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    summary["passed"] = bool(passed)
    write_json(outdir / "summary.json", summary)
    write_json(outdir / "manifest.json", {
        "command": config.command,
        "config": config.as_dict(),
        "seed": config.seed,
        "versions": _versions(),
        "started_at": started,
        "wall_time_s": time.time() - t0,
    })
    print(f"{config.command}: {'ok' if passed else 'ASSERTION FAILED'} -> {outdir}")
    return 0 if passed else 3


def _versions() -> dict:
    return {
        "package": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }


# --- argument parsing -------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _parse_override(text: str) -> tuple[str, float]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("override must look like key=value")
    key, val = text.split("=", 1)
    return key.strip(), float(val)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bprelab",
        description="Experiment drivers for extinction-time conditioned branching "
        "processes in random environment.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its fields")
        p.add_argument("--model", help="model preset name")
        p.add_argument("--override", action="append", type=_parse_override, default=None,
                       metavar="KEY=VAL", help="model parameter override (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--chunk-size", type=int, dest="chunk_size")
        p.add_argument("--outdir")
        p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("check-assumptions", help="verify model assumptions")
    common(p)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("tail", help="extinction-time tail exponent fit")
    common(p)
    p.add_argument("--n", type=_int_list, dest="n_grid")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("limit-law", help="conditional law of the final population")
    common(p)
    p.add_argument("--n", type=_int_list, dest="n_grid", help="two horizons, e.g. 256,512")
    p.add_argument("--s-grid", type=_float_list, dest="s_grid")
    p.add_argument("--k-max", type=int, dest="k_max")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("path-constancy", help="rescaled-path constancy by rejection sampling")
    common(p)
    p.add_argument("--n", type=_int_list, dest="n_grid")
    p.add_argument("--delta", type=float)
    p.add_argument("--accept", type=int, help="target accepted paths per horizon")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--epsilon-factor", type=float, dest="epsilon_factor")
    p.add_argument("--batch", type=int)
    p.add_argument("--max-batches", type=int, dest="max_batches")
    p.add_argument("--max-pop", type=int, dest="max_pop")
    p.add_argument("--export-paths", action="store_true", dest="export_paths", default=None)

    p = sub.add_parser("walk-constants", help="fluctuation weights on an n-grid")
    common(p)
    p.add_argument("--n", type=_int_list, dest="n_grid")
    p.add_argument("--reps", type=int)

    p = sub.add_parser("renewal-tables", help="renewal function tables and harmonicity")
    common(p)
    p.add_argument("--side", choices=["both", "plus", "minus"])
    p.add_argument("--grid", type=_float_list)
    p.add_argument("--depth", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--harmonicity-xs", type=_float_list, dest="harmonicity_xs")
    p.add_argument("--outer-draws", type=int, dest="outer_draws")

    p = sub.add_parser("ratio-convergence", help="stay-positive weighted ratio stabilization")
    common(p)
    p.add_argument("--n", type=_int_list, dest="n_grid")
    p.add_argument("--reps", type=int)
    p.add_argument("--alpha", type=_float_list)
    p.add_argument("--beta", type=_float_list)
    p.add_argument("--gamma", type=_float_list)

    p = sub.add_parser("validate", help="check a config without running")
    common(p)
    p.add_argument("--command-name", dest="command_name",
                   help="command the config is for (defaults to config file's)")
    for flag, typ in (("--n", _int_list), ("--reps", int), ("--samples", int),
                      ("--delta", float), ("--accept", int)):
        dest = "n_grid" if flag == "--n" else flag.lstrip("-")
        p.add_argument(flag, type=typ, dest=dest)

    return parser


def _merge_config(args: argparse.Namespace) -> ExperimentConfig:
    file_cfg = load_config(args.config) if getattr(args, "config", None) else {}
    command = args.command
    if command == "validate":
        command = getattr(args, "command_name", None) or file_cfg.get("command", "tail")
    merged = dict(file_cfg)
    merged["command"] = command
    for key, val in vars(args).items():
        if key in ("config", "command", "command_name") or val is None:
            continue
        if key == "override":
            merged["overrides"] = {**merged.get("overrides", {}), **dict(val)}
        else:
            merged[key] = val
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _merge_config(args)
    except (ConfigError, json.JSONDecodeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if args.command == "validate":
        problems = validate(config)
        for p in problems:
            print(f"invalid: {p}")
        if not problems:
            print("config ok")
        return 1 if problems else 0
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
