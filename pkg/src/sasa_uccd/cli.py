"""Command-line front end: run experiments and write JSON/CSV results plus a manifest."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .closed_loop import ClosedLoopStats, build_reference, closed_loop_stats
from .formulations import (
    FormulationError,
    FormulationReport,
    solve_deterministic_ccd,
    solve_msc_wcr,
    solve_se_uccd,
    solve_wcr_olmc,
    sweep,
)
from .mcs import RNG_ALGORITHM
from .problem import ConfigError, SasaConfig, default_instance
from .transcription import NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_SOLVE = 0, 2, 3
THREADS_ENV = "SASA_UCCD_THREADS"


class PlotDataError(ValueError):
    """The report lacks the artifact needed for the requested plot data."""


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# serialization helpers


def _clean(obj: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(report: FormulationReport | ClosedLoopStats | list[dict[str, Any]], kind: str, out: Path) -> list[Path]:
    """Write tidy CSVs for one plot kind: bands, vertices, histogram or sweep."""
    out = Path(out)
    files: list[Path] = []
    if kind == "bands":
        if not isinstance(report, FormulationReport) or not report.bands:
            raise PlotDataError("report has no trajectory bands")
        b = report.bands
        t = report.bundle.times
        p = out / "bands.csv"
        write_csv(p, ["time", "mean_u", "sd_u", "mean_xi1", "sd_xi1", "mean_xi2", "sd_xi2"],
                  [[t[i]] + [b[q][s][i] for q in ("u", "xi1", "xi2") for s in ("mean", "std")] for i in range(t.size)])
        files.append(p)
        if "p50" in b["u"]:
            p = out / "percentiles.csv"
            cols = [(q, s) for q in ("u", "xi1", "xi2") for s in ("p10", "p50", "p90", "p100")]
            write_csv(p, ["time"] + [f"{s}_{q}" for q, s in cols], [[t[i]] + [b[q][s][i] for q, s in cols]
                                                                     for i in range(t.size)])
            files.append(p)
    elif kind == "vertices":
        if not isinstance(report, FormulationReport) or not report.vertex_solutions:
            raise PlotDataError("report has no vertex solutions")
        for i, (v, sol) in enumerate(report.vertex_solutions):
            p = out / f"vertex_{i}.csv"
            write_csv(p, ["time", "u", "xi1", "xi2"],
                      [[sol.times[j], sol.u[j], sol.xi1[j], sol.xi2[j]] for j in range(sol.times.size)])
            files.append(p)
        p = out / "worst_vertex.json"
        write_json(p, {**report.worst_vertex,
                       "vertices": [{"index": i, "label": v.label(), "k": v.k, "J": v.J, "xi2_0": v.xi2_0}
                                    for i, (v, _) in enumerate(report.vertex_solutions)]})
        files.append(p)
    elif kind == "histogram":
        if not isinstance(report, ClosedLoopStats):
            raise PlotDataError("histogram data needs closed-loop statistics")
        p = out / "histogram.csv"
        report.write_histogram_csv(p)
        files.append(p)
        p = out / "response.csv"
        report.write_response_csv(p)
        files.append(p)
    elif kind == "sweep":
        if not isinstance(report, list) or not report:
            raise PlotDataError("sweep data needs sweep rows")
        p = out / "sweep.csv"
        cols = list(report[0])
        write_csv(p, cols, [[r[c] for c in cols] for r in report])
        files.append(p)
    else:
        raise PlotDataError(f"unknown plot data kind {kind!r}")
    return files


def _trajectory_csv(report: FormulationReport, out: Path) -> list[Path]:
    files = []
    if report.bundle is not None and report.bundle.u.shape[0] == 1:
        b = report.bundle
        p = out / "trajectory.csv"
        write_csv(p, ["time", "u", "xi1", "xi2"], [[b.times[j], b.u[0, j], b.xi1[0, j], b.xi2[0, j]]
                                                   for j in range(b.times.size)])
        files.append(p)
    if report.msc_log:
        log = report.msc_log
        for i, v in enumerate(log["vertices"]):
            p = out / f"msc_vertex_{i}.csv"
            write_csv(p, ["time", "u", "xi1", "xi2"],
                      [[log["times"][j], log["u"][i, j], log["xi1"][i, j], log["xi2"][i, j]]
                       for j in range(log["times"].size)])
            files.append(p)
    return files


def summary_rows(reports: Sequence[FormulationReport]) -> list[list[Any]]:
    return [[r.tag, r.objective, r.mu_k_star, r.wall_time, r.switch_time] for r in reports]


# ---------------------------------------------------------------------------
# commands


@dataclass
class RunContext:
    config: SasaConfig
    out: Path
    threads: int
    timing: dict[str, float] = field(default_factory=dict)


def _report_payload(rep: FormulationReport, ctx: RunContext) -> dict[str, Any]:
    s = rep.summary()
    ctx.timing[rep.tag] = s.pop("timing")["wall_time_s"]
    return s


def cmd_det(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    rep = solve_deterministic_ccd(ctx.config)
    _trajectory_csv(rep, ctx.out)
    return _report_payload(rep, ctx)


def cmd_se(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    rep = solve_se_uccd(ctx.config, args.up, threads=ctx.threads)
    emit_plot_data(rep, "bands", ctx.out)
    return _report_payload(rep, ctx)


def cmd_wcr(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    rep = solve_wcr_olmc(ctx.config, threads=ctx.threads)
    emit_plot_data(rep, "vertices", ctx.out)
    return _report_payload(rep, ctx)


def cmd_msc(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    rep = solve_msc_wcr(ctx.config, threads=ctx.threads)
    _trajectory_csv(rep, ctx.out)
    return _report_payload(rep, ctx)


def _parse_grid(text: str) -> list[float]:
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --grid {text!r}: {exc}") from exc
    if not grid:
        raise ConfigError("--grid is empty")
    return grid


def cmd_sweep(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    param = {"sf": "s_f", "ks": "k_s"}[args.param]
    rows = sweep(ctx.config, param, _parse_grid(args.grid), threads=ctx.threads)
    emit_plot_data(rows, "sweep", ctx.out)
    return {"sweep": param, "rows": rows}


def design_reference(config: SasaConfig, system: str, percentile: int, threads: int):
    """Solve the design for ``system`` and build its tracking reference."""
    if system == "det":
        rep = solve_deterministic_ccd(config)
        b = rep.bundle
        ref = build_reference("DET", b.times, b.u[0], b.xi2[0], config)
    elif system == "se":
        rep = solve_se_uccd(config, "mcs", threads=threads)
        b = rep.bundle
        ref = build_reference(f"SE-p{percentile}", b.times, b.u, b.xi2, config, percentile)
    elif system == "wcr":
        rep = solve_wcr_olmc(config, threads=threads)
        _, sol = rep.vertex_solutions[rep.worst_vertex["index"]]
        ref = build_reference("WCR", sol.times, sol.u, sol.xi2, config)
    else:
        raise ConfigError(f"unknown system {system!r}")
    return rep, ref


def cmd_closedloop(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    sampling = args.sampling or ("crisp" if args.system == "wcr" else "stochastic")
    rep, ref = design_reference(ctx.config, args.system, args.percentile, ctx.threads)
    design = _report_payload(rep, ctx)
    name = {"det": "DET-SYS", "se": f"SE-SYS-{args.percentile}", "wcr": "WCR-SYS"}[args.system]
    stats = closed_loop_stats(name, ref, rep.mu_k_star, ctx.config, sampling=sampling,
                              threads=ctx.threads)
    emit_plot_data(stats, "histogram", ctx.out)
    return {"closed_loop": {**stats.summary(), "rng": RNG_ALGORITHM}, "design": design}


def cmd_all(args: argparse.Namespace, ctx: RunContext) -> dict[str, Any]:
    reports = [
        solve_deterministic_ccd(ctx.config),
        solve_se_uccd(ctx.config, "mcs", threads=ctx.threads),
        solve_se_uccd(ctx.config, "gpc", threads=ctx.threads),
        solve_msc_wcr(ctx.config, threads=ctx.threads),
        solve_wcr_olmc(ctx.config, threads=ctx.threads),
    ]
    write_csv(ctx.out / "summary.csv", ["formulation", "objective", "mu_k", "wall_time_s", "t_switch"],
              summary_rows(reports))
    for rep in reports:
        sub = ctx.out / rep.tag.lower()
        sub.mkdir()
        if rep.bands:
            emit_plot_data(rep, "bands", sub)
        if rep.vertex_solutions:
            emit_plot_data(rep, "vertices", sub)
        _trajectory_csv(rep, sub)
    return {"formulations": [_report_payload(r, ctx) for r in reports]}


COMMANDS = {
    "det": cmd_det, "se": cmd_se, "wcr": cmd_wcr, "msc": cmd_msc,
    "sweep": cmd_sweep, "closedloop": cmd_closedloop, "all": cmd_all,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file (defaults if omitted)")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help=f"parallel map width (env {THREADS_ENV}, default: cores)")
    common.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    p = argparse.ArgumentParser(prog="sasa-uccd", description="Control co-design under uncertainty experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("det", parents=[common], help="deterministic co-design")
    se = sub.add_parser("se", parents=[common], help="stochastic-in-expectation co-design")
    se.add_argument("--up", choices=("mcs", "gpc"), required=True, help="uncertainty propagation method")
    sub.add_parser("wcr", parents=[common], help="worst-case robust co-design (vertex enumeration)")
    sub.add_parser("msc", parents=[common], help="multi-stage control, receding horizon")
    sw = sub.add_parser("sweep", parents=[common], help="worst-case sensitivity sweep")
    sw.add_argument("--param", choices=("sf", "ks"), required=True)
    sw.add_argument("--grid", required=True, help="comma-separated values, e.g. 0.5,1.0,1.5")
    cl = sub.add_parser("closedloop", parents=[common], help="closed-loop tracking statistics")
    cl.add_argument("--system", choices=("det", "se", "wcr"), required=True)
    cl.add_argument("--percentile", type=int, choices=(10, 50, 90, 100), default=50)
    cl.add_argument("--sampling", choices=("stochastic", "crisp"))
    sub.add_parser("all", parents=[common], help="every co-design formulation with a summary table")
    return p


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    return os.cpu_count() or 1


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK

    started = _dt.datetime.now(_dt.timezone.utc)
    out: Path = args.out
    try:
        config = SasaConfig.load(args.config) if args.config else default_instance()
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        threads = _threads(args.threads)
        if out.exists() and (not out.is_dir() or any(out.iterdir())) and not args.force:
            raise UsageError(f"output directory {out} is not empty (use --force)")
    except (ConfigError, UsageError, OSError, ValueError) as exc:
        print(f"sasa-uccd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    ctx = RunContext(config, stage, threads)
    try:
        payload = COMMANDS[args.command](args, ctx)
        write_json(stage / "results.json", {"command": args.command, "seed": config.seed, **payload})
        files = sorted(p for p in stage.rglob("*") if p.is_file())
        manifest = {
            "command": " ".join(["sasa-uccd"] + list(argv if argv is not None else sys.argv[1:])),
            "config": config.to_dict(),
            "seed": config.seed,
            "rng": RNG_ALGORITHM,
            "code_version": code_version(),
            "threads": threads,
            "started": started.isoformat(),
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_time_s": ctx.timing,
            "files": {str(p.relative_to(stage)): sha256(p) for p in files},
        }
        write_json(stage / "manifest.json", manifest)
    except ConfigError as exc:
        shutil.rmtree(stage, ignore_errors=True)
        print(f"sasa-uccd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormulationError, NumericalFailure, RuntimeError) as exc:
        shutil.rmtree(stage, ignore_errors=True)
        print(f"sasa-uccd: solve failure: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise

    out.mkdir(exist_ok=True)
    for p in sorted(stage.iterdir()):
        dest = out / p.name
        if dest.is_dir():
            shutil.rmtree(dest)
        elif dest.exists():
            dest.unlink()
        shutil.move(str(p), dest)
    stage.rmdir()
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
