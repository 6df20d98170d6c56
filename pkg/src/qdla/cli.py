"""Command-line front end: ``qdla run | sweep | analyze | calibrate-tmax | export-snapshot``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (DEFAULT_MIN_POINTS, DEFAULT_R2, EmptyCluster, NoLinearRegion,
                       TooFewRuns, age_correlation, age_profile, ensemble_stats,
                       format_estimate, mass_dimension, write_age_csv, write_curve_csv,
                       write_fit_json)
from .config import PRESETS, ConfigError, SimConfig, child_seed, load_config, normalize_items
from .engine import (AggregateState, init_particle, norm_drift_probe, read_cluster_csv,
                     run_simulation, safe_horizon, write_cluster_csv)
from .lattice import read_field_csv, write_field_csv, write_pgm
from .propagators import Unstable

SWEEP_COLUMNS = ("sigma", "sigma_over_width", "mean_d", "std_d", "n_runs")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _overrides(args) -> dict:
    keys = ("seed", "mode", "grid", "sigma", "dt", "d_coeff", "hbar", "mass", "t_max",
            "particles", "workers")
    out = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "override_detect_cadence", False):
        out["override_detect_cadence"] = True
    if getattr(args, "detect_every", None) is not None:
        out["detect_every"] = args.detect_every
    elif args.dt is not None and not out.get("override_detect_cadence"):
        out["detect_every"] = max(1, round(1.0 / args.dt))  # keep n = 1/dt when only dt changes
    if getattr(args, "release_radius", None) is not None:
        out["release_radius"] = args.release_radius
    if getattr(args, "adaptive", False):
        out["adaptive_release"] = True
    if getattr(args, "snapshot_every", None) is not None:
        out["snapshot_every"] = args.snapshot_every
    return {k: v for k, v in out.items() if v is not None}


def config_from_args(args, **extra) -> SimConfig:
    cfg_path = getattr(args, "config", None)
    overrides = {**_overrides(args), **extra}
    if cfg_path and str(cfg_path).endswith(".json"):
        manifest = json.loads(Path(cfg_path).read_text())
        values = normalize_items(manifest["config"])
        values.update(normalize_items(overrides))
        return SimConfig(**values)
    return load_config(cfg_path, preset=getattr(args, "preset", None), overrides=overrides)


# -- run -------------------------------------------------------------------

def execute_run(config: SimConfig, out_dir: Path, figures: bool = True, quiet: bool = False) -> dict:
    """Run one simulation and write cluster, run log, config echo and manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    progress = None
    if not quiet:
        def progress(log, agg):
            if len(log.particles) % 100 == 0:
                print(f"  released={len(log.particles)} aggregated={log.aggregated} "
                      f"r_max={agg.max_radius():.1f}", file=sys.stderr, flush=True)
    agg, log = run_simulation(config, snapshot_dir=out_dir / "snapshots", progress=progress)
    paths = {
        "cluster": write_cluster_csv(agg, out_dir / "cluster.csv"),
        "run_log": out_dir / "runlog.json",
        "config": out_dir / "config.txt",
    }
    paths["run_log"].write_text(log.to_json() + "\n")
    paths["config"].write_text(config.to_text())
    if figures:
        from .plotting import plot_cluster
        paths["cluster_figure"] = plot_cluster(agg, out_dir / "cluster.png",
                                               title=f"{config.mode}, N={len(agg)}")
    snaps = sorted((out_dir / "snapshots").glob("*")) if (out_dir / "snapshots").exists() else []
    manifest = {
        "software": f"qdla {__version__}",
        "rng_seed": config.rng_seed,
        "config": config.to_dict(),
        "artifacts": {k: str(v.name) for k, v in paths.items()},
        "snapshots": [str(p.relative_to(out_dir)) for p in snaps],
        "started": started,
        "finished": _now(),
        "summary": {"aggregated": log.aggregated, "discarded_tmax": log.discarded_tmax,
                    "discarded_absorbed": log.discarded_absorbed, "stop_reason": log.stop_reason,
                    "wall_time": log.wall_time, "cells": len(agg)},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return {"aggregate": agg, "log": log, "manifest": manifest}


def cmd_run(args) -> int:
    try:
        config = config_from_args(args)
    except (ConfigError, Unstable, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    res = execute_run(config, out, figures=not args.no_figures, quiet=args.quiet)
    log = res["log"]
    print(f"run: particles aggregated={log.aggregated} discarded={log.discarded_tmax + log.discarded_absorbed} "
          f"(tmax={log.discarded_tmax}, absorbed={log.discarded_absorbed}) "
          f"wall={log.wall_time:.1f}s stop={log.stop_reason} -> {out}")
    return 0


# -- sweep -----------------------------------------------------------------

def _sweep_job(job):
    cfg_dict, out_dir, min_points, r2 = job
    config = SimConfig(**normalize_items(cfg_dict))
    row = {"sigma": config.sigma, "seed": config.rng_seed, "dir": str(out_dir)}
    try:
        res = execute_run(config, Path(out_dir), figures=False, quiet=True)
        row["cells"] = len(res["aggregate"])
        fit, _ = mass_dimension(res["aggregate"], min_points, r2)
        row["d"] = fit.d
    except Exception as exc:  # recorded per cell; the sweep carries on
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def parse_sigma_list(text: str | None) -> list[float]:
    if text is None or not text.strip():
        return []
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def cmd_sweep(args) -> int:
    sigmas = parse_sigma_list(args.sigma)
    try:
        base = config_from_args(args, sigma=None)
    except (ConfigError, Unstable, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, failed = [], []
    for i, sigma in enumerate(sigmas):
        for j in range(args.runs):
            cell = base.to_dict()
            cell.update(sigma=repr(sigma), rng_seed=str(child_seed(base.rng_seed, i, j)),
                        workers="1")
            if args.auto_radius:
                cell["release_radius"] = "auto"
            try:
                SimConfig(**normalize_items(cell))
            except (ConfigError, Unstable, ValueError) as exc:
                failed.append({"sigma": sigma, "replicate": j, "error": str(exc)})
                continue
            jobs.append((cell, str(out / f"sigma{i:02d}_rep{j:02d}"), args.min_points, args.r2))
    if args.workers and args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    rows += failed
    with (out / "sweep_runs.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["sigma", "seed", "cells", "d", "error", "dir", "replicate"],
                           extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    summary = []
    for sigma in sigmas:
        ds = [r["d"] for r in rows if r.get("sigma") == sigma and "d" in r]
        if len(ds) >= 2:
            mean, std = ensemble_stats(ds)
        elif ds:
            mean, std = ds[0], float("nan")
        else:
            mean, std = float("nan"), float("nan")
        summary.append({"sigma": sigma, "sigma_over_width": sigma / base.width,
                        "mean_d": mean, "std_d": std, "n_runs": len(ds)})
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(summary)
    if summary and not args.no_figures:
        from .plotting import plot_sweep
        plot_sweep(summary, out / "sweep.png")
    for s in summary:
        print(f"sigma={s['sigma']:g} d={s['mean_d']:.3f} std={s['std_d']:.3f} n={s['n_runs']}")
    print(f"sweep: {len(summary)} sigma values, {len(jobs)} runs, "
          f"{sum('error' in r for r in rows)} failures -> {out / 'sweep.csv'}")
    return 0


# -- analyze ---------------------------------------------------------------

def cmd_analyze(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fits, status = [], 0
    for p in args.paths:
        path = Path(p)
        stem = path.parent.name + "_" + path.stem if path.stem == "cluster" else path.stem
        try:
            agg = read_cluster_csv(path)
            fit, curve = mass_dimension(agg, args.min_points, args.r2)
        except (OSError, ValueError, EmptyCluster, NoLinearRegion) as exc:
            print(f"{p}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
            status = 1
            continue
        profile = age_profile(agg, args.bins)
        rho = age_correlation(profile)
        write_fit_json(fit, out / f"{stem}_fit.json", source=str(path), cells=len(agg),
                       age_spearman=rho)
        write_curve_csv(curve, out / f"{stem}_curve.csv")
        write_age_csv(profile, out / f"{stem}_age.csv")
        if not args.no_figures:
            from .plotting import plot_age_profile, plot_mass_radius
            plot_mass_radius(curve, fit, out / f"{stem}_mass_radius.png", title=path.name)
            plot_age_profile(profile, out / f"{stem}_age.png", title=path.name)
        fits.append(fit)
        print(f"{p}: d={fit.d:.4f} window=[{fit.r_min:.2f}, {fit.r_max:.2f}] "
              f"R2={fit.r_squared:.5f} n={fit.n_points} cells={len(agg)} age_rho={rho:.3f}")
    if len(fits) >= 2:
        mean, std = ensemble_stats(fits)
        (out / "ensemble.json").write_text(json.dumps(
            {"mean_d": mean, "std_d": std, "n_runs": len(fits), "d": [f.d for f in fits]},
            indent=1) + "\n")
        print(f"ensemble: d = {format_estimate(mean, std)} over {len(fits)} clusters")
    return status


# -- calibrate-tmax ----------------------------------------------------------

def cmd_calibrate(args) -> int:
    try:
        config = config_from_args(args)
    except (ConfigError, Unstable, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    horizon = args.horizon if args.horizon is not None else config.t_max
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    times, totals = norm_drift_probe(config, horizon, samples=args.samples)
    with (out / "norm_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "total", "abs_drift"])
        for t, v in zip(times, totals):
            w.writerow([repr(float(t)), repr(float(v)), repr(abs(float(v) - 1.0))])
    if not args.no_figures:
        from .plotting import plot_norm_trace
        plot_norm_trace(times, totals, out / "norm_trace.png", tol=args.tol)
    limit = safe_horizon(times, totals, args.tol)
    drift = float(np.max(np.abs(totals - 1.0))) if len(totals) else 0.0
    report = {"mode": config.mode, "probe_horizon": horizon, "tolerance": args.tol,
              "max_drift": drift, "drift_at_end": float(abs(totals[-1] - 1.0)) if len(totals) else 0.0,
              "safe_horizon": limit, "fraction": args.fraction,
              "recommended_t_max": None if limit is None else args.fraction * limit,
              "wall_time": time.perf_counter() - t0}
    (out / "calibration.json").write_text(json.dumps(report, indent=1) + "\n")
    if limit is None:
        print(f"calibrate-tmax: drift stayed below {args.tol:g} up to t={horizon:g} "
              f"(max {drift:.3e}); t_max={horizon:g} is safe")
    else:
        print(f"calibrate-tmax: drift exceeds {args.tol:g} at t={limit:g}; "
              f"recommended t_max={args.fraction * limit:g}")
    return 0


# -- export-snapshot ---------------------------------------------------------

def cmd_export(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.path:
        path = Path(args.path)
        if not path.exists():
            print(f"{path}: error: no such file", file=sys.stderr)
            return 1
        head = path.read_text().split("\n", 1)[0]
        if head.startswith("x,y,particle_index"):
            agg = read_cluster_csv(path)
            write_pgm(agg.occ, out / f"{path.stem}_mask.pgm")
            write_field_csv(agg.occ.astype(float), out / f"{path.stem}_mask.csv")
            print(f"export-snapshot: mask of {len(agg)} cells -> {out}")
        else:
            values = read_field_csv(path)
            write_pgm(values, out / f"{path.stem}.pgm")
            print(f"export-snapshot: field {values.shape[1]}x{values.shape[0]} -> {out}")
        return 0
    try:
        config = config_from_args(args)
    except (ConfigError, Unstable, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    if config.mode == "random_walk":
        print("error: random-walk mode has no field to export", file=sys.stderr)
        return 2
    rng = np.random.default_rng(config.rng_seed)
    agg = AggregateState(config.geometry)
    particle = init_particle(config, agg, rng)
    f = particle.live_field()
    write_field_csv(f.values, out / "initial_field.csv")
    write_pgm(f.values, out / "initial_field.pgm")
    write_pgm(agg.occ, out / "initial_mask.pgm")
    print(f"export-snapshot: initial packet at {particle.center} -> {out}")
    return 0


# -- parser ----------------------------------------------------------------

def _sim_flags(p, sweep=False):
    p.add_argument("--config", help="key = value config file (or a run manifest.json)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out-dir", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", help="random_walk | classical_diffusion | quantum (aliases: rw, classical)")
    p.add_argument("--grid", help="N or WxH")
    if sweep:
        p.add_argument("--sigma", help="comma-separated packet widths")
    else:
        p.add_argument("--sigma", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--d-coeff", type=float)
    p.add_argument("--hbar", type=float)
    p.add_argument("--mass", type=float)
    p.add_argument("--t-max", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--override-detect-cadence", action="store_true")
    p.add_argument("--detect-every", type=int)
    p.add_argument("--release-radius", help="cells, or 'auto'")
    p.add_argument("--adaptive", action="store_true",
                   help="random-walk only: launch just outside the cluster, kill ring")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--quiet", action="store_true", help="no progress output")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qdla", description=__doc__)
    ap.add_argument("--version", action="version", version=f"qdla {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="grow one aggregate")
    _sim_flags(p)
    p.add_argument("--snapshot-every", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="packet-width sweep with replicates")
    _sim_flags(p, sweep=True)
    p.add_argument("--runs", type=int, default=1, help="replicates per sigma")
    p.add_argument("--auto-radius", action="store_true",
                   help="recompute the release radius for each sigma")
    p.add_argument("--min-points", type=int, default=DEFAULT_MIN_POINTS)
    p.add_argument("--r2", type=float, default=DEFAULT_R2)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="mass dimension and age profile of cluster files")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out-dir", default="analysis")
    p.add_argument("--min-points", type=int, default=DEFAULT_MIN_POINTS)
    p.add_argument("--r2", type=float, default=DEFAULT_R2)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("calibrate-tmax", help="free-evolution norm drift probe")
    _sim_flags(p)
    p.add_argument("--horizon", type=float, help="probe length in time units (default t_max)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("export-snapshot", help="PGM/CSV export of a cluster, field or initial packet")
    p.add_argument("path", nargs="?", help="cluster CSV or field CSV")
    _sim_flags(p)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
