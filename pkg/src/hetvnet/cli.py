"""Command line front end: validate, run, sweep, and report.

Exit codes are part of the contract: 0 on success, 2 for anything wrong
with the inputs (config parse or schema errors, broken initial worlds,
unusable sweep axes, unreadable traces), 3 for failures at run time
(engine invariant violations, output I/O). Output files land in --out,
falling back to the HETVNET_OUT_DIR environment variable and then the
working directory.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import validate_world
from .engine import EngineInvariantError, run_simulation
from .metrics import report_from_trace
from .radio import analytic_collision_probability, contention_fractions
from .scenarios import ConfigError, apply_overrides, build, load_config
from . import trace as tr

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

OUT_DIR_ENV = "HETVNET_OUT_DIR"

#: Contention slots simulated per sweep cell on the radio axes. Enough to
#: pin the collision fraction to about three decimal places per seed.
SWEEP_SLOTS = 20000

#: Axes that rewrite a config field and rerun the full simulation,
#: mapped to the document path they override.
CONFIG_AXES: Dict[str, str] = {
    "density": "traffic.density_veh_per_km",
    "per": "links.v2v.per",
    "duration": "duration_s",
}

#: Axes served by the standalone contention model instead of a full run:
#: K sweeps the contender count, C the codebook size.
RADIO_AXES = ("K", "C")


def _out_dir(args: argparse.Namespace) -> str:
    out = args.out or os.environ.get(OUT_DIR_ENV) or "."
    os.makedirs(out, exist_ok=True)
    return out


def _dump_json(doc: Dict[str, object], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


# -- validate ----------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    bundle = build(cfg)
    states = {vid: rt.state for vid, rt in bundle.world.runtimes.items()}
    kinds = {vid: rt.kind for vid, rt in bundle.world.runtimes.items()}
    problems = validate_world(bundle.world.network, states, kinds=kinds,
                              platoons=bundle.world.platoons)
    if problems:
        for problem in problems:
            print(f"invalid: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    census: Dict[str, int] = {}
    for rt in bundle.world.runtimes.values():
        census[rt.kind.value] = census.get(rt.kind.value, 0) + 1
    roster = ", ".join(f"{n} {k}" for k, n in sorted(census.items()))
    print(f"ok: {bundle.name} ({bundle.kind}) seed={bundle.seed} "
          f"duration={bundle.params.duration:g}s "
          f"vehicles={len(states)} ({roster or 'none'}) "
          f"spawns={len(bundle.world.spawns)}")
    return EXIT_OK


# -- run ---------------------------------------------------------------------

def _print_run_summary(name: str, kind: str, seed: int, result) -> None:
    report = result.metrics
    print(f"{name} ({kind}) seed={seed}: {result.steps} steps, "
          f"{report['duration_s']:g}s simulated in {result.wall_s:.1f}s wall, "
          f"{result.records_emitted} trace records")
    for cls, row in report["messages"].items():
        lat = row["latency"]
        p95 = f"{lat['p95'] * 1e3:.2f}ms" if lat["p95"] is not None else "-"
        pdr = f"{row['pdr']:.4f}" if row["pdr"] is not None else "-"
        print(f"  {cls}: sent={row['sent']} delivered={row['delivered']} "
              f"lost={row['lost']} pdr={pdr} p95_latency={p95}")
    for link, row in report["links"].items():
        pdr = f"{row['pdr']:.4f}" if row["pdr"] is not None else "-"
        print(f"  link {link}: delivered={row['delivered']} "
              f"lost={row['lost']} pdr={pdr}")
    safety = report["safety"]
    print("  safety: " + " ".join(f"{k}={v}" for k, v in safety.items()))
    traffic = report["traffic"]
    speed = traffic["mean_speed"]
    flow = traffic["flow_veh_per_h"]
    print(f"  traffic: mean_speed={_fmt(speed)} m/s "
          f"flow={_fmt(flow)} veh/h")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    bundle = build(cfg, seed=args.seed)
    out = _out_dir(args)
    stem = f"{bundle.name}-seed{bundle.seed}"
    trace_path = os.path.join(out, stem + ".trace.jsonl")
    report_path = os.path.join(out, stem + ".report.json")
    sink = tr.JsonlSink(trace_path)
    try:
        result = run_simulation(bundle.world, bundle.params, bundle.rng,
                                sinks=(sink,))
        _dump_json(result.metrics, report_path)
    except BaseException:
        # Never leave half a run on disk: a partial trace looks complete.
        sink.close()
        for path in (trace_path, report_path):
            if os.path.exists(path):
                os.unlink(path)
        raise
    _print_run_summary(bundle.name, bundle.kind, bundle.seed, result)
    print(f"trace:  {trace_path}")
    print(f"report: {report_path}")
    return EXIT_OK


# -- sweep -------------------------------------------------------------------

def _aggregate(samples: List[Optional[float]]) -> Dict[str, object]:
    values = [s for s in samples if s is not None]
    if not values:
        return {"mean": None, "stderr": None, "n": 0}
    mean = float(np.mean(values))
    stderr = 0.0
    if len(values) > 1:
        stderr = float(np.std(values, ddof=1) / math.sqrt(len(values)))
    return {"mean": mean, "stderr": stderr, "n": len(values)}


def _scalarize(report: Dict[str, object]) -> Dict[str, Optional[float]]:
    """Pick the sweep-worthy scalars out of one run report."""
    atm = report["messages"].get("Atm", {})
    lat = atm.get("latency", {})
    p95 = lat.get("p95")
    v2v = report["links"].get("v2v", {})
    return {
        "mean_speed": report["traffic"]["mean_speed"],
        "atm_p95_ms": p95 * 1e3 if p95 is not None else None,
        "pdr_v2v": v2v.get("pdr"),
        "near_misses": float(report["safety"]["near_misses"]),
        "collisions": float(report["safety"]["collisions"]),
    }


def _sweep_radio(axis: str, values: List[float], seeds: List[int],
                 cfg: dict) -> List[Dict[str, object]]:
    radio = cfg.get("radio", {}) if isinstance(cfg.get("radio"), dict) else {}
    loads = radio.get("loads", [4, 4, 64])
    codebook = radio.get("codebook_size", 8)
    cells = []
    for value in values:
        if value != int(value) or int(value) < 1:
            raise ConfigError(
                f"axis {axis} takes positive integers, got {value:g}")
        fractions = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            if axis == "K":
                k, c = int(value), int(codebook)
            else:
                k, c = int(loads[0]), int(value)
            fractions.append(contention_fractions(k, c, SWEEP_SLOTS, rng))
        analytic = (analytic_collision_probability(int(value), int(codebook))
                    if axis == "K"
                    else analytic_collision_probability(int(loads[0]),
                                                        int(value)))
        cells.append({
            "value": value,
            "metrics": {"collision_prob": _aggregate(fractions),
                        "analytic": analytic},
        })
    return cells


def _sweep_config(axis: str, values: List[float], seeds: List[int],
                  cfg: dict) -> List[Dict[str, object]]:
    path = CONFIG_AXES[axis]
    cells = []
    for value in values:
        per_seed: Dict[str, List[Optional[float]]] = {}
        for seed in seeds:
            overridden = apply_overrides(cfg, {path: value})
            bundle = build(overridden, seed=seed)
            result = run_simulation(bundle.world, bundle.params, bundle.rng)
            for key, scalar in _scalarize(result.metrics).items():
                per_seed.setdefault(key, []).append(scalar)
        cells.append({
            "value": value,
            "metrics": {k: _aggregate(v) for k, v in per_seed.items()},
        })
    return cells


def _print_sweep_table(doc: Dict[str, object]) -> None:
    cells = doc["cells"]
    columns: List[str] = []
    for cell in cells:
        for key in cell["metrics"]:
            if key not in columns:
                columns.append(key)
    rows = [["value"] + columns]
    for cell in cells:
        row = [_fmt(cell["value"])]
        for key in columns:
            entry = cell["metrics"].get(key)
            if isinstance(entry, dict):
                if entry["mean"] is None:
                    row.append("-")
                else:
                    row.append(f"{entry['mean']:.6g} ± {entry['stderr']:.2g}")
            else:
                row.append(_fmt(entry))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    seeds = ", ".join(str(s) for s in doc["seeds"])
    print(f"axis {doc['axis']} over {doc['config']} (seeds: {seeds})")
    for row in rows:
        print("  " + "  ".join(cell.ljust(w) for cell, w in zip(row, widths)))


def cmd_sweep(args: argparse.Namespace) -> int:
    known = sorted(list(CONFIG_AXES) + list(RADIO_AXES))
    if args.axis not in known:
        raise ConfigError(f"unknown axis {args.axis!r}; sweepable fields: "
                          + ", ".join(known))
    if not args.values:
        raise ConfigError("no values given; pass at least one with --values")
    cfg = load_config(args.config)
    seeds = args.seeds
    if not seeds:
        seeds = [int(cfg.get("seed", 0))]
    if args.axis in RADIO_AXES:
        cells = _sweep_radio(args.axis, args.values, seeds, cfg)
    else:
        cells = _sweep_config(args.axis, args.values, seeds, cfg)
    doc = {
        "config": cfg.get("name", os.path.basename(args.config)),
        "axis": args.axis,
        "values": args.values,
        "seeds": seeds,
        "slots_per_cell": SWEEP_SLOTS if args.axis in RADIO_AXES else None,
        "cells": cells,
    }
    _print_sweep_table(doc)
    out = _out_dir(args)
    json_path = os.path.join(out, f"sweep-{args.axis}-{doc['config']}.json")
    _dump_json(doc, json_path)
    print(f"table: {json_path}")
    return EXIT_OK


# -- report ------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    try:
        report = report_from_trace(args.trace)
    except FileNotFoundError:
        print(f"config error: no such trace: {args.trace}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"config error: unreadable trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetvnet",
        description="Deterministic simulator of heterogeneous vehicular "
                    "networks: scenario validation, runs, parameter sweeps "
                    "and trace reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate",
                       help="check a scenario config and its initial world")
    p.add_argument("config", help="scenario config file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="simulate one scenario")
    p.add_argument("config", help="scenario config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep",
                       help="run a parameter axis and aggregate metrics")
    p.add_argument("config", help="scenario config file")
    p.add_argument("--axis", required=True,
                   help="parameter to sweep: "
                        + ", ".join(sorted(list(CONFIG_AXES)
                                           + list(RADIO_AXES))))
    p.add_argument("--values", type=float, nargs="*", default=[],
                   help="axis values")
    p.add_argument("--seeds", type=int, nargs="*", default=[],
                   help="seeds per cell (default: the config seed)")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${OUT_DIR_ENV} or .)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute the report from a trace")
    p.add_argument("trace", help="trace file (one JSON object per line)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EngineInvariantError as exc:
        print(f"runtime invariant failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
