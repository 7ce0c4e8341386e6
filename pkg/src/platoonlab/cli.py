"""Command line entry point: ``platoonlab run | synth | metrics``.

Exit codes: 0 success, 2 infeasible synthesis, 3 collision, 4 bad input.
Settings are layered as CLI flags > ``--config`` JSON file > built-in defaults.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .data_engine import load_log, save_log
from .dynamics import default_scenario, load_scenario
from .exceptions import Infeasible, RankDeficient
from .harness import (
    ExperimentConfig,
    compute_metrics,
    export,
    load_drive_cycle,
    read_trajectory,
    run_experiment,
    synthesize_all,
    synthetic_aggressive_cycle,
)

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_COLLISION = 3
EXIT_BAD_INPUT = 4

# CLI flag -> ExperimentConfig field
_OVERRIDES = {
    "T": "T", "delta": "delta", "epsilon": "epsilon", "excitation": "excitation",
    "horizon": "N", "h_tilde_max": "h_tilde_max", "v_tilde_max": "v_tilde_max",
    "disturbance_maps": "disturbance_maps",
}


class BadInput(Exception):
    """Raised for unusable command line input (maps to exit code 4)."""


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--scenario", type=Path, help="scenario JSON (default: bundled six-vehicle platoon)")
    p.add_argument("--delta", type=float, help="disturbance bound used in the inner-loop SDP")
    p.add_argument("--epsilon", type=float, help="fixed SDP scale epsilon")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="platoonlab", description="Mixed-platoon dual-loop control experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate ACC or dual-loop control over a drive cycle")
    _add_config_flags(run)
    run.add_argument("--cycle", default="synthetic", help="drive cycle CSV (header t,v) or 'synthetic'")
    run.add_argument("--duration", type=float, default=300.0, help="synthetic cycle length [s]")
    run.add_argument("--cycle-seed", type=int, default=0, help="synthetic cycle seed")
    run.add_argument("--controller", nargs="+", choices=("acc", "dual"), default=["dual"])
    run.add_argument("--out", type=Path, required=True, help="output directory")
    run.add_argument("--seed", type=int, nargs="+", help="excitation seed(s); several seeds form a batch")
    run.add_argument("--jobs", type=int, default=1, help="parallel workers for batch runs")
    run.add_argument("--T", type=int, help="collection length in samples")
    run.add_argument("--excitation", type=float, help="dither amplitude during collection [m/s^2]")
    run.add_argument("--horizon", type=int, help="MPC horizon N")
    run.add_argument("--h-tilde-max", type=float, help="rear gap error bound [m]")
    run.add_argument("--v-tilde-max", type=float, help="rear velocity error bound [m/s]")
    run.add_argument("--disturbance-maps", choices=("default", "structured"))
    run.add_argument("--format", nargs="+", choices=("csv", "svg"), default=["csv", "svg"])

    synth = sub.add_parser("synth", help="offline synthesis from a persisted data log")
    _add_config_flags(synth)
    synth.add_argument("--data", type=Path, required=True, help="directory with U0.csv, X0.csv, X1.csv, meta.json")
    synth.add_argument("--out", type=Path, required=True, help="output directory for gains.json")

    met = sub.add_parser("metrics", help="recompute metrics from a trajectory CSV")
    met.add_argument("--log", type=Path, required=True, help="trajectory.csv written by 'run'")
    met.add_argument("--start", type=int, help="first step of the window (default: post-synthesis)")
    return parser


def _config(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None) is not None:
        try:
            base = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise BadInput(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise BadInput(f"{args.config}: expected a JSON object")
    for flag, key in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    try:
        return ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from None


def _scenario(args):
    if getattr(args, "scenario", None) is None:
        return default_scenario()
    try:
        return load_scenario(args.scenario)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadInput(f"cannot load scenario {args.scenario}: {exc}") from None


def _cycle(args):
    if args.cycle == "synthetic":
        return synthetic_aggressive_cycle(args.duration, seed=args.cycle_seed)
    try:
        return load_drive_cycle(args.cycle)
    except (OSError, ValueError) as exc:
        raise BadInput(str(exc)) from None


def _run_one(job: tuple) -> tuple[int, dict]:
    """Worker body for one (controller, seed) run; returns (exit code, summary)."""
    scenario, controller, cycle, config, out, formats = job
    try:
        sim = run_experiment(scenario, controller, cycle, config)
    except Infeasible as exc:
        out.mkdir(parents=True, exist_ok=True)
        diag = {k: v for k, v in exc.diagnostics.items() if isinstance(v, (int, float, str, bool, type(None)))}
        (out / "synthesis_failure.json").write_text(json.dumps({"error": str(exc), "diagnostics": diag}, indent=2))
        return EXIT_INFEASIBLE, {"out": str(out), "error": str(exc), **diag}
    metrics = compute_metrics(sim)
    export(sim, metrics, out, formats)
    if sim.data is not None and sim.data.T > 0:
        save_log(sim.data, out / "data")
    summary = {"out": str(out), "controller": controller, "seed": config.seed, **metrics.to_dict()}
    if sim.collision is not None:
        summary["collision_detail"] = sim.collision
        return EXIT_COLLISION, summary
    return EXIT_OK, summary


def cmd_run(args) -> int:
    scenario = _scenario(args)
    cycle = _cycle(args)
    base = _config(args)
    seeds = args.seed or [base.seed]
    combos = list(itertools.product(args.controller, seeds))
    jobs = []
    for controller, seed in combos:
        cfg = ExperimentConfig.from_dict(dict(base.to_dict(), seed=seed))
        out = args.out if len(combos) == 1 else args.out / f"{controller}_seed{seed}"
        jobs.append((scenario, controller, cycle, cfg, out, tuple(args.format)))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    for code, summary in results:
        print(json.dumps(summary, default=str))
    return max(code for code, _ in results)


def cmd_synth(args) -> int:
    scenario = _scenario(args)
    config = _config(args)
    try:
        data = load_log(args.data)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise BadInput(f"cannot load data log {args.data}: {exc}") from None
    if data.n_x != 3 * scenario.n:
        raise BadInput(f"data has n_x={data.n_x} but the scenario needs {3 * scenario.n}")
    try:
        syn = synthesize_all(data, scenario, config)
    except Infeasible as exc:
        print(json.dumps({"error": str(exc), "diagnostics": {
            k: v for k, v in exc.diagnostics.items() if isinstance(v, (int, float, str, bool, type(None)))
        }}), file=sys.stderr)
        return EXIT_INFEASIBLE
    except RankDeficient as exc:
        raise BadInput(str(exc)) from None
    args.out.mkdir(parents=True, exist_ok=True)
    gains = syn["gain"].to_dict() | {
        "observer": syn["observer"].to_dict(),
        "P_terminal": syn["mpc"].config_.P_terminal.tolist(),
        "scenario_digest": scenario.digest(),
        "config": config.to_dict(),
    }
    path = args.out / "gains.json"
    path.write_text(json.dumps(gains, indent=2))
    print(json.dumps({"gains": str(path), "gamma": gains["gamma"], "epsilon": gains["epsilon"],
                      "data_digest": gains["data_digest"]}))
    return EXIT_OK


def cmd_metrics(args) -> int:
    try:
        sim = read_trajectory(args.log)
    except (OSError, ValueError) as exc:
        raise BadInput(str(exc)) from None
    print(json.dumps(compute_metrics(sim, start=args.start).to_dict(), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "synth": cmd_synth, "metrics": cmd_metrics}[args.command]
    try:
        return handler(args)
    except BadInput as exc:
        print(f"platoonlab: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
