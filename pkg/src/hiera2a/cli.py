"""Command line interface.

Subcommands:
    fit        fit per-phase cost parameters from measurement CSVs
    gen-trace  synthesize a routing trace CSV
    analyze    per-mask dimension selection report for a trace
    plan       expert-swap plans per layer for a trace
    simulate   multi-iteration strategy comparison

Exit codes: 0 success, 2 usage error, 3 input validation error,
4 model-fit quality failure. All floats are serialized with 9 significant
digits so repeated runs produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import engine, routing, swap, topology, traffic

SEED_ENV = "HIERA2A_SEED"
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_FIT_QUALITY = 4


class FitQualityError(Exception):
    """A fitted series fell below the r^2 acceptance bar."""


def _round9(value):
    """Round floats to 9 significant digits, recursively through containers."""
    if isinstance(value, bool):
        return value
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.9g}")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, dict):
        return {k: _round9(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round9(v) for v in value]
    return value


def _write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(_round9(doc), indent=2) + "\n")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def _require_file(path: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _seed_override(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else seed


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    series = {}
    for spec in args.series:
        kind, _, path = spec.partition("=")
        valid = kind == "std" or (
            kind.startswith(("inter.", "intra.")) and kind.split(".")[1].isdigit())
        if not path or not valid:
            raise ValueError(f"bad --series {spec!r}; expected KIND=FILE with "
                             f"KIND one of std, inter.N, intra.N")
        series[kind] = topology.load_measurements(_require_file(path))

    if "std" not in series:
        raise ValueError("a 'std' measurement series is required")

    fits = {kind: topology.fit_params(points) for kind, points in series.items()}
    for kind, fit in fits.items():
        if fit.negative_beta:
            print(f"warning: {kind}: fitted beta is not positive "
                  f"({_fmt(fit.beta)}); series does not look linear",
                  file=sys.stderr)
    bad = {k: f.r_squared for k, f in fits.items() if f.r_squared < args.min_r2}
    if bad and not args.force:
        for kind, r2 in sorted(bad.items()):
            print(f"error: {kind}: r^2 {_fmt(r2)} below {_fmt(args.min_r2)} "
                  f"(use --force to write anyway)", file=sys.stderr)
        raise FitQualityError(", ".join(sorted(bad)))

    doc = {kind: {"alpha": fit.alpha, "beta": fit.beta, "r2": fit.r_squared}
           for kind, fit in sorted(fits.items())}
    _write_json(doc, args.out)
    print(f"wrote {args.out} ({len(fits)} series)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen-trace


def cmd_gen_trace(args) -> int:
    if args.dist == "uniform" and args.zipf_s not in (None, 0.0):
        raise ValueError("--zipf-s only applies to --dist zipf")
    zipf_s = args.zipf_s or 0.0
    base_seed = _seed_override(args.seed)
    entries = []
    for iteration in range(args.iterations):
        for layer in range(args.layers):
            seed = routing.layer_seed(base_seed, iteration, layer)
            mask = routing.generate_skewed(args.tokens, args.experts,
                                           args.top_k, zipf_s, seed)
            entries.append((iteration, layer, mask))
    routing.save_trace(entries, args.out)
    print(f"wrote {args.out} ({len(entries)} masks, {args.tokens} tokens each)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def _load_common(args):
    topo = topology.load_topology(_require_file(args.topology))
    params = topology.load_params(_require_file(args.params), topo.num_levels)
    trace = routing.load_trace(_require_file(args.trace), topo.experts)
    if not trace:
        raise ValueError(f"trace {args.trace} contains no masks")
    return topo, params, trace


def cmd_analyze(args) -> int:
    topo, params, trace = _load_common(args)
    depth = topo.num_levels
    entries = []
    for iteration, layer, mask in trace:
        d_star, report = traffic.optimal_dimension(mask, topo, params)
        entries.append({
            "iter": iteration, "layer": layer, "d_star": d_star,
            "times_s": list(report.times),
            "inter_bytes": list(report.inter_bytes),
            "intra_bytes": list(report.intra_bytes),
            "dup_rate_per_level": list(report.dup_rate_per_level),
        })

    doc = {"experts": topo.experts, "gpus": topo.num_gpus, "levels": depth,
           "entries": entries}
    _write_json(doc, args.out)

    header = (["iter", "layer", "d_star"]
              + [f"t{d}" for d in range(1, depth + 1)]
              + [f"dup_rate_l{l}" for l in range(1, depth + 1)])
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for e in entries:
            writer.writerow([e["iter"], e["layer"], e["d_star"]]
                            + [_fmt(t) for t in e["times_s"]]
                            + [_fmt(r) for r in e["dup_rate_per_level"]])
    print(f"wrote {args.out} and {args.csv} ({len(entries)} masks)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan


def _load_placements(path, topo) -> dict[int, routing.Placement]:
    with open(path) as fh:
        raw = json.load(fh)
    if raw.get("experts") != topo.experts:
        raise ValueError(f"placement file {path} is for {raw.get('experts')} "
                         f"experts, topology has {topo.experts}")
    return {int(layer): routing.Placement(np.array(perm, dtype=int))
            for layer, perm in raw["layers"].items()}


def _save_placements(placements: dict[int, routing.Placement], experts: int,
                     path) -> None:
    doc = {"experts": experts,
           "layers": {str(l): p.slot_to_expert.tolist()
                      for l, p in sorted(placements.items())}}
    _write_json(doc, path)


def cmd_plan(args) -> int:
    topo, params, trace = _load_common(args)
    if args.placement:
        placements = _load_placements(_require_file(args.placement), topo)
    else:
        placements = {}

    # Plan from the freshest routing statistics: the last traced iteration of
    # each layer.
    latest: dict[int, routing.RoutingMask] = {}
    for iteration, layer, mask in trace:
        latest[layer] = mask

    plans = []
    for layer in sorted(latest):
        placement = placements.get(layer, routing.Placement.identity(topo.experts))
        plan = swap.select_swap(latest[layer], topo, params, args.gamma, placement)
        placements[layer] = swap.apply_swap(placement, plan.pair)
        plans.append({
            "layer": layer,
            "d_star": plan.d_star,
            "pair": list(plan.pair) if plan.pair else None,
            "predicted_saving_s": plan.predicted_saving,
            "q_diag_s": plan.no_swap_time,
        })

    _write_json({"gamma": args.gamma, "plans": plans}, args.out)
    _save_placements(placements, topo.experts, args.out_placement)
    print(f"wrote {args.out} and {args.out_placement} ({len(plans)} layers)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _load_sim_config(path) -> engine.SimConfig:
    with open(path) as fh:
        raw = json.load(fh)
    base = Path(path).parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    topo = topology.load_topology(_require_file(resolve(raw["topology"])))
    params = topology.load_params(_require_file(resolve(raw["params"])),
                                  topo.num_levels)
    rout = raw.get("routing", {})
    source = rout.get("source", "uniform")
    trace = None
    if source == "trace":
        trace = routing.load_trace(_require_file(resolve(rout["trace"])),
                                   topo.experts)
    return engine.SimConfig(
        topology=topo,
        params=params,
        iterations=int(raw["iterations"]),
        layers=int(raw["layers"]),
        tokens=int(raw.get("tokens", 0)),
        routing=source,
        zipf_s=float(rout.get("zipf_s", 0.0)),
        top_k=int(rout.get("top_k", 2)),
        trace=trace,
        swap_frequency=int(raw.get("swap_frequency", 1)),
        swap_lag=int(raw.get("swap_lag", 0)),
        gamma=float(raw.get("gamma", 10.0)),
        base_seed=_seed_override(int(raw.get("base_seed", 0))),
        strategies=tuple(raw.get("strategies", ())),
    )


def cmd_simulate(args) -> int:
    config = _load_sim_config(_require_file(args.config))
    threads = args.threads or os.cpu_count() or 1
    report = engine.run_simulation(config, threads=threads)

    _write_json(report.to_dict(), args.out)
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "layer", "strategy", "seconds", "d_star"])
        for (iteration, layer, strategy), secs in sorted(report.seconds.items()):
            writer.writerow([iteration, layer, strategy, _fmt(secs),
                             report.d_star[(iteration, layer)]])
    print(f"wrote {args.out} and {args.csv}")
    for strategy in report.strategies:
        print(f"  {strategy:>5}: {_fmt(report.aggregate(strategy))} s "
              f"(x{_fmt(report.speedup_vs_std(strategy))} vs std)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiera2a",
        description="Planner and simulator for hierarchical deduplicated "
                    "MoE AlltoAll dispatch.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit per-phase cost parameters")
    p.add_argument("--series", action="append", required=True,
                   metavar="KIND=FILE",
                   help="measurement CSV for one phase kind "
                        "(std, inter.N, intra.N); repeatable")
    p.add_argument("--out", required=True, help="output params JSON")
    p.add_argument("--min-r2", type=float, default=0.95,
                   help="minimum acceptable r^2 (default 0.95)")
    p.add_argument("--force", action="store_true",
                   help="write even if some r^2 is below the bar")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gen-trace", help="synthesize a routing trace")
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--dist", choices=["uniform", "zipf"], default="uniform")
    p.add_argument("--zipf-s", type=float, default=None,
                   help="Zipf exponent for --dist zipf")
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0,
                   help=f"base seed (env {SEED_ENV} overrides)")
    p.add_argument("--out", required=True, help="output trace CSV")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("analyze", help="dimension selection report for a trace")
    p.add_argument("--topology", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--csv", required=True, help="output report CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="expert-swap plans per layer")
    p.add_argument("--topology", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--placement", default=None,
                   help="input placement JSON (default: identity)")
    p.add_argument("--out", required=True, help="output swap plan JSON")
    p.add_argument("--out-placement", required=True,
                   help="output updated placement JSON")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="multi-iteration strategy comparison")
    p.add_argument("--config", required=True, help="simulation config JSON")
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--csv", required=True, help="output report CSV")
    p.add_argument("--threads", type=int, default=0,
                   help="worker threads (default: all cores); results are "
                        "independent of this")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FitQualityError:
        return EXIT_FIT_QUALITY
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
