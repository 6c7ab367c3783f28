"""Multi-iteration, multi-layer dispatch-time simulation.

Replays or synthesizes one routing mask per (iteration, layer) and predicts
the AlltoAll time of several strategies on it:

  std    standard single-phase AlltoAll, no deduplication
  h<d>   fixed d-dimensional hierarchical AlltoAll, no deduplication
  hd<d>  fixed d-dimensional hierarchical AlltoAll with deduplication
  hd     deduplicated AlltoAll at the per-mask optimal dimension
  hier   hd plus expert swapping: a per-layer placement is updated every
         `swap_frequency` iterations by the swap planner

Placements are per-layer and affect only `hier`. Everything is deterministic
given the config; layers are independent and may be evaluated concurrently.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .routing import Placement, RoutingMask, generate_skewed, layer_seed
from .swap import apply_swap, select_swap
from .topology import LevelParams, Topology
from .traffic import all_times, optimal_dimension, pick_dimension


def strategy_names(num_levels: int) -> list[str]:
    names = ["std"]
    names += [f"h{d}" for d in range(1, num_levels + 1)]
    names += [f"hd{d}" for d in range(1, num_levels + 1)]
    names += ["hd", "hier"]
    return names


@dataclass(frozen=True)
class SimConfig:
    """Inputs of one simulation run."""

    topology: Topology
    params: LevelParams
    iterations: int
    layers: int
    tokens: int
    routing: str = "uniform"          # "uniform" | "zipf" | "trace"
    zipf_s: float = 0.0
    top_k: int = 2
    trace: list[tuple[int, int, RoutingMask]] | None = None
    swap_frequency: int = 1           # iterations between swap updates; 0 disables
    swap_lag: int = 0                 # 1 = apply each plan to the next iteration
    gamma: float = 10.0
    base_seed: int = 0
    strategies: tuple[str, ...] = ()  # empty = all

    def __post_init__(self):
        if self.iterations < 1 or self.layers < 1:
            raise ValueError("iterations and layers must be >= 1")
        if self.swap_frequency < 0:
            raise ValueError("swap_frequency must be >= 0")
        if self.swap_lag not in (0, 1):
            raise ValueError("swap_lag must be 0 or 1")
        if self.routing not in ("uniform", "zipf", "trace"):
            raise ValueError(f"unknown routing source {self.routing!r}")
        known = set(strategy_names(self.topology.num_levels))
        for s in self.strategies:
            if s not in known:
                raise ValueError(f"unknown strategy {s!r}; pick from {sorted(known)}")

    def enabled_strategies(self) -> list[str]:
        if self.strategies:
            # Keep canonical ordering; std is always evaluated as the baseline.
            chosen = set(self.strategies) | {"std"}
            return [s for s in strategy_names(self.topology.num_levels) if s in chosen]
        return strategy_names(self.topology.num_levels)


@dataclass
class SimReport:
    """Per-cell predicted seconds plus aggregates and the swap log."""

    strategies: list[str]
    # seconds[(iteration, layer, strategy)] -> predicted seconds
    seconds: dict[tuple[int, int, str], float] = field(default_factory=dict)
    d_star: dict[tuple[int, int], int] = field(default_factory=dict)
    swap_log: list[dict] = field(default_factory=list)

    def aggregate(self, strategy: str) -> float:
        vals = [v for (_, _, s), v in self.seconds.items() if s == strategy]
        return float(np.mean(vals))

    def speedup_vs_std(self, strategy: str) -> float:
        return self.aggregate("std") / self.aggregate(strategy)

    def iteration_series(self, strategy: str, layer: int) -> np.ndarray:
        keys = sorted(k[0] for k in self.seconds if k[1] == layer and k[2] == strategy)
        return np.array([self.seconds[(i, layer, strategy)] for i in keys])

    def to_dict(self) -> dict:
        return {
            "strategies": self.strategies,
            "cells": [
                {"iter": i, "layer": l, "strategy": s, "seconds": v,
                 "d_star": self.d_star.get((i, l))}
                for (i, l, s), v in sorted(self.seconds.items())
            ],
            "aggregate_seconds": {s: self.aggregate(s) for s in self.strategies},
            "speedup_vs_std": {s: self.speedup_vs_std(s) for s in self.strategies},
            "swap_log": self.swap_log,
        }


# Keeps per-layer popularity rankings clear of the per-iteration seed range.
_RANKING_SEED_OFFSET = 2**48


def _mask_for(config: SimConfig, iteration: int, layer: int) -> RoutingMask:
    if config.routing == "trace":
        assert config.trace is not None
        for it, ly, mask in config.trace:
            if it == iteration and ly == layer:
                return mask
        raise ValueError(f"trace has no entry for iteration {iteration} "
                         f"layer {layer}")
    seed = layer_seed(config.base_seed, iteration, layer)
    if config.routing == "zipf":
        # The popularity ranking persists across a layer's iterations, so
        # placement updates face a stable skew rather than fresh noise.
        ranking_seed = _RANKING_SEED_OFFSET + layer_seed(config.base_seed, 0, layer)
        return generate_skewed(config.tokens, config.topology.experts,
                               config.top_k, config.zipf_s, seed, ranking_seed)
    return generate_skewed(config.tokens, config.topology.experts,
                           config.top_k, 0.0, seed)


def _run_layer(config: SimConfig, layer: int,
               wanted: list[str]) -> tuple[dict, dict, list[dict]]:
    """Simulate all iterations of one layer (placement state lives here)."""
    topo, params = config.topology, config.params
    depth = topo.num_levels
    seconds: dict[tuple[int, int, str], float] = {}
    d_stars: dict[tuple[int, int], int] = {}
    swap_log: list[dict] = []

    need_fixed = any(s for s in wanted if s[0] == "h" and s not in ("hd", "hier"))
    placement = Placement.identity(topo.experts)
    pending_pair = None

    for iteration in range(config.iterations):
        mask = _mask_for(config, iteration, layer)

        dedup_times, _, _ = all_times(mask, topo, params, None, dedup=True)
        if need_fixed or "std" in wanted:
            raw_times, _, _ = all_times(mask, topo, params, None, dedup=False)
        else:
            raw_times = None

        if "std" in wanted:
            seconds[(iteration, layer, "std")] = raw_times[0]
        for d in range(1, depth + 1):
            if f"h{d}" in wanted:
                seconds[(iteration, layer, f"h{d}")] = raw_times[d - 1]
            if f"hd{d}" in wanted:
                seconds[(iteration, layer, f"hd{d}")] = dedup_times[d - 1]
        d_star = pick_dimension(dedup_times)
        d_stars[(iteration, layer)] = d_star
        if "hd" in wanted:
            seconds[(iteration, layer, "hd")] = dedup_times[d_star - 1]

        if "hier" in wanted:
            if pending_pair is not None:
                placement = apply_swap(placement, pending_pair)
                pending_pair = None
            update = (config.swap_frequency > 0
                      and iteration % config.swap_frequency == 0)
            if update:
                plan = select_swap(mask, topo, params, config.gamma, placement)
                swap_log.append({
                    "iter": iteration, "layer": layer, "d_star": plan.d_star,
                    "pair": list(plan.pair) if plan.pair else None,
                    "predicted_saving_s": plan.predicted_saving,
                })
                if config.swap_lag == 0:
                    placement = apply_swap(placement, plan.pair)
                else:
                    pending_pair = plan.pair
            d_hier, report = optimal_dimension(mask, topo, params, placement)
            seconds[(iteration, layer, "hier")] = report.best_time

    return seconds, d_stars, swap_log


def run_simulation(config: SimConfig, threads: int = 1) -> SimReport:
    """Run the full grid; results are independent of the thread count."""
    if config.routing == "trace":
        if config.trace is None:
            raise ValueError("routing source is 'trace' but no trace is loaded")
        have = {(it, ly) for it, ly, _ in config.trace}
        need = {(i, l) for i in range(config.iterations) for l in range(config.layers)}
        missing = need - have
        if missing:
            raise ValueError(f"trace is missing {len(missing)} of "
                             f"{len(need)} (iteration, layer) masks, e.g. "
                             f"{sorted(missing)[0]}")

    wanted = config.enabled_strategies()
    report = SimReport(strategies=wanted)

    if threads > 1 and config.layers > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda l: _run_layer(config, l, wanted), range(config.layers)))
    else:
        results = [_run_layer(config, l, wanted) for l in range(config.layers)]

    for seconds, d_stars, swap_log in results:
        report.seconds.update(seconds)
        report.d_star.update(d_stars)
        report.swap_log.extend(swap_log)
    report.swap_log.sort(key=lambda e: (e["iter"], e["layer"]))
    return report


def stability_metric(report: SimReport, strategy: str, layer: int = 0) -> float:
    """Coefficient of variation (population std / mean) across iterations."""
    series = report.iteration_series(strategy, layer)
    if series.size == 0:
        raise ValueError(f"no cells recorded for strategy {strategy!r} "
                         f"layer {layer}")
    mean = float(series.mean())
    if mean == 0.0:
        return 0.0
    return float(series.std() / mean)
