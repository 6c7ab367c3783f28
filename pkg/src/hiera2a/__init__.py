"""Planner and simulator for hierarchical deduplicated MoE AlltoAll dispatch."""

from .topology import (ConfigError, FitError, FitResult, LevelParams,
                       Measurement, Topology, build_topology, fit_params,
                       load_measurements, load_params, load_topology,
                       save_params, save_topology)
from .routing import (Placement, PropagatedMask, RoutingMask, TraceFormatError,
                      apply_placement, generate_skewed, generate_uniform,
                      layer_seed, load_trace, propagate_level, save_trace)
from .traffic import (GroupCounts, TrafficReport, bytes_inter, bytes_intra,
                      bytes_standard, dedup_counts, duplication_rate,
                      group_reduce, optimal_dimension, raw_counts,
                      time_with_dedup, time_without_dedup)
from .swap import (SwapPlan, SwapTensors, apply_swap, cost_matrix, select_swap,
                   smooth_max, swap_tensors_incremental, swap_tensors_oracle)

__version__ = "0.1.0"
