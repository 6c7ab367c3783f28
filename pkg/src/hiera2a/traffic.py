"""Per-level traffic counting and the hierarchical AlltoAll time model.

A d-dimensional hierarchical AlltoAll runs inter-level-1 .. inter-level-(d-1)
phases followed by one intra-level-(d-1) phase. Each phase moves
``participants * max(group_counts) * token_bytes`` bytes, where the group
counts are duplicate-free (one copy per token per destination group) or raw
(one copy per selection) depending on the variant. Phase time is
``alpha + bytes * beta`` with the phase's fitted parameters; the predicted
total over the phases of each candidate d picks the best dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import MaskLike, Placement, mask_bits, mask_level, \
    propagate_level, slot_view
from .topology import LevelParams, Topology


@dataclass(frozen=True)
class GroupCounts:
    """Token counts per expert group for one dispatch phase."""

    level: int
    group_count: int
    counts: np.ndarray

    def max(self) -> int:
        return int(self.counts.max()) if self.counts.size else 0

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class TrafficReport:
    """Predicted times for every candidate dimension plus the chosen one.

    ``times[d-1]`` is the predicted seconds of the d-dimensional variant.
    ``inter_bytes[i-1]`` is the inter-level-i phase volume (shared by every
    d > i); ``intra_bytes[d-1]`` is the final-phase volume of dimension d.
    """

    times: tuple[float, ...]
    inter_bytes: tuple[int, ...]
    intra_bytes: tuple[int, ...]
    d_star: int
    dup_rate_per_level: tuple[float, ...]

    @property
    def best_time(self) -> float:
        return self.times[self.d_star - 1]


def group_reduce(mask: MaskLike, groups: int, topology: Topology) -> np.ndarray:
    """OR-reduce expert columns into `groups` contiguous group columns."""
    bits = mask_bits(mask)
    n_experts = bits.shape[1]
    if groups < 1 or n_experts % groups != 0:
        raise ValueError(f"group count {groups} does not divide {n_experts} experts")
    return bits.reshape(bits.shape[0], groups, n_experts // groups).any(axis=2)


def dedup_counts(mask: MaskLike, groups: int, topology: Topology) -> GroupCounts:
    """Duplicate-free tokens per group: each row counts once per group it hits."""
    reduced = group_reduce(mask, groups, topology)
    return GroupCounts(level=mask_level(mask), group_count=groups,
                       counts=reduced.sum(axis=0, dtype=np.int64))


def raw_counts(mask: MaskLike, groups: int, topology: Topology) -> GroupCounts:
    """Selection counts per group with multiplicity kept (no deduplication)."""
    bits = mask_bits(mask)
    n_experts = bits.shape[1]
    if groups < 1 or n_experts % groups != 0:
        raise ValueError(f"group count {groups} does not divide {n_experts} experts")
    counts = bits.reshape(bits.shape[0], groups, n_experts // groups).sum(
        axis=(0, 2), dtype=np.int64)
    return GroupCounts(level=mask_level(mask), group_count=groups, counts=counts)


def duplication_rate(mask: MaskLike, groups: int, topology: Topology) -> float:
    """Fraction of selections that deduplication removes at this grouping."""
    raw = raw_counts(mask, groups, topology).total()
    if raw == 0:
        return 0.0
    return 1.0 - dedup_counts(mask, groups, topology).total() / raw


def bytes_standard(counts: GroupCounts, topology: Topology) -> int:
    """Volume of the standard AlltoAll: all GPUs exchange max(counts) tokens."""
    if counts.group_count != topology.num_gpus:
        raise ValueError("standard AlltoAll counts must use one group per GPU")
    return topology.num_gpus * counts.max() * topology.token_bytes()


def bytes_inter(level: int, counts: GroupCounts, topology: Topology) -> int:
    """Volume of the inter-level-`level` phase.

    The phase splits experts into ``level_group_counts[level]`` groups; each
    participant set spans ``level_group_counts[level] /
    level_group_counts[level-1]`` of them.
    """
    u = topology.level_group_counts
    if counts.group_count != u[level]:
        raise ValueError(f"inter-level-{level} counts must cover {u[level]} groups")
    participants = u[level] // u[level - 1]
    return participants * counts.max() * topology.token_bytes()


def bytes_intra(dim: int, counts: GroupCounts, topology: Topology) -> int:
    """Volume of the final (intra-level-(dim-1)) phase of the dim-D variant."""
    if counts.group_count != topology.num_gpus:
        raise ValueError("intra-phase counts must use one group per GPU")
    u = topology.level_group_counts
    participants = topology.num_gpus // u[dim - 1]
    return participants * counts.max() * topology.token_bytes()


def _phase_counts(mask: MaskLike, topology: Topology,
                  placement: Placement | None, dedup: bool,
                  upto_dim: int) -> tuple[list[GroupCounts], list[GroupCounts]]:
    """Group counts for every phase of dimensions 1..upto_dim.

    Returns (inter, intra): inter[i-1] holds the inter-level-i counts over
    ``level_group_counts[i]`` groups of the level-i copy mask, and
    intra[d-1] holds the per-GPU counts of the level-d copy mask, i.e. the
    final-phase counts of the d-dimensional variant.
    """
    counter = dedup_counts if dedup else raw_counts
    current: MaskLike = slot_view(mask, placement)
    inter: list[GroupCounts] = []
    intra: list[GroupCounts] = [counter(current, topology.num_gpus, topology)]
    for level in range(1, upto_dim):
        inter.append(counter(current, topology.level_group_counts[level], topology))
        current = propagate_level(current, topology)
        intra.append(counter(current, topology.num_gpus, topology))
    return inter, intra


def _time_for_dim(dim: int, inter: list[GroupCounts], intra: list[GroupCounts],
                  topology: Topology, params: LevelParams) -> float:
    total = 0.0
    for level in range(1, dim):
        alpha, beta = params.inter(level)
        total += bytes_inter(level, inter[level - 1], topology) * beta + alpha
    alpha, beta = params.intra(dim - 1)
    total += bytes_intra(dim, intra[dim - 1], topology) * beta + alpha
    return total


def time_with_dedup(dim: int, mask: MaskLike, topology: Topology,
                    params: LevelParams, placement: Placement | None = None) -> float:
    """Predicted seconds of the dim-dimensional deduplicated AlltoAll."""
    if not 1 <= dim <= topology.num_levels:
        raise ValueError(f"dimension {dim} out of range 1..{topology.num_levels}")
    inter, intra = _phase_counts(mask, topology, placement, True, dim)
    return _time_for_dim(dim, inter, intra, topology, params)


def time_without_dedup(dim: int, mask: MaskLike, topology: Topology,
                       params: LevelParams, placement: Placement | None = None) -> float:
    """Predicted seconds of the dim-dimensional AlltoAll without deduplication."""
    if not 1 <= dim <= topology.num_levels:
        raise ValueError(f"dimension {dim} out of range 1..{topology.num_levels}")
    inter, intra = _phase_counts(mask, topology, placement, False, dim)
    return _time_for_dim(dim, inter, intra, topology, params)


def all_times(mask: MaskLike, topology: Topology, params: LevelParams,
              placement: Placement | None = None,
              dedup: bool = True) -> tuple[tuple[float, ...], tuple[int, ...], tuple[int, ...]]:
    """Times for every dimension 1..D plus the per-phase byte volumes."""
    depth = topology.num_levels
    inter, intra = _phase_counts(mask, topology, placement, dedup, depth)
    times = tuple(_time_for_dim(d, inter, intra, topology, params)
                  for d in range(1, depth + 1))
    inter_bytes = tuple(bytes_inter(i, inter[i - 1], topology)
                        for i in range(1, depth))
    intra_bytes = tuple(bytes_intra(d, intra[d - 1], topology)
                        for d in range(1, depth + 1))
    return times, inter_bytes, intra_bytes


def pick_dimension(times) -> int:
    """Best dimension given per-dimension times, 1-based.

    The one-dimensional variant wins only when strictly faster than every
    deeper variant; ties among deeper variants go to the smallest dimension
    (fewer phases, fewer startup costs).
    """
    times = list(times)
    if len(times) == 1:
        return 1
    best_deep = min(range(2, len(times) + 1), key=lambda d: (times[d - 1], d))
    return 1 if times[0] < times[best_deep - 1] else best_deep


def optimal_dimension(mask: MaskLike, topology: Topology, params: LevelParams,
                      placement: Placement | None = None) -> tuple[int, TrafficReport]:
    """Evaluate every dimension with deduplicated counts and pick the best."""
    times, inter_bytes, intra_bytes = all_times(mask, topology, params,
                                                placement, dedup=True)
    d_star = pick_dimension(times)

    slot_mask: MaskLike = slot_view(mask, placement)
    u = topology.level_group_counts
    dup_rates = []
    current = slot_mask
    for level in range(1, topology.num_levels):
        dup_rates.append(duplication_rate(current, u[level], topology))
        current = propagate_level(current, topology)
    dup_rates.append(duplication_rate(current, topology.num_gpus, topology))

    report = TrafficReport(times=times, inter_bytes=inter_bytes,
                           intra_bytes=intra_bytes, d_star=d_star,
                           dup_rate_per_level=tuple(dup_rates))
    return d_star, report
