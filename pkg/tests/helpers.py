"""Shared generators for randomized tests."""

import numpy as np

from hiera2a import LevelParams, build_topology
from hiera2a.routing import generate_skewed


def random_params(rng, num_levels: int) -> LevelParams:
    return LevelParams(
        alpha_inter=tuple(float(rng.uniform(0.0, 1e-4)) for _ in range(num_levels - 1)),
        beta_inter=tuple(float(rng.uniform(1e-8, 1e-6)) for _ in range(num_levels - 1)),
        alpha_intra=tuple(float(rng.uniform(0.0, 1e-4)) for _ in range(num_levels)),
        beta_intra=tuple(float(rng.uniform(1e-9, 1e-7)) for _ in range(num_levels)),
    )


def random_mask_bits(rng, num_tokens: int, num_experts: int) -> np.ndarray:
    """Random boolean rows with at least one selection each (variable popcount)."""
    bits = rng.random((num_tokens, num_experts)) < rng.uniform(0.1, 0.6)
    empty = ~bits.any(axis=1)
    bits[empty, rng.integers(0, num_experts, size=int(empty.sum()))] = True
    return bits


def skewed_instance(rng, fanout_choices, experts_per_gpu=(4, 8), top_k_max=3,
                    tokens=(64, 256), zipf=(1.0, 1.5)):
    """A (topology, params, mask) triple with Zipf-skewed routing."""
    fanouts = fanout_choices[int(rng.integers(0, len(fanout_choices)))]
    gpus = int(np.prod(fanouts))
    experts = gpus * int(rng.integers(experts_per_gpu[0], experts_per_gpu[1] + 1))
    topo = build_topology(list(fanouts), experts, 8, 2)
    top_k = int(rng.integers(1, min(experts, top_k_max) + 1))
    num_tokens = int(rng.integers(tokens[0], tokens[1] + 1))
    zipf_s = float(rng.uniform(*zipf))
    mask = generate_skewed(num_tokens, experts, top_k, zipf_s,
                           int(rng.integers(0, 2**31)))
    return topo, random_params(rng, topo.num_levels), mask


def reference_times_and_dim(bits, topo, params):
    """Independent dispatch-time evaluator.

    Counts duplicate-free tokens per group in pure Python straight off the
    slot mask (per-GPU groups refine every level cut, so no copy tracking is
    needed), evaluates every dimension's phase sum, and applies the
    two-branch dimension rule.
    """
    experts = topo.experts
    u = topo.level_group_counts
    gpus = topo.num_gpus
    token_bytes = topo.embed_dim * topo.bytes_per_elem

    def max_dedup(groups):
        size = experts // groups
        counts = [0] * groups
        for row in bits:
            for grp in {int(i) // size for i in np.nonzero(row)[0]}:
                counts[grp] += 1
        return max(counts) if counts else 0

    times = []
    for dim in range(1, topo.num_levels + 1):
        total = 0.0
        for level in range(1, dim):
            alpha, beta = params.inter(level)
            total += ((u[level] // u[level - 1]) * max_dedup(u[level])
                      * token_bytes * beta + alpha)
        alpha, beta = params.intra(dim - 1)
        total += (gpus // u[dim - 1]) * max_dedup(gpus) * token_bytes * beta + alpha
        times.append(total)
    if len(times) == 1:
        best_dim = 1
    else:
        best = min(times[1:])
        best_dim = 1 if times[0] < best else 2 + times[1:].index(best)
    return times, best_dim
