"""Expert-swap planning against the hierarchical dedup cost model.

For every candidate slot pair (r, c) we need the duplicate-free group counts
the dispatch would see after exchanging the experts in those slots. Doing a
full recount per pair costs O(T * K * E^2) per level; the incremental builder
gets the same tensors in O(T * K * E) adjustments by starting from the
no-swap counts and applying a per-token case analysis:

Swapping (r, c) changes a token's selections only when it selects exactly one
of the two slots, say A selected and B not; then A leaves the selection set
and B enters it. Per group, only two adjustments can happen:

  * the count of B's group rises iff the token selects nothing else there
    (otherwise the group was already hit and stays hit);
  * the count of A's group drops iff A was the token's only selection there
    and B lands in a different group (otherwise the group stays hit).

The per-pair count vectors are scored by a smooth maximum (an L^gamma norm,
exact max as gamma -> infinity) to soften plateaus in the argmin landscape;
the reported saving is always re-evaluated under the exact max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .routing import MaskLike, Placement, propagate_level, slot_view
from .topology import LevelParams, Topology
from .traffic import dedup_counts, optimal_dimension


def smooth_max(x, gamma: float) -> float:
    """Smooth upper bound of max(x): max(x) * (sum((x/max)^gamma))^(1/gamma).

    Monotone in gamma, always >= max(x), at most max(x) * len(x)^(1/gamma),
    and equal to the exact maximum at gamma = inf. All-zero input gives 0.
    """
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("smooth_max of an empty vector")
    if np.any(x < 0):
        raise ValueError("smooth_max requires non-negative entries")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    return float(_smooth_max_lastaxis(x[None, :], gamma)[0])


def _smooth_max_lastaxis(z: np.ndarray, gamma: float) -> np.ndarray:
    """smooth_max along the last axis; all-zero slices map to 0."""
    m = z.max(axis=-1)
    safe = np.where(m > 0, m, 1.0)
    ratios = z / safe[..., None]
    total = np.power(ratios, gamma).sum(axis=-1)
    return np.where(m > 0, safe * np.power(total, 1.0 / gamma), 0.0)


@dataclass(frozen=True)
class SwapTensors:
    """Per-swap-pair duplicate-free group counts.

    ``inter[i-1][r, c, k]`` is the inter-level-i count of group k after
    swapping slots r and c; ``intra[r, c, k]`` is the per-GPU-group count
    feeding the final phase (identical for every dimension, because per-GPU
    groups refine every coarser level cut). Both are symmetric in (r, c) and
    their diagonals carry the no-swap counts.

    ``adjust_ops`` counts the four-case +-1 adjustments the incremental
    builder applied; ``dedup_calls`` counts full group recounts performed by
    the brute-force builder. Each builder fills only its own counter.
    """

    inter: tuple[np.ndarray, ...]
    intra: np.ndarray
    adjust_ops: int = 0
    dedup_calls: int = 0


def _swap_tensor_incremental(bits: np.ndarray, groups: int) -> tuple[np.ndarray, int]:
    """Per-pair dedup counts over `groups` slot groups, via case adjustments.

    Returns the E x E x groups tensor plus the number of +-1 adjustments a
    per-token sweep would apply (the aggregation below computes identical
    totals with three dense products).
    """
    n_tokens, n_experts = bits.shape
    size = n_experts // groups
    grouped = bits.reshape(n_tokens, groups, size)
    hit = grouped.any(axis=2)
    base = hit.sum(axis=0, dtype=np.int64)

    # Tokens whose selection is alone in its group: the only case where the
    # selected side of a swap loses its group hit.
    per_group_sel = grouped.sum(axis=2)
    lone = bits & np.repeat(per_group_sel == 1, size, axis=1)

    # raises[a, k]: tokens that select slot a and do not hit group k. Every
    # slot of such a group is unselected, so each (a, b in group k) pair
    # gains one count at k after the swap.
    raises = bits.T.astype(float) @ (~hit).astype(float)
    # drops[a, b]: tokens where slot a is a lone selection and slot b is
    # unselected; the pair loses one count at a's group unless b shares it.
    drops = lone.T.astype(float) @ (~bits).astype(float)

    col_group = np.arange(n_experts) // size
    other_group = col_group[None, :] != col_group[:, None]

    delta = np.zeros((n_experts, n_experts, groups))
    for k in range(groups):
        members = slice(k * size, (k + 1) * size)
        delta[:, members, k] += raises[:, k][:, None]
        delta[members, :, k] -= drops[members, :] * other_group[members, :]

    tensor = np.rint(base[None, None, :] + delta + delta.transpose(1, 0, 2))
    ops = int(raises.sum()) * size + int((drops * other_group).sum())
    return tensor.astype(np.int64), ops


def swap_tensors_incremental(mask: MaskLike, topology: Topology,
                             placement: Placement | None = None,
                             dim: int | None = None) -> SwapTensors:
    """Build all swap count tensors with the incremental case analysis.

    `dim` limits the inter tensors to levels 1..dim-1 (the ones the
    dim-dimensional cost needs); by default every level is built.
    """
    bits = slot_view(mask, placement)
    upto = topology.num_levels if dim is None else dim
    inter = []
    ops = 0
    for level in range(1, upto):
        tensor, n = _swap_tensor_incremental(bits, topology.level_group_counts[level])
        inter.append(tensor)
        ops += n
    intra, n = _swap_tensor_incremental(bits, topology.num_gpus)
    return SwapTensors(inter=tuple(inter), intra=intra, adjust_ops=ops + n)


def swap_tensors_oracle(mask: MaskLike, topology: Topology,
                        placement: Placement | None = None) -> SwapTensors:
    """Reference builder: materialize every swap and recount from scratch.

    For each pair the swapped mask is re-propagated level by level and the
    dedup counts recomputed, including the consistency check that every
    level's copy mask yields the same per-GPU counts.
    """
    bits = slot_view(mask, placement)
    n_experts = bits.shape[1]
    depth = topology.num_levels
    u = topology.level_group_counts
    gpus = topology.num_gpus

    inter = [np.zeros((n_experts, n_experts, u[i]), dtype=np.int64)
             for i in range(1, depth)]
    intra = np.zeros((n_experts, n_experts, gpus), dtype=np.int64)
    calls = 0

    for r in range(n_experts):
        for c in range(r, n_experts):
            swapped = bits.copy()
            swapped[:, [r, c]] = swapped[:, [c, r]]
            current: MaskLike = swapped
            per_gpu = dedup_counts(current, gpus, topology).counts
            calls += 1
            for level in range(1, depth):
                counts = dedup_counts(current, u[level], topology).counts
                calls += 1
                inter[level - 1][r, c] = inter[level - 1][c, r] = counts
                current = propagate_level(current, topology)
                deeper = dedup_counts(current, gpus, topology).counts
                calls += 1
                if not np.array_equal(deeper, per_gpu):
                    raise AssertionError("per-GPU counts changed across levels")
            intra[r, c] = intra[c, r] = per_gpu
    return SwapTensors(inter=tuple(inter), intra=intra, dedup_calls=calls)


def cost_matrix(tensors: SwapTensors, topology: Topology, params: LevelParams,
                dim: int, gamma: float) -> np.ndarray:
    """Predicted seconds of the dim-dimensional dispatch per swap pair.

    Phase volumes use the smooth maximum of each pair's count vector;
    gamma = inf reproduces the exact-max traffic model, so the diagonal then
    equals the no-swap predicted time.
    """
    if not 1 <= dim <= topology.num_levels:
        raise ValueError(f"dimension {dim} out of range 1..{topology.num_levels}")
    if len(tensors.inter) < dim - 1:
        raise ValueError(f"tensors carry {len(tensors.inter)} inter levels, "
                         f"dimension {dim} needs {dim - 1}")
    u = topology.level_group_counts
    token_bytes = topology.token_bytes()
    n = tensors.intra.shape[0]
    q = np.zeros((n, n))
    for level in range(1, dim):
        alpha, beta = params.inter(level)
        participants = u[level] // u[level - 1]
        vol = participants * _smooth_max_lastaxis(tensors.inter[level - 1], gamma)
        q += vol * token_bytes * beta + alpha
    alpha, beta = params.intra(dim - 1)
    participants = topology.num_gpus // u[dim - 1]
    vol = participants * _smooth_max_lastaxis(tensors.intra, gamma)
    q += vol * token_bytes * beta + alpha
    return q


@dataclass(frozen=True)
class SwapPlan:
    """Outcome of one swap-selection step.

    ``pair`` is None when no swap improves on the current placement. The
    saving and ``no_swap_time`` are exact-max re-evaluations (the deployed
    cost model), not the smooth-max scores used for the argmin.
    """

    cost_matrix: np.ndarray
    pair: tuple[int, int] | None
    predicted_saving: float
    gamma: float
    d_star: int
    no_swap_time: float


def select_swap(mask: MaskLike, topology: Topology, params: LevelParams,
                gamma: float = 10.0,
                placement: Placement | None = None) -> SwapPlan:
    """Pick the slot pair whose swap minimizes the predicted dispatch time.

    The dimension is fixed first from the unswapped counts, the smooth-max
    cost matrix is minimized over all pairs including the no-swap diagonal
    (ties go to the lexicographically smallest pair), and the winner is kept
    only if the exact-max model confirms a non-negative saving.
    """
    d_star, _ = optimal_dimension(mask, topology, params, placement)
    tensors = swap_tensors_incremental(mask, topology, placement, dim=d_star)
    q = cost_matrix(tensors, topology, params, d_star, gamma)

    flat = int(np.argmin(q))
    r, c = divmod(flat, q.shape[1])
    q_exact = cost_matrix(tensors, topology, params, d_star, math.inf)
    no_swap = float(q_exact[0, 0])

    if r == c:
        return SwapPlan(q, None, 0.0, gamma, d_star, no_swap)
    saving = no_swap - float(q_exact[r, c])
    if saving < 0:
        # Smooth-max preferred a flatter but taller vector; refuse the swap so
        # the exact-max predicted time never increases.
        return SwapPlan(q, None, 0.0, gamma, d_star, no_swap)
    return SwapPlan(q, (r, c), saving, gamma, d_star, no_swap)


def apply_swap(placement: Placement, pair: tuple[int, int] | None) -> Placement:
    """Apply a planned swap; a None pair leaves the placement unchanged."""
    if pair is None:
        return placement
    return placement.swapped(*pair)
