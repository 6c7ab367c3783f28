"""Token-to-expert routing masks, expert placement, and level propagation.

A routing mask is a boolean tokens x experts matrix with a fixed number of
selections per row (top-K gating). Masks can be synthesized (uniform or
Zipf-skewed), replayed from a trace CSV, re-indexed through an expert
placement, and propagated down the hierarchy: dispatching at level l turns
each token into one copy per level-l group it selects, with the copy's
selections restricted to that group.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Union

import numpy as np

from .topology import Topology


class TraceFormatError(ValueError):
    """Malformed routing trace file."""


def layer_seed(base_seed: int, iteration: int, layer: int) -> int:
    """Deterministic per-(iteration, layer) seed schedule."""
    return base_seed + iteration * 65536 + layer


@dataclass(frozen=True)
class RoutingMask:
    """Boolean token x expert selection matrix with exactly `top_k` picks per row."""

    bits: np.ndarray
    top_k: int

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.dtype != np.bool_:
            raise ValueError("bits must be a 2-D boolean array")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} out of range for "
                             f"{self.num_experts} experts")
        counts = self.bits.sum(axis=1)
        bad = np.nonzero(counts != self.top_k)[0]
        if bad.size:
            raise ValueError(f"row {bad[0]} selects {counts[bad[0]]} experts, "
                             f"expected {self.top_k}")

    @property
    def num_tokens(self) -> int:
        return self.bits.shape[0]

    @property
    def num_experts(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class PropagatedMask:
    """Per-copy routing mask feeding the inter-level-`level` dispatch.

    Each row is one copy of an origin token, confined to a single
    level-(level-1) expert group.
    """

    level: int
    bits: np.ndarray
    origin_token: np.ndarray
    parent_group: np.ndarray

    @property
    def num_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def num_experts(self) -> int:
        return self.bits.shape[1]


MaskLike = Union[RoutingMask, PropagatedMask, np.ndarray]


def mask_bits(mask: MaskLike) -> np.ndarray:
    """Boolean row matrix of a RoutingMask, PropagatedMask, or raw array."""
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits)
    if bits.dtype != np.bool_:
        bits = bits.astype(bool)
    return bits


def mask_level(mask: MaskLike) -> int:
    """Hierarchy level a mask feeds; plain routing masks are level 1."""
    return getattr(mask, "level", 1)


def slot_view(mask: MaskLike, placement: "Placement | None") -> np.ndarray:
    """Bit matrix re-indexed into slot space under a placement (or as-is)."""
    bits = mask_bits(mask)
    if placement is None:
        return bits
    if placement.num_experts != bits.shape[1]:
        raise ValueError(f"placement covers {placement.num_experts} experts, "
                         f"mask has {bits.shape[1]}")
    return bits[:, placement.slot_to_expert]


@dataclass(frozen=True)
class Placement:
    """Expert-to-slot assignment: slot_to_expert[s] = expert occupying slot s."""

    slot_to_expert: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.slot_to_expert)
        n = perm.size
        if not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("slot_to_expert must be a permutation of 0..E-1")

    @staticmethod
    def identity(num_experts: int) -> "Placement":
        return Placement(np.arange(num_experts))

    @property
    def num_experts(self) -> int:
        return self.slot_to_expert.size

    def swapped(self, r: int, c: int) -> "Placement":
        """New placement with the occupants of slots r and c exchanged."""
        perm = self.slot_to_expert.copy()
        perm[[r, c]] = perm[[c, r]]
        return Placement(perm)


def generate_uniform(num_tokens: int, num_experts: int, top_k: int,
                     seed: int) -> RoutingMask:
    """Each token independently picks `top_k` distinct experts uniformly."""
    return generate_skewed(num_tokens, num_experts, top_k, 0.0, seed)


def generate_skewed(num_tokens: int, num_experts: int, top_k: int,
                    zipf_s: float, seed: int,
                    ranking_seed: int | None = None) -> RoutingMask:
    """Top-K selection with Zipf(s)-distributed expert popularity.

    Expert weights follow 1/rank^s over a seed-derived random ranking of the
    experts; each token draws `top_k` distinct experts with probability
    proportional to weight (weighted sampling without replacement).
    ``zipf_s=0`` gives equal weights, i.e. plain uniform selection.

    ``ranking_seed`` pins the popularity ranking separately from the token
    draws, so successive masks can share a persistent skew pattern.
    """
    if top_k > num_experts:
        raise ValueError(f"top_k={top_k} exceeds expert count {num_experts}")
    if zipf_s < 0:
        raise ValueError(f"zipf_s must be >= 0, got {zipf_s}")
    rng = np.random.default_rng(seed)
    rank_rng = rng if ranking_seed is None else np.random.default_rng(ranking_seed)
    ranking = rank_rng.permutation(num_experts)
    weights = np.empty(num_experts)
    weights[ranking] = 1.0 / (np.arange(1, num_experts + 1) ** zipf_s)

    bits = np.zeros((num_tokens, num_experts), dtype=bool)
    # Exponential-race sampling: the top_k smallest Exp(1)/w keys are a
    # weighted sample without replacement.
    chunk = max(1, min(num_tokens, 4_000_000 // max(num_experts, 1)))
    for start in range(0, num_tokens, chunk):
        n = min(chunk, num_tokens - start)
        keys = rng.exponential(size=(n, num_experts)) / weights
        picks = np.argpartition(keys, top_k - 1, axis=1)[:, :top_k]
        bits[start + np.arange(n)[:, None], picks] = True
    return RoutingMask(bits, top_k)


def apply_placement(mask: RoutingMask, placement: Placement) -> RoutingMask:
    """Re-index an expert-space mask into slot space.

    Output row t selects slot s iff the input row selects the expert
    occupying slot s.
    """
    if placement.num_experts != mask.num_experts:
        raise ValueError(f"placement covers {placement.num_experts} experts, "
                         f"mask has {mask.num_experts}")
    return RoutingMask(mask.bits[:, placement.slot_to_expert], mask.top_k)


def propagate_level(mask: MaskLike, topology: Topology) -> PropagatedMask:
    """Split every row by the level-l groups it selects (l = the mask's level).

    For each input row and each level-l group in which the row selects at
    least one expert, one output row is emitted carrying the row's selections
    restricted to that group. The output feeds the level-(l+1) dispatch.
    """
    level = mask_level(mask)
    if level >= topology.num_levels:
        raise ValueError(f"cannot propagate past level {topology.num_levels}")
    bits = mask_bits(mask)
    n_rows, n_experts = bits.shape
    groups = topology.level_group_counts[level]
    size = n_experts // groups

    grouped = bits.reshape(n_rows, groups, size)
    hit = grouped.any(axis=2)
    rows, grp = np.nonzero(hit)

    out = np.zeros((rows.size, n_experts), dtype=bool)
    cols = grp[:, None] * size + np.arange(size)[None, :]
    out[np.arange(rows.size)[:, None], cols] = grouped[rows, grp]

    origin = getattr(mask, "origin_token", None)
    origin = rows if origin is None else np.asarray(origin)[rows]
    return PropagatedMask(level=level + 1, bits=out,
                          origin_token=origin, parent_group=grp)


def save_trace(masks: list[tuple[int, int, RoutingMask]], path) -> None:
    """Write (iteration, layer, mask) triples as a trace CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "layer", "token", "experts"])
        for iteration, layer, mask in masks:
            for token in range(mask.num_tokens):
                experts = np.nonzero(mask.bits[token])[0]
                writer.writerow([iteration, layer, token,
                                 ";".join(str(e) for e in experts)])


def load_trace(path, num_experts: int) -> list[tuple[int, int, RoutingMask]]:
    """Parse a trace CSV back into (iteration, layer, mask) triples.

    Rows must be grouped by (iter, layer) with tokens numbered 0..T-1 in
    order; every row of a mask must select the same number of experts.
    """
    entries: list[tuple[int, int, RoutingMask]] = []
    cur_key = None
    cur_rows: list[np.ndarray] = []

    def flush():
        if cur_key is None:
            return
        k = int(cur_rows[0].sum())
        bits = np.vstack(cur_rows)
        counts = bits.sum(axis=1)
        bad = np.nonzero(counts != k)[0]
        if bad.size:
            raise TraceFormatError(
                f"{path}: iter {cur_key[0]} layer {cur_key[1]} token {bad[0]} "
                f"selects {counts[bad[0]]} experts, expected {k}")
        entries.append((cur_key[0], cur_key[1], RoutingMask(bits, k)))

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["iter", "layer", "token", "experts"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise TraceFormatError(f"{path}: expected header "
                                   f"'iter,layer,token,experts', got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["iter"]), int(row["layer"]))
                token = int(row["token"])
                ids = [int(e) for e in row["experts"].split(";") if e != ""]
            except (TypeError, ValueError, AttributeError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: unparsable row") from exc
            if not ids:
                raise TraceFormatError(f"{path}:{lineno}: token {token} selects "
                                       f"no experts")
            if max(ids) >= num_experts or min(ids) < 0:
                raise TraceFormatError(f"{path}:{lineno}: expert id {max(ids)} "
                                       f"out of range for {num_experts} experts")
            if len(set(ids)) != len(ids):
                raise TraceFormatError(f"{path}:{lineno}: duplicate expert ids")
            if key != cur_key:
                flush()
                cur_key, cur_rows = key, []
            if token != len(cur_rows):
                raise TraceFormatError(f"{path}:{lineno}: token ids must be "
                                       f"0..T-1 in order, got {token}")
            bits_row = np.zeros(num_experts, dtype=bool)
            bits_row[ids] = True
            cur_rows.append(bits_row)
        flush()
    return entries
