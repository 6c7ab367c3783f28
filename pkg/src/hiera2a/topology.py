"""Hierarchical interconnect description and linear cost-model parameters.

A cluster is described by its fan-outs from the top of the hierarchy down:
``level_fanouts[0]`` nodes, each split into ``level_fanouts[1]`` sub-groups,
and so on. Experts are laid out contiguously over GPUs, so the expert group
of any level is a contiguous slice of expert indices.

Per-level communication time is modeled as ``alpha + bytes * beta`` with one
(alpha, beta) pair per phase kind ("std", "inter.i", "intra.i"). Parameters
are fitted offline from (bytes, seconds) measurement series.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid topology or parameter configuration."""


class FitError(ValueError):
    """Measurement series unsuitable for least-squares fitting."""


@dataclass(frozen=True)
class Topology:
    """Static description of the GPU hierarchy and the expert layout on it.

    Attributes:
        level_fanouts: fan-out per hierarchy level, top down. Level i splits
            every level-(i-1) group into ``level_fanouts[i]`` child groups.
        experts: total expert count, divisible by the GPU count.
        embed_dim: token embedding dimension (elements).
        bytes_per_elem: bytes per embedding element.
    """

    level_fanouts: tuple[int, ...]
    experts: int
    embed_dim: int
    bytes_per_elem: int

    def __post_init__(self):
        if not self.level_fanouts:
            raise ConfigError("level_fanouts must not be empty")
        if any(f < 1 for f in self.level_fanouts):
            raise ConfigError(f"fan-outs must be >= 1, got {self.level_fanouts}")
        if max(self.level_fanouts) < 2:
            raise ConfigError("at least one fan-out must be > 1")
        # Interior fan-outs of 1 would make two levels share a group count.
        for i, f in enumerate(self.level_fanouts[:-1]):
            if f < 2:
                raise ConfigError(
                    f"fan-out at level {i + 1} is 1; level group counts must "
                    f"be strictly increasing"
                )
        if self.experts < 1 or self.experts % self.num_gpus != 0:
            raise ConfigError(
                f"experts ({self.experts}) must be a positive multiple of the "
                f"GPU count ({self.num_gpus})"
            )
        if self.embed_dim < 1 or self.bytes_per_elem < 1:
            raise ConfigError("embed_dim and bytes_per_elem must be >= 1")

    @property
    def num_levels(self) -> int:
        return len(self.level_fanouts)

    @property
    def num_gpus(self) -> int:
        return math.prod(self.level_fanouts)

    @property
    def level_group_counts(self) -> tuple[int, ...]:
        """Expert group count per level; entry 0 is 1 by convention.

        Entry i is the number of groups the inter-level-i phase splits the
        experts into (the product of the first i fan-outs).
        """
        counts = [1]
        for f in self.level_fanouts[:-1]:
            counts.append(counts[-1] * f)
        return tuple(counts)

    @property
    def experts_per_gpu(self) -> int:
        return self.experts // self.num_gpus

    def group_of_expert(self, expert: int, groups: int) -> int:
        """Group index of an expert when experts are cut into `groups` slices."""
        return expert * groups // self.experts

    def gpu_of_expert(self, expert: int) -> int:
        return self.group_of_expert(expert, self.num_gpus)

    def token_bytes(self) -> int:
        return self.embed_dim * self.bytes_per_elem


def build_topology(level_fanouts, experts: int, embed_dim: int,
                   bytes_per_elem: int) -> Topology:
    """Validate and build a Topology (see Topology invariants)."""
    return Topology(tuple(int(f) for f in level_fanouts), int(experts),
                    int(embed_dim), int(bytes_per_elem))


def load_topology(path) -> Topology:
    """Load a topology from its JSON config file."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return build_topology(raw["level_fanouts"], raw["experts"],
                              raw["embed_dim"], raw["bytes_per_elem"])
    except KeyError as exc:
        raise ConfigError(f"topology file {path} missing key {exc}") from exc


def save_topology(topology: Topology, path) -> None:
    doc = {
        "level_fanouts": list(topology.level_fanouts),
        "experts": topology.experts,
        "embed_dim": topology.embed_dim,
        "bytes_per_elem": topology.bytes_per_elem,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass(frozen=True)
class LevelParams:
    """Per-phase linear cost parameters.

    ``alpha_intra[0]`` / ``beta_intra[0]`` are the standard (one-dimensional)
    AlltoAll parameters; intra entry l covers the intra-level-l phase and
    inter entry l-1 covers the inter-level-l phase, l = 1..D-1.
    """

    alpha_inter: tuple[float, ...]  # entry i-1 -> inter-level-i, i = 1..D-1
    beta_inter: tuple[float, ...]
    alpha_intra: tuple[float, ...]  # entry l -> intra-level-l, l = 0..D-1
    beta_intra: tuple[float, ...]

    def __post_init__(self):
        if len(self.alpha_intra) != len(self.alpha_inter) + 1:
            raise ConfigError("need exactly one more intra entry than inter")
        if (len(self.alpha_inter) != len(self.beta_inter)
                or len(self.alpha_intra) != len(self.beta_intra)):
            raise ConfigError("alpha/beta lists must have matching lengths")
        for a in self.alpha_inter + self.alpha_intra:
            if a < 0:
                raise ConfigError(f"alpha must be >= 0, got {a}")
        for b in self.beta_inter + self.beta_intra:
            if b <= 0:
                raise ConfigError(f"beta must be > 0, got {b}")

    @property
    def num_levels(self) -> int:
        return len(self.alpha_intra)

    @property
    def alpha_std(self) -> float:
        return self.alpha_intra[0]

    @property
    def beta_std(self) -> float:
        return self.beta_intra[0]

    def inter(self, level: int) -> tuple[float, float]:
        """(alpha, beta) of the inter-level-`level` phase, 1 <= level <= D-1."""
        return self.alpha_inter[level - 1], self.beta_inter[level - 1]

    def intra(self, level: int) -> tuple[float, float]:
        """(alpha, beta) of the intra-level-`level` phase, 0 <= level <= D-1."""
        return self.alpha_intra[level], self.beta_intra[level]


def load_params(path, num_levels: int | None = None) -> LevelParams:
    """Load cost parameters from a JSON file keyed "std", "inter.1", ...

    If `num_levels` is given, the file must cover exactly levels 1..D-1.
    """
    with open(path) as fh:
        raw = json.load(fh)
    if "std" not in raw:
        raise ConfigError(f"params file {path} has no 'std' entry")
    levels = 1
    while f"inter.{levels}" in raw or f"intra.{levels}" in raw:
        if f"inter.{levels}" not in raw or f"intra.{levels}" not in raw:
            raise ConfigError(f"params file {path} must define both "
                              f"inter.{levels} and intra.{levels}")
        levels += 1
    if num_levels is not None and levels != num_levels:
        raise ConfigError(f"params file {path} covers {levels} levels, "
                          f"topology has {num_levels}")
    return LevelParams(
        alpha_inter=tuple(float(raw[f"inter.{i}"]["alpha"]) for i in range(1, levels)),
        beta_inter=tuple(float(raw[f"inter.{i}"]["beta"]) for i in range(1, levels)),
        alpha_intra=(float(raw["std"]["alpha"]),) + tuple(
            float(raw[f"intra.{i}"]["alpha"]) for i in range(1, levels)),
        beta_intra=(float(raw["std"]["beta"]),) + tuple(
            float(raw[f"intra.{i}"]["beta"]) for i in range(1, levels)),
    )


def save_params(params: LevelParams, path, r_squared: dict[str, float] | None = None) -> None:
    """Write the params JSON; optional r^2 per phase kind is carried along."""
    r_squared = r_squared or {}

    def entry(kind, alpha, beta):
        doc = {"alpha": alpha, "beta": beta}
        if kind in r_squared:
            doc["r2"] = r_squared[kind]
        return doc

    doc = {"std": entry("std", params.alpha_std, params.beta_std)}
    for i in range(1, params.num_levels):
        a, b = params.inter(i)
        doc[f"inter.{i}"] = entry(f"inter.{i}", a, b)
        a, b = params.intra(i)
        doc[f"intra.{i}"] = entry(f"intra.{i}", a, b)
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass(frozen=True)
class Measurement:
    """One benchmark point of an AlltoAll phase."""

    bytes: int
    seconds: float

    def __post_init__(self):
        if self.bytes < 0:
            raise FitError(f"bytes must be >= 0, got {self.bytes}")
        if self.seconds <= 0:
            raise FitError(f"seconds must be > 0, got {self.seconds}")


@dataclass(frozen=True)
class FitResult:
    """Ordinary least-squares fit of seconds = alpha + beta * bytes."""

    alpha: float
    beta: float
    r_squared: float
    negative_beta: bool  # model misfit flag: fitted slope was not positive

    def astuple(self) -> tuple[float, float, float]:
        return self.alpha, self.beta, self.r_squared


def fit_params(series: list[Measurement]) -> FitResult:
    """Fit alpha (intercept) and beta (slope) by ordinary least squares.

    Requires at least two distinct byte sizes. r^2 is the coefficient of
    determination; exactly linear data yields 1.0.
    """
    if len(series) < 2:
        raise FitError(f"need at least 2 measurements, got {len(series)}")
    x = np.array([m.bytes for m in series], dtype=float)
    y = np.array([m.seconds for m in series], dtype=float)
    if np.unique(x).size < 2:
        raise FitError("need at least 2 distinct byte sizes")

    design = np.column_stack([np.ones_like(x), x])
    (alpha, beta), *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - (alpha + beta * x)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    # ss_tot == 0 means constant y; a constant fit reproduces it exactly.
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return FitResult(float(alpha), float(beta), r_squared, negative_beta=beta <= 0)


def load_measurements(path) -> list[Measurement]:
    """Read one measurement series from a `bytes,seconds` CSV file."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["bytes", "seconds"]:
            raise FitError(f"{path}: expected header 'bytes,seconds', "
                           f"got {reader.fieldnames}")
        prev = -1
        for lineno, row in enumerate(reader, start=2):
            m = Measurement(int(row["bytes"]), float(row["seconds"]))
            if m.bytes <= prev:
                raise FitError(f"{path}:{lineno}: byte sizes must be strictly "
                               f"increasing within a series")
            prev = m.bytes
            out.append(m)
    return out
