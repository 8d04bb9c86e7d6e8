"""Multiresolution hash encoding for 2D and 3D coordinates.

Each level scales the input point onto a grid, hashes the surrounding cell
corners into a fixed-size feature table, and blends the corner features
bi-/trilinearly. Level features are concatenated in level order. The scheme
(geometric resolution schedule, XOR-prime hash, trained-through collisions)
follows the standard instant-NGP construction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, concat, gather_rows

HASH_PRIMES = (1, 2654435761, 805459861)

COORD_TOL = 1e-6


@dataclass(frozen=True)
class HashGridSpec:
    levels: int = 8
    base_resolution: int = 8
    max_resolution: int = 128
    table_size: int = 4096
    feature_dim: int = 2
    input_dim: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.input_dim not in (2, 3):
            raise ValueError("input_dim must be 2 or 3")

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )

    @property
    def output_dim(self) -> int:
        return self.levels * self.feature_dim

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_resolution": self.base_resolution,
            "max_resolution": self.max_resolution,
            "table_size": self.table_size,
            "feature_dim": self.feature_dim,
            "input_dim": self.input_dim,
        }

    @staticmethod
    def from_dict(d: dict) -> "HashGridSpec":
        return HashGridSpec(**d)


def resolution_for_level(spec: HashGridSpec, level: int) -> int:
    """Geometric schedule N_l = floor(N_min * b^l), endpoints exact."""
    if not 0 <= level < spec.levels:
        raise ValueError(f"level {level} out of range [0, {spec.levels})")
    if level == 0:
        return spec.base_resolution
    if level == spec.levels - 1:
        return spec.max_resolution
    return int(spec.base_resolution * spec.growth_factor**level)


def hash_cell_index(cell, table_size: int) -> np.ndarray:
    """XOR-prime spatial hash of integer cells into [0, table_size).

    `cell` has shape (..., D); the table size must be a power of two so the
    modulo is a mask and 64-bit wraparound cannot change the result.
    """
    cell = np.asarray(cell)
    if np.any(cell < 0):
        raise ValueError("cell coordinates must be non-negative")
    cell = cell.astype(np.uint64)
    with np.errstate(over="ignore"):
        h = cell[..., 0] * np.uint64(HASH_PRIMES[0])
        for d in range(1, cell.shape[-1]):
            h = h ^ (cell[..., d] * np.uint64(HASH_PRIMES[d]))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def init_tables(spec: HashGridSpec, rng: np.random.Generator, prefix: str,
                scale: float = 1e-4) -> list[Parameter]:
    """Fresh hash tables, uniform in [-scale, scale] as in instant-NGP."""
    return [
        Parameter(
            rng.uniform(-scale, scale, size=(spec.table_size, spec.feature_dim)),
            name=f"{prefix}.table{level}",
        )
        for level in range(spec.levels)
    ]


def table_names(spec: HashGridSpec, prefix: str) -> list[str]:
    return [f"{prefix}.table{level}" for level in range(spec.levels)]


def encode(points: Tensor, spec: HashGridSpec, tables) -> Tensor:
    """Encode points in [0,1]^D into concatenated per-level features.

    Differentiable w.r.t. both the table entries and the input coordinates
    (the cell choice is frozen; only the interpolation weights carry
    coordinate gradients).
    """
    if not isinstance(points, Tensor):
        points = Tensor(points)
    if points.data.ndim != 2 or points.data.shape[1] != spec.input_dim:
        raise ValueError(
            f"expected points of shape (N, {spec.input_dim}), got {points.data.shape}"
        )
    if len(tables) != spec.levels:
        raise ValueError(f"expected {spec.levels} tables, got {len(tables)}")
    lo = points.data.min(initial=0.0)
    hi = points.data.max(initial=1.0)
    if lo < -COORD_TOL or hi > 1.0 + COORD_TOL:
        raise ValueError(
            f"coordinates outside [0,1]: range [{lo:.3g}, {hi:.3g}]"
        )

    d = spec.input_dim
    corners = list(itertools.product((0, 1), repeat=d))
    features = []
    for level in range(spec.levels):
        n = resolution_for_level(spec, level)
        pos = points * float(n)
        cell = np.floor(np.clip(pos.data, 0.0, n)).astype(np.int64)
        np.minimum(cell, n - 1, out=cell)
        frac = pos - Tensor.const(cell.astype(pos.data.dtype))
        frac_cols = [frac[:, j : j + 1] for j in range(d)]
        acc = None
        for bits in corners:
            corner_cell = cell + np.array(bits, dtype=np.int64)
            idx = hash_cell_index(corner_cell, spec.table_size)
            feat = gather_rows(tables[level], idx)
            w = None
            for j, bit in enumerate(bits):
                term = frac_cols[j] if bit else 1.0 - frac_cols[j]
                w = term if w is None else w * term
            contrib = feat * w
            acc = contrib if acc is None else acc + contrib
        features.append(acc)
    return concat(features, axis=1)


def encode_reference(points: np.ndarray, spec: HashGridSpec,
                     tables) -> np.ndarray:
    """Naive loop implementation of encode, for oracle testing only."""
    points = np.asarray(points, dtype=np.float64)
    n_pts = points.shape[0]
    d = spec.input_dim
    out = np.zeros((n_pts, spec.output_dim), dtype=np.float64)
    for i in range(n_pts):
        col = 0
        for level in range(spec.levels):
            n = resolution_for_level(spec, level)
            table = tables[level].data if isinstance(tables[level], Tensor) else tables[level]
            pos = [min(max(points[i, j] * n, 0.0), float(n)) for j in range(d)]
            cell = [min(int(math.floor(p)), n - 1) for p in pos]
            frac = [pos[j] - cell[j] for j in range(d)]
            feat = np.zeros(spec.feature_dim, dtype=np.float64)
            for bits in itertools.product((0, 1), repeat=d):
                corner = [cell[j] + bits[j] for j in range(d)]
                idx = int(hash_cell_index(np.array([corner]), spec.table_size)[0])
                w = 1.0
                for j in range(d):
                    w *= frac[j] if bits[j] else 1.0 - frac[j]
                feat += w * np.asarray(table[idx], dtype=np.float64)
            out[i, col : col + spec.feature_dim] = feat
            col += spec.feature_dim
    return out
