"""Cubes, translated dyadic grids, Whitney regions and good/bad cubes.

All grids live on a cell lattice of pitch ``h``: cell ``k`` is the box
``[k h, (k+1) h)``.  Grid offsets are integer multiples of ``h`` so every
dyadic cube down to side ``h`` is an exact union of lattice cells.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Cube:
    """Half-open axis-parallel cube ``[corner, corner + side)^n``."""

    corner: tuple[float, ...]
    side: float
    level: int = 0

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"cube side must be positive, got {self.side}")
        object.__setattr__(self, "corner", tuple(float(c) for c in self.corner))

    @classmethod
    def centered(cls, center: Sequence[float], side: float, level: int = 0) -> "Cube":
        return cls(tuple(c - side / 2 for c in center), side, level)

    @property
    def n(self) -> int:
        return len(self.corner)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.corner, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.side

    @property
    def center(self) -> np.ndarray:
        return self.lower + self.side / 2

    @property
    def volume(self) -> float:
        return self.side ** self.n

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x < self.upper))

    def contains_cube(self, other: "Cube") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def dilate(self, factor: float) -> "Cube":
        """Concentric cube with side ``factor * side`` (the ``factor Q`` of the notation)."""
        return Cube.centered(self.center, factor * self.side, self.level)

    def children(self) -> list["Cube"]:
        half = self.side / 2
        out = []
        for bits in np.ndindex(*(2,) * self.n):
            corner = tuple(c + b * half for c, b in zip(self.corner, bits))
            out.append(Cube(corner, half, self.level + 1))
        return out

    def translate(self, v: Sequence[float]) -> "Cube":
        return Cube(tuple(c + float(d) for c, d in zip(self.corner, v)), self.side, self.level)


def box_distance(P: Cube, R: Cube) -> float:
    """Euclidean gap between the closed boxes of ``P`` and ``R`` (0 when they touch)."""
    gap = np.maximum(0.0, np.maximum(P.lower - R.upper, R.lower - P.upper))
    return float(np.sqrt(np.sum(gap * gap)))


def long_distance(P: Cube, R: Cube) -> float:
    """``D(P, R) = l(P) + l(R) + d(P, R)``."""
    return P.side + R.side + box_distance(P, R)


def boundary_distance(R: Cube, P: Cube) -> float:
    """Distance from the closed box ``R`` to the boundary of ``P``."""
    lo_gap = R.lower - P.lower
    hi_gap = P.upper - R.upper
    if np.all(lo_gap >= 0) and np.all(hi_gap >= 0):
        return float(min(lo_gap.min(), hi_gap.min()))
    if box_distance(P, R) > 0:
        return box_distance(P, R)
    overlap = np.minimum(R.upper, P.upper) - np.maximum(R.lower, P.lower)
    if np.any(overlap < 0):
        return 0.0
    # R meets P but is not inside it: R crosses the boundary, or touches it from outside.
    return 0.0


@dataclass(frozen=True)
class WhitneyRegion:
    """``W_R = R x [l(R)/2, l(R))``."""

    cube: Cube

    @property
    def time_band(self) -> tuple[float, float]:
        return (self.cube.side / 2, self.cube.side)

    def contains(self, x, t: float) -> bool:
        lo, hi = self.time_band
        return self.cube.contains(x) and lo <= t < hi


@dataclass(frozen=True)
class GoodnessParams:
    r_param: int
    gamma: float

    def __post_init__(self):
        if self.r_param < 1:
            raise ValueError("r_param must be a positive integer")
        if not 0 < self.gamma < 0.5:
            raise ValueError("gamma must lie in (0, 1/2)")

    @classmethod
    def from_exponents(cls, m: float, alpha: float, r_param: int) -> "GoodnessParams":
        return cls(int(r_param), alpha / (2 * m + 2 * alpha))

    def threshold(self, side_R, side_P):
        """``l(R)^gamma l(P)^(1-gamma)``."""
        return np.power(side_R, self.gamma) * np.power(side_P, 1 - self.gamma)


class Goodness(enum.Enum):
    GOOD = "good"
    BAD = "bad"


def grid_exponent(side: float) -> int:
    """The integer ``N`` with ``2^(N-3) <= side < 2^(N-2)``."""
    mant, exp = math.frexp(side)
    return exp - 1 + 3


def _is_int(x: float, tol: float = 1e-9) -> bool:
    return abs(x - round(x)) <= tol * max(1.0, abs(x))


@dataclass(frozen=True)
class DyadicGrid:
    """Translated dyadic grid ``D(w)`` rooted at ``c_Q + w + [-2^N, 2^N)^n``."""

    base: Cube
    pitch: float
    offset: tuple[float, ...]
    max_depth: int
    seed: int | None = None
    N: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        object.__setattr__(self, "N", grid_exponent(self.base.side))
        if len(self.offset) != self.base.n:
            raise ValueError("offset dimension does not match base cube")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.max_depth > self.finest_depth:
            raise ValueError(
                f"max_depth={self.max_depth} pushes the cube side below the cell pitch "
                f"(finest admissible depth is {self.finest_depth})"
            )
        for c in self.root_corner_cells:
            if not _is_int(c):
                raise ValueError("grid root is not aligned with the cell lattice")

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def finest_depth(self) -> int:
        ratio = 2.0 ** (self.N + 1) / self.pitch
        if not _is_int(ratio) or round(ratio) & (round(ratio) - 1):
            raise ValueError("root side / pitch must be a power of two")
        return int(round(ratio)).bit_length() - 1

    @property
    def root(self) -> Cube:
        corner = self.base.center + np.asarray(self.offset) - 2.0 ** self.N
        return Cube(tuple(corner), 2.0 ** (self.N + 1), 0)

    @property
    def root_corner_cells(self) -> np.ndarray:
        return (self.base.center + np.asarray(self.offset) - 2.0 ** self.N) / self.pitch

    def side(self, depth: int) -> float:
        return 2.0 ** (self.N + 1 - depth)

    def side_cells(self, depth: int) -> int:
        return 1 << (self.finest_depth - depth)

    def cell_index(self, coords: np.ndarray, depth: int) -> np.ndarray:
        """Multi-index of the depth-``depth`` cube containing each lattice cell."""
        c0 = np.rint(self.root_corner_cells).astype(np.int64)
        return np.floor_divide(np.asarray(coords, dtype=np.int64) - c0, self.side_cells(depth))

    def cube(self, depth: int, index: Sequence[int]) -> Cube:
        s = self.side(depth)
        corner = self.root.lower + s * np.asarray(index, dtype=float)
        return Cube(tuple(corner), s, depth)

    def depth_of_side(self, side: float) -> int:
        d = self.N + 1 - math.log2(side)
        if not _is_int(d):
            raise ValueError(f"side {side} is not a dyadic side of this grid")
        return int(round(d))

    def contains_cube(self, R: Cube) -> bool:
        """True when ``R`` is itself a cube of this grid."""
        try:
            d = self.depth_of_side(R.side)
        except ValueError:
            return False
        if d < 0 or d > self.max_depth:
            return False
        rel = (R.lower - self.root.lower) / R.side
        return bool(np.all([_is_int(v) for v in rel]) and np.all(rel >= -1e-9)
                    and np.all(rel < 2 ** d - 1e-9 + 1))

    def cubes_at(self, depth: int):
        for idx in np.ndindex(*(1 << depth,) * self.n):
            yield self.cube(depth, idx)

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "N": self.N,
            "w": list(self.offset),
            "max_depth": self.max_depth,
            "pitch": self.pitch,
            "base": {"corner": list(self.base.corner), "side": self.base.side},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict) -> "DyadicGrid":
        base = Cube(tuple(rec["base"]["corner"]), rec["base"]["side"])
        grid = cls(base, rec["pitch"], tuple(rec["w"]), rec["max_depth"], rec.get("seed"))
        if grid.N != rec["N"]:
            raise ValueError("record N is inconsistent with the base cube side")
        return grid

    @classmethod
    def from_json(cls, text: str) -> "DyadicGrid":
        return cls.from_record(json.loads(text))


def _check_base(base: Cube, pitch: float):
    for c in base.center:
        if not _is_int(c / pitch):
            raise ValueError("the centre of the base cube must lie on the cell lattice")


def offset_lattice_size(base: Cube, pitch: float) -> int:
    """Number of admissible offsets per axis in the discretised ``Omega_N``."""
    N = grid_exponent(base.side)
    count = 2.0 ** N / pitch
    if not _is_int(count):
        raise ValueError("2^N / pitch must be an integer")
    return int(round(count))


def sample_grid(base: Cube, seed: int, max_depth: int | None = None, *, pitch: float) -> DyadicGrid:
    """Draw ``w`` uniformly from the ``h``-multiples of ``[-2^(N-1), 2^(N-1))^n``."""
    _check_base(base, pitch)
    k = offset_lattice_size(base, pitch)
    rng = np.random.default_rng(seed)
    w = (rng.integers(0, k, size=base.n) - k // 2) * pitch
    grid = DyadicGrid(base, pitch, tuple(w), 1, seed)
    depth = grid.finest_depth if max_depth is None else max_depth
    return DyadicGrid(base, pitch, tuple(w), depth, seed)


def reference_grid(base: Cube, max_depth: int | None = None, *, pitch: float) -> DyadicGrid:
    """``D_0 = D(0)``."""
    _check_base(base, pitch)
    grid = DyadicGrid(base, pitch, (0.0,) * base.n, 1, None)
    depth = grid.finest_depth if max_depth is None else max_depth
    return DyadicGrid(base, pitch, (0.0,) * base.n, depth, None)


def grid_seeds(seed: int, count: int) -> list[int]:
    """Independent per-grid seeds split from a master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


class CubeTree:
    """The cubes of a grid that contain at least one of the given lattice cells.

    Nodes are numbered depth by depth, so every parent precedes its children.
    The tree stops at the first depth (not below ``min_depth``) where every cube
    holds at most one cell, or at ``grid.max_depth``.
    """

    def __init__(self, grid: DyadicGrid, coords: np.ndarray, min_depth: int = 0):
        coords = np.asarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != grid.n:
            raise ValueError("coords must have shape (M, n)")
        self.grid = grid
        self.coords = coords
        M = len(coords)
        locals_, counts, indices = [], [], []
        depth = 0
        while True:
            idx = grid.cell_index(coords, depth)
            if np.any(idx < 0) or np.any(idx >= (1 << depth)):
                raise ValueError("cells fall outside the grid root")
            uniq, inv = np.unique(idx, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            locals_.append(inv)
            counts.append(len(uniq))
            indices.append(uniq)
            if (len(uniq) == M and depth >= min_depth) or depth == grid.max_depth:
                break
            depth += 1
        self.depth = depth
        self.resolved = len(indices[-1]) == M
        offsets = np.concatenate([[0], np.cumsum(counts)])
        self.level_offset = offsets
        self.n_nodes = int(offsets[-1])
        self.cell_node = np.stack([loc + offsets[d] for d, loc in enumerate(locals_)])
        self.node_depth = np.concatenate([np.full(c, d) for d, c in enumerate(counts)])
        self.node_index = np.concatenate(indices)
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        for d in range(1, depth + 1):
            parent[self.cell_node[d]] = self.cell_node[d - 1]
        self.parent = parent
        self.n_cells = np.bincount(self.cell_node.ravel(), minlength=self.n_nodes)
        sides = np.array([grid.side(d) for d in range(depth + 1)])
        self.node_side = sides[self.node_depth]
        self.node_lower = grid.root.lower + self.node_index * self.node_side[:, None]

    def level(self, depth: int) -> np.ndarray:
        return np.arange(self.level_offset[depth], self.level_offset[depth + 1])

    def cube(self, node: int) -> Cube:
        return Cube(tuple(self.node_lower[node]), float(self.node_side[node]), int(self.node_depth[node]))

    def children(self, node: int) -> np.ndarray:
        d = self.node_depth[node]
        if d == self.depth:
            return np.empty(0, dtype=np.int64)
        lvl = self.level(d + 1)
        return lvl[self.parent[lvl] == node]

    def cells(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.cell_node[self.node_depth[node]] == node)

    def sums(self, values) -> np.ndarray:
        """Per-node sums of a cellwise array (real or complex)."""
        values = np.asarray(values)
        flat_nodes = self.cell_node.ravel()
        rep = np.tile(values, self.depth + 1)
        if np.iscomplexobj(rep):
            return (np.bincount(flat_nodes, rep.real, self.n_nodes)
                    + 1j * np.bincount(flat_nodes, rep.imag, self.n_nodes))
        return np.bincount(flat_nodes, rep.astype(float), self.n_nodes)

    def any_cell(self, mask) -> np.ndarray:
        """Per-node flag: does the node contain a cell where ``mask`` is set?"""
        return self.sums(np.asarray(mask, dtype=float)) > 0

    def ancestor_at(self, node: int, depth: int) -> int:
        while self.node_depth[node] > depth:
            node = self.parent[node]
        return int(node)


def _axis_gaps(lo: np.ndarray, side_R: np.ndarray, root_lo: np.ndarray, s: float) -> np.ndarray:
    """Distance from intervals ``[lo, lo+side_R]`` to the lines ``root_lo + s Z`` (0 if crossed)."""
    rel = (lo - root_lo) / s
    below = root_lo + np.floor(rel) * s
    above = below + s
    gap = np.minimum(lo - below, above - (lo + side_R))
    return np.maximum(gap, 0.0)


def bad_scale_exponent(R_lower: np.ndarray, R_side: np.ndarray, grid: DyadicGrid,
                       gamma: float) -> np.ndarray:
    """Largest ``k`` such that some grid cube of side ``2^k l(R)`` has its boundary
    within ``l(R)^gamma l(P)^(1-gamma)`` of ``R``; ``-1`` when there is none.

    ``R`` is bad for parameter ``r`` exactly when the returned value is ``>= r``.
    """
    R_lower = np.atleast_2d(np.asarray(R_lower, dtype=float))
    R_side = np.atleast_1d(np.asarray(R_side, dtype=float))
    root_lo = grid.root.lower
    kmax = np.full(len(R_side), -1, dtype=np.int64)
    for depth in range(0, grid.max_depth + 1):
        s = grid.side(depth)
        ratio = s / R_side
        eligible = ratio >= 1
        if not np.any(eligible):
            break
        gaps = _axis_gaps(R_lower, R_side[:, None], root_lo, s).min(axis=1)
        thr = np.power(R_side, gamma) * s ** (1 - gamma)
        k = np.rint(np.log2(ratio)).astype(np.int64)
        hit = eligible & (gaps <= thr)
        kmax = np.where(hit & (k > kmax), k, kmax)
    return kmax


def classify_goodness(R: Cube, grid: DyadicGrid, params: GoodnessParams) -> Goodness:
    """Good iff every ``P`` in the grid with ``l(P) >= 2^r l(R)`` has ``d(R, dP) > l(R)^g l(P)^(1-g)``."""
    k = bad_scale_exponent(R.lower[None, :], np.array([R.side]), grid, params.gamma)[0]
    return Goodness.BAD if k >= params.r_param else Goodness.GOOD
