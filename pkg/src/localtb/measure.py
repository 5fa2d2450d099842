"""Complex measures stored as weights on a lattice of congruent cells.

A :class:`CellMeasure` assigns a complex weight to finitely many cells
``[k h, (k+1) h)`` of the lattice ``h Z^n``.  Ball and cube masses are
computed by splitting each cell into a regular array of sub-points, which is
exact for cells lying entirely inside or outside the region.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Cube

# sub-points per axis used for ball and strip volume fractions
SUBSAMPLE = {1: 8, 2: 4, 3: 2}


class ZeroMeasureError(ValueError):
    """Raised when a normalising mass vanishes."""


def _as_coords(coords, n=None) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[:, None] if n in (None, 1) else arr.reshape(-1, n)
    return arr


def lex_order(coords: np.ndarray) -> np.ndarray:
    return np.lexsort(coords.T[::-1])


def index_of(coords: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row index of each ``query`` row inside the lexicographically sorted ``coords``; -1 if absent."""
    coords = np.asarray(coords, dtype=np.int64)
    query = np.asarray(query, dtype=np.int64)
    if len(coords) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    both = np.concatenate([coords, query]) if len(query) else coords
    lo = both.min(axis=0)
    hi = both.max(axis=0)
    span = hi - lo + 1
    mult = np.cumprod(np.concatenate([[1], span[::-1][:-1]]))[::-1]
    key_c = (coords - lo) @ mult
    key_q = (query - lo) @ mult
    pos = np.searchsorted(key_c, key_q)
    pos = np.minimum(pos, len(key_c) - 1)
    found = key_c[pos] == key_q
    return np.where(found, pos, -1)


@dataclass(frozen=True)
class CellMeasure:
    """Complex weights on lattice cells.

    Rows of ``coords`` are kept in lexicographic order and cells with zero
    weight are dropped, so two measures with the same cells share indexing.
    """

    pitch: float
    coords: np.ndarray
    weights: np.ndarray
    base_cube: Cube

    def __post_init__(self):
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        coords = _as_coords(self.coords, self.base_cube.n)
        weights = np.asarray(self.weights, dtype=complex).reshape(-1)
        if len(coords) != len(weights):
            raise ValueError("coords and weights differ in length")
        if coords.shape[1] != self.base_cube.n:
            raise ValueError("coordinate dimension does not match the base cube")
        keep = weights != 0
        coords, weights = coords[keep], weights[keep]
        order = lex_order(coords)
        coords, weights = coords[order], weights[order]
        if len(coords) > 1 and np.any(np.all(coords[1:] == coords[:-1], axis=1)):
            raise ValueError("duplicate cells")
        lo = coords * self.pitch
        hi = lo + self.pitch
        tol = 1e-12 * max(1.0, self.base_cube.side)
        if len(coords) and (np.any(lo < self.base_cube.lower - tol) or np.any(hi > self.base_cube.upper + tol)):
            raise ValueError("occupied cell outside the base cube")
        coords.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_dense(cls, pitch: float, coords, weights, base_cube: Cube) -> "CellMeasure":
        return cls(pitch, coords, weights, base_cube)

    @classmethod
    def empty(cls, pitch: float, base_cube: Cube) -> "CellMeasure":
        return cls(pitch, np.zeros((0, base_cube.n), dtype=np.int64), np.zeros(0, complex), base_cube)

    @property
    def n(self) -> int:
        return self.base_cube.n

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.pitch

    @property
    def abs_weights(self) -> np.ndarray:
        return np.abs(self.weights)

    @property
    def is_real_nonnegative(self) -> bool:
        return bool(np.all(self.weights.imag == 0) and np.all(self.weights.real >= 0))

    def total_variation(self) -> float:
        return math.fsum(self.abs_weights)

    def mass(self) -> complex:
        return complex(math.fsum(self.weights.real), math.fsum(self.weights.imag))

    def variation(self) -> "CellMeasure":
        return CellMeasure(self.pitch, self.coords, self.abs_weights.astype(complex), self.base_cube)

    def scaled(self, c: complex) -> "CellMeasure":
        return CellMeasure(self.pitch, self.coords, self.weights * c, self.base_cube)

    def with_weights(self, weights) -> "CellMeasure":
        return CellMeasure(self.pitch, self.coords, weights, self.base_cube)

    def restrict(self, mask) -> "CellMeasure":
        """Keep the cells where ``mask`` (aligned with ``coords``) is true."""
        mask = np.asarray(mask, dtype=bool)
        return CellMeasure(self.pitch, self.coords[mask], self.weights[mask], self.base_cube)

    def restrict_cube(self, Q: Cube) -> "CellMeasure":
        return self.restrict(cells_in_cube(self.coords, self.pitch, Q))

    def __add__(self, other: "CellMeasure") -> "CellMeasure":
        if other.pitch != self.pitch or other.n != self.n:
            raise ValueError("measures live on different lattices")
        allc = np.concatenate([self.coords, other.coords])
        allw = np.concatenate([self.weights, other.weights])
        uniq, inv = np.unique(allc, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        w = np.bincount(inv, allw.real, len(uniq)) + 1j * np.bincount(inv, allw.imag, len(uniq))
        lo = np.minimum(self.base_cube.lower, other.base_cube.lower)
        hi = np.maximum(self.base_cube.upper, other.base_cube.upper)
        base = self.base_cube if self.base_cube == other.base_cube else Cube(tuple(lo), float(np.max(hi - lo)))
        return CellMeasure(self.pitch, uniq, w, base)

    def align(self, coords) -> np.ndarray:
        """Weights at the given cells (0 where this measure has no cell)."""
        idx = index_of(self.coords, coords)
        return np.where(idx >= 0, self.weights[np.maximum(idx, 0)], 0)

    def cube_mass(self, Q: Cube, absolute: bool = False) -> complex | float:
        w = self.abs_weights if absolute else self.weights
        frac = cube_fractions(self.coords, self.pitch, Q)
        if absolute:
            return math.fsum(w * frac)
        return complex(math.fsum(w.real * frac), math.fsum(w.imag * frac))

    # serialisation -----------------------------------------------------------------
    def to_csv(self) -> str:
        """Header comment with ``{n, h, base cube}`` then rows ``k_1..k_n, re, im``."""
        head = {"n": self.n, "h": repr(self.pitch), "base_corner": [repr(c) for c in self.base_cube.corner],
                "base_side": repr(self.base_cube.side)}
        out = io.StringIO()
        out.write("# " + json.dumps(head, sort_keys=True) + "\n")
        out.write(",".join([f"k{i}" for i in range(self.n)] + ["re", "im"]) + "\n")
        for k, w in zip(self.coords, self.weights):
            out.write(",".join([str(int(v)) for v in k] + [repr(float(w.real)), repr(float(w.imag))]) + "\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CellMeasure":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing header record")
        head = json.loads(lines[0][1:])
        n = int(head["n"])
        base = Cube(tuple(float(c) for c in head["base_corner"]), float(head["base_side"]))
        rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
        coords = np.array([[int(v) for v in r[:n]] for r in rows], dtype=np.int64).reshape(-1, n)
        w = np.array([complex(float(r[n]), float(r[n + 1])) for r in rows], dtype=complex)
        return cls(float(head["h"]), coords, w, base)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path) -> "CellMeasure":
        with open(path) as fh:
            return cls.from_csv(fh.read())


@dataclass(frozen=True)
class CellMask:
    """A finite set of lattice cells of pitch ``h`` (kept sorted and unique)."""

    pitch: float
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64)
        if c.ndim == 1:
            c = c[:, None]
        if len(c):
            c = np.unique(c, axis=0)
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @classmethod
    def from_bool(cls, pitch: float, cells, flags) -> "CellMask":
        cells = np.asarray(cells, dtype=np.int64)
        return cls(pitch, cells[np.asarray(flags, dtype=bool)])

    @classmethod
    def empty(cls, pitch: float, n: int) -> "CellMask":
        return cls(pitch, np.zeros((0, n), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CellMask) and self.pitch == other.pitch
                and self.coords.shape == other.coords.shape and bool(np.all(self.coords == other.coords)))

    def __hash__(self):
        return hash((self.pitch, self.coords.tobytes()))

    def contains_cells(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        if len(self.coords) == 0:
            return np.zeros(len(cells), dtype=bool)
        return index_of(self.coords, cells) >= 0

    def contains_points(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.contains_cells(np.floor(x / self.pitch).astype(np.int64))

    def union(self, *others: "CellMask") -> "CellMask":
        parts = [self.coords] + [o.coords for o in others]
        return CellMask(self.pitch, np.concatenate(parts))

    def intersect(self, other: "CellMask") -> "CellMask":
        return CellMask(self.pitch, self.coords[other.contains_cells(self.coords)])

    def minus(self, other: "CellMask") -> "CellMask":
        return CellMask(self.pitch, self.coords[~other.contains_cells(self.coords)])

    def measure_of(self, meas: "CellMeasure") -> float:
        """``|meas|`` of the union of the cells."""
        return math.fsum(meas.abs_weights[self.contains_cells(meas.coords)])

    def to_runs(self) -> list[list[int]]:
        """Run-length encoding along the last axis: rows ``[k_0, ..., k_{n-2}, start, length]``."""
        runs: list[list[int]] = []
        for row in self.coords.tolist():
            if runs and runs[-1][:-2] == row[:-1] and runs[-1][-2] + runs[-1][-1] == row[-1]:
                runs[-1][-1] += 1
            else:
                runs.append(row + [1])
        return runs

    @classmethod
    def from_runs(cls, pitch: float, n: int, runs) -> "CellMask":
        rows = []
        for r in runs:
            prefix, start, length = list(r[:-2]), r[-2], r[-1]
            rows.extend(prefix + [start + i] for i in range(length))
        return cls(pitch, np.array(rows, dtype=np.int64).reshape(-1, n))


@dataclass(frozen=True)
class BoundedDensity:
    """A function on cells: ``values[i]`` lives on ``coords[i]``."""

    coords: np.ndarray
    values: np.ndarray
    sup_bound: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex).reshape(-1)
        coords = np.asarray(self.coords, dtype=np.int64)
        if len(coords) != len(values):
            raise ValueError("coords and values differ in length")
        if len(values) and np.max(np.abs(values)) > self.sup_bound * (1 + 1e-12) + 1e-300:
            raise ValueError("density exceeds its declared sup bound")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @classmethod
    def on(cls, measure: CellMeasure, values, sup_bound: float | None = None) -> "BoundedDensity":
        values = np.broadcast_to(np.asarray(values, dtype=complex), (len(measure),)).copy()
        bound = float(np.max(np.abs(values))) if sup_bound is None and len(values) else (sup_bound or 0.0)
        return cls(measure.coords, values, bound)

    def times(self, measure: CellMeasure) -> CellMeasure:
        """The measure ``f d(measure)``; cells must match."""
        if len(measure.coords) != len(self.coords) or np.any(measure.coords != self.coords):
            raise ValueError("density and measure live on different cells")
        return measure.with_weights(self.values * measure.weights)

    def l2_norm_sq(self, measure: CellMeasure) -> float:
        return math.fsum(np.abs(self.values) ** 2 * measure.abs_weights)


def polar_decompose(nu: CellMeasure) -> tuple[CellMeasure, BoundedDensity]:
    """``nu = b d sigma`` with ``sigma = |nu|`` and ``|b| = 1``."""
    sigma = nu.variation()
    b = nu.weights / sigma.weights.real
    return sigma, BoundedDensity(nu.coords, b, 1.0)


# geometry of cells ---------------------------------------------------------------------

def subpoint_offsets(n: int, per_axis: int | None = None) -> np.ndarray:
    """Midpoints of a regular ``per_axis^n`` split of the unit cell."""
    k = per_axis or SUBSAMPLE.get(n, 2)
    ax = (np.arange(k) + 0.5) / k
    mesh = np.meshgrid(*([ax] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def cells_in_cube(coords: np.ndarray, pitch: float, Q: Cube) -> np.ndarray:
    """Cells whose centre lies in ``Q``."""
    c = (np.asarray(coords) + 0.5) * pitch
    return np.all((c >= Q.lower) & (c < Q.upper), axis=1)


def cube_fractions(coords: np.ndarray, pitch: float, Q: Cube) -> np.ndarray:
    """Fraction of each cell's volume lying in ``Q`` (exact for boxes)."""
    lo = np.asarray(coords) * pitch
    hi = lo + pitch
    ov = np.clip(np.minimum(hi, Q.upper) - np.maximum(lo, Q.lower), 0, None) / pitch
    return np.prod(ov, axis=1)


def ball_masses(coords: np.ndarray, pitch: float, weights: np.ndarray, points: np.ndarray,
                radii: Sequence[float], chunk: int = 2 ** 21) -> np.ndarray:
    """``sum_j w_j |B(x, r) cap cell_j| / |cell_j|`` for each point and radius (open balls)."""
    coords = np.asarray(coords)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    radii = np.asarray(radii, dtype=float)
    n = coords.shape[1]
    off = subpoint_offsets(n)
    S = len(off)
    sub = ((coords[:, None, :] + off[None, :, :]) * pitch).reshape(-1, n)
    subw = np.repeat(np.asarray(weights, dtype=float), S) / S
    out = np.zeros((len(points), len(radii)))
    if len(sub) == 0:
        return out
    step = max(1, chunk // len(sub))
    for i in range(0, len(points), step):
        p = points[i:i + step]
        d2 = np.zeros((len(p), len(sub)))
        for a in range(n):
            d2 += (p[:, a:a + 1] - sub[None, :, a]) ** 2
        for j, r in enumerate(radii):
            out[i:i + step, j] = (d2 < r * r) @ subw
    return out


def radius_ladder(pitch: float, reach: float) -> np.ndarray:
    """Dyadic radii ``h 2^j`` from ``h`` up to the first value ``>= reach``."""
    j = max(0, int(math.ceil(math.log2(max(reach, pitch) / pitch) - 1e-12)))
    return pitch * 2.0 ** np.arange(j + 1)


@dataclass(frozen=True)
class GrowthReport:
    m: float
    constant: float
    witness_ball: tuple[tuple[float, ...], float]


def growth_order_constant(mu: CellMeasure, m: float, radii: Sequence[float]) -> GrowthReport:
    """Largest ``|mu|(B(x,r)) / r^m`` over balls centred at occupied cells."""
    radii = np.asarray(list(radii), dtype=float)
    if radii.size == 0:
        raise ValueError("radii list is empty")
    if np.any(radii < mu.pitch * (1 - 1e-12)):
        raise ValueError("radii must be at least the cell pitch")
    if len(mu) == 0:
        return GrowthReport(m, 0.0, (tuple([0.0] * mu.n), float(radii[0])))
    bm = ball_masses(mu.coords, mu.pitch, mu.abs_weights, mu.centers, radii)
    ratio = bm / radii[None, :] ** m
    i, j = np.unravel_index(np.argmax(ratio), ratio.shape)
    return GrowthReport(m, float(ratio[i, j]), (tuple(float(v) for v in mu.centers[i]), float(radii[j])))


def radial_maximal(nu: CellMeasure, x, m: float, radii: Sequence[float]) -> float:
    """``max_r |nu|(B(x,r)) / r^m`` over the scanned radii."""
    radii = np.asarray(list(radii), dtype=float)
    if len(nu) == 0 or radii.size == 0:
        return 0.0
    bm = ball_masses(nu.coords, nu.pitch, nu.abs_weights, np.atleast_2d(x), radii)[0]
    return float(np.max(bm / radii ** m))


def radial_maximal_field(nu: CellMeasure, points: np.ndarray, m: float, radii) -> tuple[np.ndarray, np.ndarray]:
    """``p`` at many points, plus the full ball-mass table ``(points, radii)``."""
    radii = np.asarray(radii, dtype=float)
    bm = ball_masses(nu.coords, nu.pitch, nu.abs_weights, points, radii)
    return np.max(bm / radii[None, :] ** m, axis=1), bm


def boundary_strip_fractions(coords: np.ndarray, pitch: float, Q: Cube, widths: Sequence[float]) -> np.ndarray:
    """Volume fraction of each cell in ``{x in 2Q : dist(x, dQ) <= width}`` for each width."""
    n = coords.shape[1]
    off = subpoint_offsets(n)
    sub = (np.asarray(coords)[:, None, :] + off[None, :, :]) * pitch
    two = Q.dilate(2.0)
    in2 = np.all((sub >= two.lower) & (sub < two.upper), axis=2)
    below = Q.lower - sub
    above = sub - Q.upper
    outside_gap = np.maximum(np.maximum(below, above), 0.0)
    inside = np.all((sub >= Q.lower) & (sub < Q.upper), axis=2)
    dist_out = np.sqrt(np.sum(outside_gap ** 2, axis=2))
    dist_in = np.min(np.minimum(sub - Q.lower, Q.upper - sub), axis=2)
    dist = np.where(inside, dist_in, dist_out)
    return np.stack([np.mean(in2 & (dist <= w), axis=1) for w in widths], axis=1)


@dataclass
class DoublingReport:
    mu_Q: float
    mu_2Q: float
    beta: float
    doubling_ok: bool
    lambdas: list[float]
    strip_masses: list[float]
    c_bdry: float
    small_boundary_ok: bool
    worst_ratio: float
    witness_lambda: float | None = None

    @property
    def ok(self) -> bool:
        return self.doubling_ok and self.small_boundary_ok


def check_doubling_small_boundary(mu: CellMeasure, Q: Cube, beta: float, c_bdry: float,
                                  lambdas: Sequence[float]) -> DoublingReport:
    """Test ``mu(2Q) <= beta mu(Q)`` and the boundary-strip bound for each lambda."""
    lambdas = [float(l) for l in lambdas]
    if any(not 0 < l <= 1 for l in lambdas):
        raise ValueError("lambdas must lie in (0, 1]")
    w = mu.abs_weights
    mu_Q = math.fsum(w * cube_fractions(mu.coords, mu.pitch, Q))
    if mu_Q == 0:
        raise ZeroMeasureError("mu(Q) = 0: doubling ratio undefined")
    mu_2Q = math.fsum(w * cube_fractions(mu.coords, mu.pitch, Q.dilate(2.0)))
    fr = boundary_strip_fractions(mu.coords, mu.pitch, Q, [l * Q.side for l in lambdas])
    strips = [math.fsum(w * fr[:, i]) for i in range(len(lambdas))]
    ratios = [s / (l * mu_2Q) for s, l in zip(strips, lambdas)]
    worst = max(ratios) if ratios else 0.0
    tol = 1e-12
    return DoublingReport(
        mu_Q, mu_2Q, beta, mu_2Q <= beta * mu_Q * (1 + tol), lambdas, strips, c_bdry,
        all(r <= c_bdry * (1 + tol) for r in ratios), worst,
        lambdas[int(np.argmax(ratios))] if ratios else None,
    )


def weak_maximal_constant(nu: CellMeasure, mu: CellMeasure, m: float, radii) -> float:
    """``sup_p p mu{M nu >= p} / ||nu||`` evaluated at the cells of ``mu``.

    For a finite list the supremum with ``>=`` equals the one with ``>`` taken
    from below, so the strict functional is reused.
    """
    from ._numerics import weak_type_functional

    tv = nu.total_variation()
    if tv == 0:
        return 0.0
    pvals, _ = radial_maximal_field(nu, mu.centers, m, radii)
    return weak_type_functional(pvals, mu.abs_weights, 1.0) / tv
