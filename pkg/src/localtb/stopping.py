"""Exceptional sets: accretivity stopping, density stopping, high density, suppression, big piece.

Masks are :class:`CellMask` objects so they can be aligned with any cell list.
Containment statements are taken up to sets of measure zero: a cube counts as
meeting a region only through cells carrying positive measure.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Cube, CubeTree, DyadicGrid, grid_seeds, sample_grid
from .measure import (BoundedDensity, CellMask, CellMeasure, ball_masses, cells_in_cube, radius_ladder)
from .sqfn import LatticeSF, TimeQuadrature


@dataclass(frozen=True)
class StoppingConfig:
    """Constants of the stopping constructions; unset values take their standard defaults.

    ``c_acc`` defaults to ``1/(2 B1)``, ``delta`` to ``c_acc/16`` and ``delta0``
    to ``1 - c_acc/2``.
    """

    B1: float = 1.0
    B2: float = 1.0
    eps0: float = 1 / 32
    s: float = 1.0
    c_acc: float | None = None
    delta: float | None = None
    C0: float = 1.0
    C1_weak: float = 1.0
    delta0: float | None = None
    C_b: float = 1.0

    def __post_init__(self):
        if self.B1 < 1 or self.B2 < 0:
            raise ValueError("B1 must be at least 1 and B2 nonnegative")
        if not 0 < self.eps0 < 1:
            raise ValueError("eps0 must lie in (0, 1)")
        if self.c_acc is None:
            object.__setattr__(self, "c_acc", 1 / (2 * self.B1))
        if self.delta is None:
            object.__setattr__(self, "delta", self.c_acc / 16)
        if self.delta0 is None:
            object.__setattr__(self, "delta0", 1 - self.c_acc / 2)
        if not 0 < self.delta0 < 1:
            raise ValueError("delta0 must lie in (0, 1)")

    @property
    def eta(self) -> float:
        return self.c_acc

    @property
    def delta1(self) -> float:
        return (1 + self.delta0) / 2

    @property
    def tau(self) -> float:
        return (1 - self.delta1) / 2

    @property
    def tau1(self) -> float:
        return 1 - self.c_acc / 2

    def replace(self, **kw) -> "StoppingConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return StoppingConfig(**d)

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in sorted(self.__dict__.items())}


def _maximal(tree: CubeTree, flag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Maximal flagged nodes and the per-node 'inside a selected cube' indicator."""
    selected = np.zeros(tree.n_nodes, dtype=bool)
    covered = np.zeros(tree.n_nodes, dtype=bool)
    for d in range(tree.depth + 1):
        ids = tree.level(d)
        above = covered[tree.parent[ids]] if d > 0 else np.zeros(len(ids), dtype=bool)
        selected[ids] = flag[ids] & ~above
        covered[ids] = above | selected[ids]
    return selected, covered


def accretivity_stopping(sigma: CellMeasure, b: BoundedDensity, grid: DyadicGrid, c_acc: float,
                         cells=None) -> tuple[list[Cube], CellMask]:
    """Maximal grid cubes with ``|int_R b dsigma| < c_acc sigma(R)`` and the cells they cover.

    ``cells`` (default: the support of ``sigma``) lists the cells reported in the mask.
    """
    cells = sigma.coords if cells is None else np.asarray(cells, dtype=np.int64)
    bs = sigma.with_weights(b.values * sigma.abs_weights)
    tree = CubeTree(grid, cells)
    s_node = tree.sums(sigma.align(cells).real)
    b_node = tree.sums(bs.align(cells))
    fail = (s_node > 0) & (np.abs(b_node) < c_acc * s_node)
    selected, covered = _maximal(tree, fail)
    cubes = [tree.cube(i) for i in np.flatnonzero(selected)]
    in_T = covered[tree.cell_node[-1]]
    return cubes, CellMask.from_bool(sigma.pitch, cells, in_T)


@dataclass
class DensityStopping:
    F1: list[Cube]
    F2: list[Cube]
    H1_mask: CellMask
    phi: BoundedDensity

    def __iter__(self):
        return iter((self.F1, self.F2, self.H1_mask, self.phi))


class RadonNikodymError(ValueError):
    """A cell outside the density-stopping set carries sigma but no mu."""


def density_stopping(mu: CellMeasure, sigma: CellMeasure, grid0: DyadicGrid, cfg: StoppingConfig,
                     Q: Cube | None = None) -> DensityStopping:
    """Maximal cubes of ``grid0`` with ``sigma > (B1/eps0) mu`` (F1) or ``sigma < delta mu`` (F2).

    ``mu`` is restricted to ``Q`` (default: the base cube of ``sigma``).  ``phi``
    is ``dsigma/dmu`` on the cells of ``Q`` outside ``H1``.
    """
    Q = sigma.base_cube if Q is None else Q
    muQ = mu.restrict_cube(Q)
    cells = np.unique(np.concatenate([muQ.coords, sigma.coords]), axis=0)
    tree = CubeTree(grid0, cells)
    ms = tree.sums(muQ.align(cells).real)
    ss = tree.sums(sigma.align(cells).real)
    f1 = ss > (cfg.B1 / cfg.eps0) * ms
    f2 = ss < cfg.delta * ms
    sel1, cov1 = _maximal(tree, f1)
    sel2, cov2 = _maximal(tree, f2)
    leaf = tree.cell_node[-1]
    in_H1 = cov1[leaf] | cov2[leaf]
    H1 = CellMask.from_bool(sigma.pitch, cells, in_H1)
    keep = ~in_H1 & cells_in_cube(cells, sigma.pitch, Q)
    mw = muQ.align(cells[keep]).real
    sw = sigma.align(cells[keep]).real
    bad = (mw == 0) & (sw != 0)
    if np.any(bad):
        raise RadonNikodymError("sigma charges a mu-null cell outside H1")
    phi_vals = np.where(mw > 0, sw / np.where(mw > 0, mw, 1.0), 0.0)
    phi = BoundedDensity(cells[keep], phi_vals, float(np.max(phi_vals)) if len(phi_vals) else 0.0)
    return DensityStopping([tree.cube(i) for i in np.flatnonzero(sel1)],
                           [tree.cube(i) for i in np.flatnonzero(sel2)], H1, phi)


class ThresholdError(ValueError):
    """No scanned density threshold meets the measure bound."""


@dataclass
class HighDensity:
    density_threshold: float
    H2_mask: CellMask
    p: np.ndarray
    r: np.ndarray
    cells: np.ndarray
    radii: np.ndarray
    ball_table: np.ndarray
    m: float

    def __iter__(self):
        return iter((self.density_threshold, self.H2_mask))


def _candidate_thresholds(p: np.ndarray, m: float) -> np.ndarray:
    pos = p[p > 0]
    top = float(np.max(pos)) if pos.size else 1.0
    k = np.arange(-60, int(math.ceil(math.log2(top * 2 ** m))) + 2)
    ladder = 2.0 ** k
    quant = np.nextafter(2.0 ** m * np.unique(pos), np.inf)
    return np.unique(np.concatenate([ladder, quant]))


def high_density_exceptional(nu: CellMeasure, mu: CellMeasure, m: float, eps0: float,
                             Q: Cube | None = None, radii=None,
                             max_threshold: float | None = None) -> HighDensity:
    """Density threshold ``p0`` and the union of balls ``B(x, r(x))`` over ``p(x) > p0``.

    ``p(x) = max_r |nu|(B(x,r)) / r^m`` over dyadic radii, evaluated at the centres
    of the cells of ``mu`` and ``nu``.  ``p0`` is the smallest candidate with
    ``mu{p >= p0 / 2^m} <= eps0 mu(Q)``.  A cell belongs to ``H2`` when its centre
    lies in one of the balls.
    """
    Q = nu.base_cube if Q is None else Q
    cells = np.unique(np.concatenate([mu.coords, nu.coords]), axis=0)
    h = nu.pitch
    if radii is None:
        radii = radius_ladder(h, 4 * math.sqrt(nu.n) * Q.side)
    radii = np.asarray(radii, dtype=float)
    centers = (cells + 0.5) * h
    table = ball_masses(nu.coords, h, nu.abs_weights, centers, radii)
    ratio = table / radii[None, :] ** m
    p = ratio.max(axis=1)
    mu_w = mu.align(cells).real
    budget = eps0 * mu.cube_mass(Q, absolute=True)
    order = np.argsort(-p, kind="stable")
    p_sorted = p[order]
    cum = np.cumsum(mu_w[order])
    chosen = None
    for c in _candidate_thresholds(p, m):
        # mu{p >= c / 2^m}
        k = np.searchsorted(-p_sorted, -c / 2 ** m, side="right")
        mass = cum[k - 1] if k > 0 else 0.0
        if mass <= budget:
            chosen = float(c)
            break
    if chosen is None or (max_threshold is not None and chosen > max_threshold):
        raise ThresholdError("no density threshold satisfies the measure bound at this scale")
    over = ratio > chosen
    r = np.where(over.any(axis=1), radii[np.where(over, np.arange(len(radii))[None, :], -1).max(axis=1)], 0.0)
    r = np.where(p > chosen, r, 0.0)
    in_H2 = np.zeros(len(cells), dtype=bool)
    for i in np.flatnonzero(r > 0):
        d2 = np.sum((centers - centers[i]) ** 2, axis=1)
        in_H2 |= d2 < r[i] ** 2
    return HighDensity(chosen, CellMask.from_bool(h, cells, in_H2), p, r, cells, radii, table, m)


def dense_balls_contained(hd: HighDensity) -> bool:
    """Every scanned ball with ``sigma(B_r) > p0 r^m`` has its cell centres inside ``H2``."""
    centers = (hd.cells + 0.5) * hd.H2_mask.pitch
    inH2 = hd.H2_mask.contains_cells(hd.cells)
    dense = hd.ball_table > hd.density_threshold * hd.radii[None, :] ** hd.m
    for i, j in zip(*np.nonzero(dense)):
        inside = np.sum((centers - centers[i]) ** 2, axis=1) < hd.radii[j] ** 2
        if not np.all(inH2[inside]):
            return False
    return True


def choose_lambda0(cfg: StoppingConfig) -> float:
    """``(2 C1 / (1 - delta0))^(1/s)`` with a 1% margin."""
    if not cfg.delta0 < 1:
        raise ValueError("delta0 must be below 1")
    return (2 * cfg.C1_weak / (1 - cfg.delta0)) ** (1 / cfg.s) * 1.01


def sf_of_b(sigma: CellMeasure, b: BoundedDensity, Q: Cube, quad: TimeQuadrature, kernel,
            cells=None) -> np.ndarray:
    """``V_{sigma,Q} b`` at the centres of ``cells`` (default: support of sigma)."""
    cells = sigma.coords if cells is None else np.asarray(cells, dtype=np.int64)
    q = quad if quad.t_max <= Q.side * (1 + 1e-12) else quad.truncated(Q.side)
    op = LatticeSF(sigma.pitch, sigma.coords, cells, kernel, q.times)
    th = op.theta(b.values * sigma.abs_weights)
    return np.sqrt(np.einsum("t,tx->x", q.weights, np.abs(th) ** 2))


def suppression_set(sigma: CellMeasure, b: BoundedDensity, Q: Cube, quad: TimeQuadrature, kernel,
                    lambda0: float, cells=None) -> CellMask:
    """Cells of ``Q`` where ``V_{sigma,Q} b`` exceeds ``lambda0``."""
    if not lambda0 > 0:
        raise ValueError("lambda0 must be positive")
    cells = sigma.coords if cells is None else np.asarray(cells, dtype=np.int64)
    V = sf_of_b(sigma, b, Q, quad, kernel, cells)
    inQ = cells_in_cube(cells, sigma.pitch, Q)
    return CellMask.from_bool(sigma.pitch, cells, (V > lambda0) & inQ)


def sample_T_masks(sigma: CellMeasure, b: BoundedDensity, base: Cube, n_grids: int, seed: int,
                   c_acc: float, cells=None, pitch: float | None = None) -> tuple[list[DyadicGrid], list[CellMask]]:
    """Accretivity stopping sets ``T_w`` for ``n_grids`` seeded random grids."""
    pitch = sigma.pitch if pitch is None else pitch
    grids, masks = [], []
    for s in grid_seeds(seed, n_grids):
        g = sample_grid(base, s, pitch=pitch)
        grids.append(g)
        masks.append(accretivity_stopping(sigma, b, g, c_acc, cells)[1])
    return grids, masks


@dataclass
class BigPiece:
    G_mask: CellMask
    membership_prob: np.ndarray
    cells: np.ndarray
    n_grids: int
    T_masks: list[CellMask]

    def __iter__(self):
        return iter((self.G_mask, self.membership_prob))

    @property
    def standard_error(self) -> np.ndarray:
        p = self.membership_prob
        return np.sqrt(p * (1 - p) / self.n_grids)


def construct_big_piece(sigma: CellMeasure, H_mask: CellMask, S0_mask: CellMask, base: Cube, n_grids: int,
                        seed: int, cfg: StoppingConfig, b: BoundedDensity, cells=None,
                        T_masks: list[CellMask] | None = None) -> BigPiece:
    """Monte Carlo membership probability of ``Q \\ (H u T_w u S0)`` and ``G = {prob > tau}``."""
    if n_grids < 16:
        raise ValueError("n_grids must be at least 16")
    if cells is None:
        cells = sigma.coords[cells_in_cube(sigma.coords, sigma.pitch, base)]
    cells = np.asarray(cells, dtype=np.int64)
    if T_masks is None:
        _, T_masks = sample_T_masks(sigma, b, base, n_grids, seed, cfg.c_acc, cells)
    if len(T_masks) != n_grids:
        raise ValueError("need one T mask per grid")
    fixed = H_mask.contains_cells(cells) | S0_mask.contains_cells(cells)
    hits = np.zeros(len(cells), dtype=np.int64)
    for T in T_masks:
        hits += ~(fixed | T.contains_cells(cells))
    prob = hits / n_grids
    G = CellMask.from_bool(sigma.pitch, cells, prob > cfg.tau)
    return BigPiece(G, prob, cells, n_grids, T_masks)


@dataclass
class StoppingReport:
    """Constants, exceptional-set measures and masks of one stopping run."""

    pitch: float
    n: int
    constants: dict
    measures: dict
    masks: dict[str, CellMask]
    A_cubes: list[Cube] = field(default_factory=list)
    T_masks: list[CellMask] = field(default_factory=list)
    membership_prob: np.ndarray | None = None
    prob_cells: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "pitch": self.pitch,
            "n": self.n,
            "constants": {k: self.constants[k] for k in sorted(self.constants)},
            "measures": {k: self.measures[k] for k in sorted(self.measures)},
            "masks": {k: self.masks[k].to_runs() for k in sorted(self.masks)},
            "A_cubes": [[list(c.corner), c.side] for c in self.A_cubes],
            "T_masks": [t.to_runs() for t in self.T_masks],
        }
        if self.membership_prob is not None:
            out["membership_prob"] = [[*map(int, c), float(p)] for c, p in zip(self.prob_cells, self.membership_prob)]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StoppingReport":
        d = json.loads(text)
        n, h = d["n"], d["pitch"]
        masks = {k: CellMask.from_runs(h, n, v) for k, v in d["masks"].items()}
        prob = cells = None
        if "membership_prob" in d:
            arr = d["membership_prob"]
            cells = np.array([r[:n] for r in arr], dtype=np.int64).reshape(-1, n)
            prob = np.array([r[n] for r in arr], dtype=float)
        return cls(h, n, d["constants"], d["measures"], masks,
                   [Cube(tuple(c), s) for c, s in d["A_cubes"]],
                   [CellMask.from_runs(h, n, t) for t in d["T_masks"]], prob, cells)
