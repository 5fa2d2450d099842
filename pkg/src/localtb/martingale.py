"""b-adapted martingale differences over the transit cubes of a grid.

For a transit cube ``P`` with children ``P'``::

    Delta_P f = sum_{P'} A_{P'}(f) 1_{P'}
    A_{P'}(f) = (<f>_{P'}/<b>_{P'} - <f>_P/<b>_P) b    if P' is transit
              =  f - (<f>_P/<b>_P) b                     otherwise

and ``E_{P0} f = (<f>_{P0}/<b>_{P0}) b``.  Coefficients are stored as a matrix
whose row ``d`` holds ``Delta_P f`` for the depth-``d`` cube ``P`` containing
each cell, so reconstruction is a column sum.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from ._numerics import top_eigenvalue
from .geometry import Cube, CubeTree, DyadicGrid, bad_scale_exponent, GoodnessParams
from .measure import BoundedDensity, CellMask, CellMeasure


class AccretivityError(ZeroDivisionError):
    """A transit cube has vanishing ``<b>``."""


@dataclass
class TransitSet:
    """Transit cubes of ``grid``: ``sigma(P) != 0`` and ``P`` not contained in the excluded set."""

    tree: CubeTree
    is_transit: np.ndarray

    @property
    def members(self) -> list[Cube]:
        return [self.tree.cube(i) for i in np.flatnonzero(self.is_transit)]

    @property
    def root_is_transit(self) -> bool:
        return bool(self.is_transit[0])

    def __contains__(self, cube: Cube) -> bool:
        node = self.node_of(cube)
        return node is not None and bool(self.is_transit[node])

    def node_of(self, cube: Cube) -> int | None:
        t = self.tree
        hit = np.flatnonzero((t.node_side == cube.side) & np.all(np.isclose(t.node_lower, cube.lower), axis=1))
        return int(hit[0]) if len(hit) else None


def transit_cubes(grid: DyadicGrid, sigma: CellMeasure, excluded: CellMask, min_depth: int = 0) -> TransitSet:
    """Cubes carrying sigma-mass outside ``excluded``; the tree stops once cubes hold one cell."""
    tree = CubeTree(grid, sigma.coords, min_depth=min_depth)
    outside = ~excluded.contains_cells(sigma.coords)
    return TransitSet(tree, tree.any_cell(outside))


@dataclass
class MartingaleExpansion:
    """``Delta_P f`` for all transit ``P`` (row = depth) plus ``E_{P0} f``."""

    sigma: CellMeasure
    transit: TransitSet
    coefficients: np.ndarray  # (depth+1, M)
    top: np.ndarray  # (M,)
    ratios: np.ndarray  # <f>_P/<b>_P per node
    b_node: np.ndarray  # int_P b dsigma per node
    generation_chain: dict = field(default_factory=dict)

    @property
    def tree(self) -> CubeTree:
        return self.transit.tree

    def delta(self, node: int, include_top: bool = True) -> np.ndarray:
        """Cellwise ``Delta_P f`` (zero off ``P``); at the root optionally adds ``E_{P0} f``."""
        d = self.tree.node_depth[node]
        on = self.tree.cell_node[d] == node
        out = np.where(on, self.coefficients[d], 0)
        if include_top and node == 0:
            out = out + self.top
        return out

    def delta_norms_sq(self) -> np.ndarray:
        """``||Delta_P f||^2_{L^2(sigma)}`` per node (root without ``E_{P0} f``)."""
        s = self.sigma.abs_weights
        t = self.tree
        out = np.zeros(t.n_nodes)
        for d in range(t.depth + 1):
            out += np.bincount(t.cell_node[d], np.abs(self.coefficients[d]) ** 2 * s, t.n_nodes)
        return out

    def delta_integrals(self) -> np.ndarray:
        """``int Delta_P f dsigma`` per node."""
        s = self.sigma.abs_weights
        t = self.tree
        out = np.zeros(t.n_nodes, dtype=complex)
        for d in range(t.depth + 1):
            v = self.coefficients[d] * s
            out += np.bincount(t.cell_node[d], v.real, t.n_nodes) + 1j * np.bincount(t.cell_node[d], v.imag, t.n_nodes)
        return out

    def top_norm_sq(self) -> float:
        return math.fsum(np.abs(self.top) ** 2 * self.sigma.abs_weights)

    def to_csv(self) -> str:
        """Debug dump: ``depth, corner..., side, transit, norm``."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        t = self.tree
        w.writerow(["depth"] + [f"corner{i}" for i in range(t.grid.n)] + ["side", "transit", "l2_norm"])
        norms = np.sqrt(self.delta_norms_sq())
        for i in range(t.n_nodes):
            w.writerow([int(t.node_depth[i])] + [repr(float(v)) for v in t.node_lower[i]]
                       + [repr(float(t.node_side[i])), int(self.transit.is_transit[i]), repr(float(norms[i]))])
        return out.getvalue()


class _Adapted:
    """The linear map ``f -> (Delta_P f)_P, E_{P0} f`` for fixed ``b``, ``sigma`` and transit set."""

    def __init__(self, b: BoundedDensity, sigma: CellMeasure, transit: TransitSet):
        t = transit.tree
        self.t = t
        self.s = sigma.abs_weights
        self.b = b.values
        self.b_node = t.sums(self.b * self.s)
        tr = transit.is_transit
        if np.any(tr & (np.abs(self.b_node) == 0)):
            raise AccretivityError("a transit cube has <b> = 0")
        D = t.depth
        M = len(self.s)
        # per (depth, cell): P transit, P has more than one cell, child transit
        self.active = np.zeros((D + 1, M), dtype=bool)
        self.child_tr = np.zeros((D + 1, M), dtype=bool)
        for d in range(D + 1):
            P = t.cell_node[d]
            self.active[d] = tr[P] & (t.n_cells[P] > 1)
            if d < D:
                self.child_tr[d] = tr[t.cell_node[d + 1]]
        self.safe_b = np.where(self.b_node == 0, 1.0, self.b_node)

    def ratios(self, f: np.ndarray) -> np.ndarray:
        return self.t.sums(f * self.s) / self.safe_b

    def forward(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.t
        c = self.ratios(f)
        D = t.depth
        C = np.zeros((D + 1, len(f)), dtype=complex)
        for d in range(D + 1):
            cP = c[t.cell_node[d]]
            if d < D:
                cC = c[t.cell_node[d + 1]]
                val = np.where(self.child_tr[d], (cC - cP) * self.b, f - cP * self.b)
            else:
                val = f - cP * self.b
            C[d] = np.where(self.active[d], val, 0)
        top = c[0] * self.b
        return C, top, c

    def adjoint(self, C: np.ndarray, top: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`forward` for the ``L^2(sigma)`` inner products."""
        t = self.t
        D = t.depth
        s, b = self.s, self.b
        nn = t.n_nodes

        def node_sum(node_ids, vals):
            return np.bincount(node_ids, vals.real, nn) + 1j * np.bincount(node_ids, vals.imag, nn)

        out = np.zeros(len(s), dtype=complex)
        # coefficient of the ratio c_P in the output, accumulated per node
        G = np.zeros(nn, dtype=complex)
        G[0] += np.sum(np.conj(b) * top * s)
        for d in range(D + 1):
            g = np.where(self.active[d], C[d], 0)
            if d < D:
                direct = ~self.child_tr[d]
                out += np.where(direct, g, 0)
                G += node_sum(t.cell_node[d + 1], np.where(self.child_tr[d], np.conj(b) * g * s, 0))
                G -= node_sum(t.cell_node[d], np.conj(b) * g * s)
            else:
                out += g
                G -= node_sum(t.cell_node[d], np.conj(b) * g * s)
        # c_P = <f, 1_P / conj(b_P)>_sigma, so its adjoint spreads G_P / conj(b_P) over P
        coef = G / np.conj(self.safe_b)
        for d in range(D + 1):
            out += coef[t.cell_node[d]]
        return out


def expand(f: BoundedDensity, b: BoundedDensity, sigma: CellMeasure, grid: DyadicGrid,
           transit: TransitSet) -> MartingaleExpansion:
    """The martingale expansion of ``f``; ``f`` and ``b`` live on the cells of ``sigma``."""
    if transit.tree.grid != grid:
        raise ValueError("transit set belongs to a different grid")
    op = _Adapted(b, sigma, transit)
    C, top, c = op.forward(np.asarray(f.values, dtype=complex))
    return MartingaleExpansion(sigma, transit, C, top, c, op.b_node)


def reconstruct(exp: MartingaleExpansion) -> np.ndarray:
    """``sum_P Delta_P f + E_{P0} f`` on the cells of sigma."""
    return exp.coefficients.sum(axis=0) + exp.top


def quasi_orthogonality(b: BoundedDensity, sigma: CellMeasure, transit: TransitSet, probes: int = 16,
                        seed: int = 0, iters: int = 200, tol: float = 1e-6) -> dict:
    """``(sum ||Delta_P f||^2 + ||E f||^2) / ||f||^2``: max over seeded probes and the operator norm."""
    op = _Adapted(b, sigma, transit)
    s = sigma.abs_weights
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(probes):
        f = rng.normal(size=len(s)) + 1j * rng.normal(size=len(s))
        C, top, _ = op.forward(f)
        num = math.fsum((np.abs(C) ** 2 @ s).tolist()) + math.fsum(np.abs(top) ** 2 * s)
        best = max(best, num / math.fsum(np.abs(f) ** 2 * s))
    root = np.sqrt(s)

    def apply(g):
        C, top, _ = op.forward(g / root)
        return op.adjoint(C, top) * root

    res = top_eigenvalue(apply, len(s), iters, seed, tol)
    return {"probe_max": best, "operator_norm_sq": res.value, "gap": res.gap}


@dataclass(frozen=True)
class ChainEntry:
    """A good transit cube ``R`` of the reference grid with its ancestors ``P_{R,k}`` in ``D(w)``."""

    R: Cube
    R_cells: np.ndarray
    nodes: dict  # k -> node id in the D(w) tree
    k_top: int


def generation_chains(exp: MartingaleExpansion, grid0: DyadicGrid, params: GoodnessParams,
                      excluded: CellMask, tree0: CubeTree | None = None) -> list[ChainEntry]:
    """Chains ``P_{R,k}``, ``r <= k <= log2(l(P0)/l(R))``, for good transit ``R`` with ``l(R) < 2^-r l(P0)``."""
    sigma = exp.sigma
    tw = exp.tree
    t0 = tree0 or CubeTree(grid0, sigma.coords, min_depth=tw.depth)
    outside = ~excluded.contains_cells(sigma.coords)
    tr0 = t0.any_cell(outside)
    kmax = bad_scale_exponent(t0.node_lower, t0.node_side, tw.grid, params.gamma)
    good = kmax < params.r_param
    out = []
    r = params.r_param
    for node in np.flatnonzero(tr0 & good & (t0.node_depth > r)):
        dR = int(t0.node_depth[node])
        if dR > tw.depth:
            continue
        cells = t0.cells(node)
        nodes = {}
        for k in range(r, dR + 1):
            pn = np.unique(tw.cell_node[dR - k][cells])
            if len(pn) != 1:
                raise RuntimeError("a good cube straddles a large grid cube")
            nodes[k] = int(pn[0])
        out.append(ChainEntry(t0.cube(node), cells, nodes, dR))
    return out


def b_coefficient(chain: ChainEntry, k: int, exp: MartingaleExpansion, b: BoundedDensity,
                  sigma: CellMeasure) -> complex:
    """``B_{P_{R,k-1}} = <Delta_{P_{R,k}} f / b>_{P_{R,k-1}}`` in its closed two-case form."""
    if k - 1 not in chain.nodes or k not in chain.nodes:
        raise KeyError("k outside the chain")
    lo, hi = chain.nodes[k - 1], chain.nodes[k]
    tr = exp.transit.is_transit
    if not (tr[lo] and tr[hi]):
        raise ValueError("B coefficient needs transit cubes")
    if k == chain.k_top:
        return complex(exp.ratios[lo])
    return complex(exp.ratios[lo] - exp.ratios[hi])


def b_coefficient_direct(chain: ChainEntry, k: int, exp: MartingaleExpansion, b: BoundedDensity,
                         sigma: CellMeasure) -> complex:
    """The same coefficient computed as an average of ``Delta f / b``."""
    lo, hi = chain.nodes[k - 1], chain.nodes[k]
    t = exp.tree
    on = t.cell_node[t.node_depth[lo]] == lo
    dl = exp.delta(hi, include_top=True)
    s = sigma.abs_weights
    return complex(np.sum((dl / b.values * s)[on]) / np.sum(s[on]))
