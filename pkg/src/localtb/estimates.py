"""Pair coefficients, the four-case split, Carleson sequences, paraproduct bounds, bad-cube odds.

The estimates behind the boundedness proof hold up to constants.  Here every
constant is explicit, built from measured kernel constants, and each check
multiplies it by ``SLACK``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._numerics import top_eigenvalue
from .geometry import Cube, CubeTree, DyadicGrid, Goodness, GoodnessParams, bad_scale_exponent, box_distance, \
    classify_goodness, grid_seeds, long_distance, sample_grid
from .kernel import _split
from .martingale import b_coefficient
from .measure import BoundedDensity, CellMeasure
from .sqfn import LatticeSF, quadratic_norm

SLACK = 4.0


# pair coefficients -----------------------------------------------------------------------

def a_coefficient(P: Cube, R: Cube, sP: float, sR: float, m: float, alpha: float) -> float:
    """``l(P)^(a/2) l(R)^(a/2) / D(P,R)^(m+a) * sigma(P)^(1/2) sigma(R)^(1/2)``."""
    if sP < 0 or sR < 0:
        raise ValueError("measures must be nonnegative")
    D = long_distance(P, R)
    return (P.side * R.side) ** (alpha / 2) / D ** (m + alpha) * math.sqrt(sP * sR)


def box_distances(lo_a: np.ndarray, side_a: np.ndarray, lo_b: np.ndarray, side_b: np.ndarray) -> np.ndarray:
    """Matrix of gaps between closed boxes ``a_i`` and ``b_j``."""
    lo_a = np.atleast_2d(lo_a)
    lo_b = np.atleast_2d(lo_b)
    hi_a = lo_a + np.asarray(side_a)[:, None]
    hi_b = lo_b + np.asarray(side_b)[:, None]
    gap = np.maximum(0.0, np.maximum(lo_a[:, None, :] - hi_b[None, :, :], lo_b[None, :, :] - hi_a[:, None, :]))
    return np.sqrt(np.sum(gap * gap, axis=2))


def a_matrix(lo_P, side_P, s_P, lo_R, side_R, s_R, m: float, alpha: float) -> np.ndarray:
    """``A_{PR}`` for all pairs (rows ``P``, columns ``R``)."""
    side_P = np.asarray(side_P, dtype=float)
    side_R = np.asarray(side_R, dtype=float)
    d = box_distances(lo_P, side_P, lo_R, side_R)
    D = side_P[:, None] + side_R[None, :] + d
    return (np.outer(side_P, side_R) ** (alpha / 2) / D ** (m + alpha)
            * np.sqrt(np.outer(np.asarray(s_P, dtype=float), np.asarray(s_R, dtype=float))))


@dataclass(frozen=True)
class SchurResult:
    ratio: float
    operator_norm: float
    gap: float


def schur_bound_check(P_cubes: Sequence[Cube], R_cubes: Sequence[Cube], sP, sR, x, y, m: float, alpha: float,
                      iters: int = 200, seed: int = 0) -> SchurResult:
    """``sum A_{PR} x_P y_R / (|x| |y|)`` and the operator norm of ``A`` by power iteration."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("x and y must be nonzero")
    A = a_matrix(np.array([p.lower for p in P_cubes]), [p.side for p in P_cubes], sP,
                 np.array([r.lower for r in R_cubes]), [r.side for r in R_cubes], sR, m, alpha)
    ratio = float(x @ A @ y) / (nx * ny)
    res = top_eigenvalue(lambda v: A.T @ (A @ v), A.shape[1], iters, seed, 1e-8, dtype=float)
    return SchurResult(ratio, math.sqrt(res.value), res.gap)


def dyadic_family_1d(levels: int) -> tuple[list[Cube], np.ndarray]:
    """All dyadic subintervals of ``[0, 1)`` down to side ``2^-levels`` with ``sigma`` = length."""
    cubes = []
    for d in range(levels + 1):
        s = 2.0 ** -d
        cubes.extend(Cube((i * s,), s, d) for i in range(2 ** d))
    return cubes, np.array([c.side for c in cubes])


# the four cases --------------------------------------------------------------------------

def split_cases(R: Cube, P: Cube, params: GoodnessParams) -> int:
    lR, lP = R.side, P.side
    if lP < lR:
        return 1
    d = box_distance(P, R)
    thr = params.threshold(lR, lP)
    if d > thr:
        return 2
    if lP <= 2 ** params.r_param * lR:
        return 3
    return 4


def split_cases_array(lR: float, lP: np.ndarray, d: np.ndarray, params: GoodnessParams) -> np.ndarray:
    thr = params.threshold(lR, lP)
    return np.where(lP < lR, 1, np.where(d > thr, 2, np.where(lP <= 2 ** params.r_param * lR, 3, 4)))


@dataclass(frozen=True)
class EstimateConstants:
    """Explicit constants for the pairwise bounds (before the slack factor)."""

    C_size: float
    C_yhol: float
    C_growth: float
    c_acc: float
    C_b: float
    m: float
    alpha: float
    n: int

    @property
    def case12(self) -> float:
        e = self.m + self.alpha
        c1 = max(self.C_yhol * (math.sqrt(self.n) / 2) ** self.alpha, 2 * self.C_size * self.n ** (self.alpha / 2))
        return max(c1, self.C_size) * 3 ** e

    def case3(self, ratio_sides) -> np.ndarray:
        return self.C_size * 2 ** self.m * self.C_growth * np.asarray(ratio_sides, dtype=float) ** (self.m / 2)

    @property
    def paraproduct(self) -> float:
        m, a = self.m, self.alpha
        t1 = self.C_b * self.C_size * self.C_growth / (2 * math.sqrt(self.n)) ** m * 8 ** m / (1 - 2 ** -a) / self.c_acc
        t2 = self.C_size * self.C_growth * 2 ** (m / 2)
        return 2 ** (a / 2) * max(t1, t2)

    @classmethod
    def build(cls, kernel_report, p0: float, c_acc: float, C_b: float, m: float, alpha: float, n: int,
              C_size: float | None = None) -> "EstimateConstants":
        return cls(C_size if C_size is not None else kernel_report.size_constant, kernel_report.y_holder,
                   p0 * (2 * math.sqrt(n)) ** m, c_acc, C_b, m, alpha, n)


def whitney_samples(R: Cube, cell_centers: np.ndarray, max_points: int = 8, n_times: int = 4):
    """Cell centres inside ``R`` (deterministically thinned) and ``n_times`` log-spaced times in ``[l/2, l)``."""
    inside = np.all((cell_centers >= R.lower) & (cell_centers < R.upper), axis=1)
    idx = np.flatnonzero(inside)
    if len(idx) > max_points:
        idx = idx[np.linspace(0, len(idx) - 1, max_points).round().astype(int)]
    times = R.side / 2 * 2.0 ** (np.arange(n_times) / n_times)
    return idx, times


def _kernel_rows(kernel, xs: np.ndarray, ys: np.ndarray, times: np.ndarray, pitch: float) -> np.ndarray:
    """``s~_t(x, y)`` as an array ``(T, X, Y)``."""
    base, mask = _split(kernel)
    d = np.sqrt(np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=2))
    K = base.profile(times[:, None, None], d[None])
    if mask is not None and len(mask):
        K = K * (~mask.contains_points(xs))[None, :, None]
    return K


@dataclass
class CaseCheck:
    R: Cube
    P: Cube
    case: int
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else (0.0 if self.lhs == 0 else math.inf)


def case_bound_check(R: Cube, P: Cube, f_piece, sigma: CellMeasure, kernel, consts: EstimateConstants,
                     params: GoodnessParams, max_points: int = 8) -> CaseCheck:
    """Largest ``|theta~_t(f_piece sigma)(x)|`` over samples of ``W_R`` against the case bound."""
    case = split_cases(R, P, params)
    if case == 4:
        raise ValueError("case-4 pairs go through the paraproduct bound")
    vals = np.asarray(f_piece, dtype=complex)
    s = sigma.abs_weights
    centers = sigma.centers
    idx, times = whitney_samples(R, centers, max_points)
    norm = math.sqrt(math.fsum(np.abs(vals) ** 2 * s))
    if norm == 0 or len(idx) == 0:
        return CaseCheck(R, P, case, 0.0, 0.0)
    K = _kernel_rows(kernel, centers[idx], centers, times, sigma.pitch)
    lhs = float(np.max(np.abs(K @ (vals * s))))
    sR = math.fsum(s[np.all((centers >= R.lower) & (centers < R.upper), axis=1)])
    sP = math.fsum(s[np.all((centers >= P.lower) & (centers < P.upper), axis=1)])
    if case in (1, 2):
        rhs = SLACK * consts.case12 * a_coefficient(P, R, sP, sR, consts.m, consts.alpha) / math.sqrt(sR) * norm
    else:
        rhs = SLACK * float(consts.case3(P.side / R.side)) / math.sqrt(sR) * norm
    return CaseCheck(R, P, case, lhs, rhs)


# Carleson sequences -----------------------------------------------------------------------

@dataclass
class CarlesonSequence:
    entries: dict  # Cube -> a_P


def subtree_sums(tree: CubeTree, values: np.ndarray) -> np.ndarray:
    """``sum_{P subset S} values[P]`` for every node ``S`` (parents precede children)."""
    acc = np.array(values, dtype=float, copy=True)
    for d in range(tree.depth, 0, -1):
        ids = tree.level(d)
        np.add.at(acc, tree.parent[ids], acc[ids])
    return acc


def carleson_norm_tree(tree: CubeTree, a: np.ndarray, node_sigma: np.ndarray) -> float:
    tot = subtree_sums(tree, a)
    ok = node_sigma > 0
    return float(np.max(tot[ok] / node_sigma[ok])) if np.any(ok) else 0.0


def carleson_norm(seq: CarlesonSequence, grid: DyadicGrid, sigma: CellMeasure) -> float:
    """``max_S sum_{P subset S} a_P / sigma(S)`` over grid cubes with ``sigma(S) > 0``."""
    if not seq.entries:
        return 0.0
    depth = max(grid.depth_of_side(c.side) for c in seq.entries)
    tree = CubeTree(grid, sigma.coords, min_depth=depth)
    a = np.zeros(tree.n_nodes)
    for cube, val in seq.entries.items():
        d = grid.depth_of_side(cube.side)
        if d > tree.depth:
            continue
        idx = np.rint((cube.lower - grid.root.lower) / cube.side).astype(np.int64)
        hit = np.flatnonzero((tree.node_depth == d) & np.all(tree.node_index == idx, axis=1))
        if len(hit):
            a[hit[0]] += val
    return carleson_norm_tree(tree, a, tree.sums(sigma.abs_weights))


# bad cubes ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class BadEstimate:
    value: float
    standard_error: float
    n_grids: int


def bad_scale_samples(R: Cube, base: Cube, gamma: float, n_grids: int, seed: int, pitch: float) -> np.ndarray:
    """For each sampled grid, the largest scale exponent at which ``R`` is too close to a grid boundary."""
    out = np.empty(n_grids, dtype=np.int64)
    for i, s in enumerate(grid_seeds(seed, n_grids)):
        g = sample_grid(base, s, pitch=pitch)
        out[i] = bad_scale_exponent(R.lower[None, :], np.array([R.side]), g, gamma)[0]
    return out


def bad_probability_estimate(R: Cube, base: Cube, params: GoodnessParams, n_grids: int, seed: int,
                             pitch: float, samples: np.ndarray | None = None) -> BadEstimate:
    """Monte Carlo frequency of grids in which ``R`` is bad."""
    if n_grids < 64:
        raise ValueError("n_grids must be at least 64")
    ks = bad_scale_samples(R, base, params.gamma, n_grids, seed, pitch) if samples is None else samples
    p = float(np.mean(ks >= params.r_param))
    return BadEstimate(p, math.sqrt(p * (1 - p) / n_grids), n_grids)


def search_r(R: Cube, base: Cube, gamma: float, tau: float, n_grids: int, seed: int, pitch: float,
             r_values=range(4, 17)) -> tuple[int | None, dict]:
    """Smallest ``r`` whose bad-cube estimate is at most ``tau/2`` (same grids for every ``r``)."""
    ks = bad_scale_samples(R, base, gamma, n_grids, seed, pitch)
    table = {}
    found = None
    for r in r_values:
        est = bad_probability_estimate(R, base, GoodnessParams(r, gamma), n_grids, seed, pitch, ks)
        table[r] = est
        if found is None and est.value <= tau / 2:
            found = r
    return found, table


# batteries over one sampled grid ---------------------------------------------------------

@dataclass
class CheckRow:
    """One estimate check: the worst sampled ratio and where it occurred."""

    name: str
    lhs: float
    rhs: float
    count: int
    witness: str = ""

    @property
    def ratio(self) -> float:
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs == 0 else math.inf

    @property
    def ok(self) -> bool:
        return self.ratio <= 1.0

    def as_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio,
                "count": self.count, "witness": self.witness, "ok": self.ok}


def _worse(row: CheckRow, lhs: float, rhs: float, witness: str) -> CheckRow:
    new = CheckRow(row.name, lhs, rhs, row.count, witness)
    return new if new.ratio > row.ratio else row


def _cube_label(c: Cube) -> str:
    return "[" + ",".join(f"{v:.6g}" for v in c.corner) + f"]+{c.side:.6g}"


def _node_delta_matrix(exp):
    """Sparse ``(M, nodes)`` matrix whose column ``P`` is ``Delta_P f * sigma`` (top term folded into the root)."""
    tree = exp.tree
    s = exp.sigma.abs_weights
    M = len(s)
    rows, cols, vals = [], [], []
    for d in range(tree.depth + 1):
        v = exp.coefficients[d] * s
        if d == 0:
            v = v + exp.top * s
        rows.append(np.arange(M))
        cols.append(tree.cell_node[d])
        vals.append(v)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(M, tree.n_nodes))


def node_delta_norms(exp) -> np.ndarray:
    """``||Delta_P f||_{L^2(sigma)}`` per node, top term folded into the root."""
    tree = exp.tree
    s = exp.sigma.abs_weights
    out = np.zeros(tree.n_nodes)
    for d in range(tree.depth + 1):
        v = exp.coefficients[d] + (exp.top if d == 0 else 0)
        out += np.bincount(tree.cell_node[d], np.abs(v) ** 2 * s, minlength=tree.n_nodes) * (tree.node_depth == d)
    return np.sqrt(out)


def select_cubes(chains, limit: int):
    """At most ``limit`` chain entries spread evenly over the list."""
    if len(chains) <= limit:
        return list(chains)
    idx = np.linspace(0, len(chains) - 1, limit).round().astype(int)
    return [chains[i] for i in idx]


def case_battery(exp, chains, kernel, consts: EstimateConstants, params: GoodnessParams,
                 max_cubes: int = 48, max_points: int = 8) -> dict[str, CheckRow]:
    """Cases 1-3 for every ``D(w)`` node against the good cubes of ``chains`` (thinned to ``max_cubes``)."""
    sigma = exp.sigma
    tree = exp.tree
    s = sigma.abs_weights
    centers = sigma.centers
    Bmat = _node_delta_matrix(exp)
    norms = node_delta_norms(exp)
    node_sigma = tree.sums(s)
    lo, side = tree.node_lower, tree.node_side
    rows = {"case12": CheckRow("case12", 0.0, 1.0, 0), "case3": CheckRow("case3", 0.0, 1.0, 0),
            "case3_size": CheckRow("case3_size", 0.0, 1.0, 0), "case2_domination": CheckRow("case2_domination", 0.0, 1.0, 0)}
    for ch in select_cubes(chains, max_cubes):
        R = ch.R
        idx, times = whitney_samples(R, centers[ch.R_cells], max_points)
        idx = ch.R_cells[idx]
        K = _kernel_rows(kernel, centers[idx], centers, times, sigma.pitch)
        T, X = K.shape[:2]
        Theta = np.abs((Bmat.T @ K.reshape(T * X, -1).T).T).reshape(T, X, -1)
        lhs_t = Theta.max(axis=1)  # (T, nodes)
        lhs = lhs_t.max(axis=0)
        sR = float(np.sum(s[ch.R_cells]))
        d = box_distances(R.lower[None, :], [R.side], lo, side)[0]
        case = split_cases_array(R.side, side, d, params)
        D = side + R.side + d
        A = (side * R.side) ** (consts.alpha / 2) / D ** (consts.m + consts.alpha) * np.sqrt(node_sigma * sR)
        live = norms > 0
        c12 = live & (case <= 2)
        rhs12 = SLACK * consts.case12 * A / math.sqrt(sR) * norms
        c3 = live & (case == 3)
        rhs3 = SLACK * consts.case3(side / R.side) / math.sqrt(sR) * norms
        size_rhs = SLACK * consts.C_size * times[:, None] ** (-consts.m) * np.sqrt(node_sigma)[None, :] * norms[None, :]
        for name, sel, l, r in (("case12", c12, lhs, rhs12), ("case3", c3, lhs, rhs3)):
            if not np.any(sel):
                continue
            rows[name].count += int(np.sum(sel))
            ratio = np.where(sel, l / np.where(r > 0, r, 1.0), -1.0)
            j = int(np.argmax(ratio))
            rows[name] = _worse(rows[name], float(l[j]), float(r[j]),
                                f"R={_cube_label(R)} P={_cube_label(tree.cube(j))} case={int(case[j])}")
        if np.any(c3):
            rows["case3_size"].count += int(np.sum(c3)) * T
            rt = np.where(c3[None, :], lhs_t / np.where(size_rhs > 0, size_rhs, 1.0), -1.0)
            ti, j = np.unravel_index(int(np.argmax(rt)), rt.shape)
            rows["case3_size"] = _worse(rows["case3_size"], float(lhs_t[ti, j]), float(size_rhs[ti, j]),
                                        f"R={_cube_label(R)} P={_cube_label(tree.cube(j))} t={times[ti]:.6g}")
        c2 = (case == 2) & (node_sigma > 0)
        if np.any(c2):
            rows["case2_domination"].count += int(np.sum(c2))
            with np.errstate(divide="ignore"):
                l2 = R.side ** consts.alpha / d ** (consts.m + consts.alpha) * np.sqrt(node_sigma)
            r2 = SLACK * 3 ** (consts.m + consts.alpha) * A / math.sqrt(sR)
            ratio = np.where(c2, l2 / np.where(r2 > 0, r2, 1.0), -1.0)
            j = int(np.argmax(ratio))
            rows["case2_domination"] = _worse(rows["case2_domination"], float(l2[j]), float(r2[j]),
                                              f"R={_cube_label(R)} P={_cube_label(tree.cube(j))}")
    return rows


@dataclass
class ParaproductSample:
    k: int
    lhs_b: float
    lhs_sibling: float
    rhs: float
    scale: float  # sigma(P_{k-1})^(-1/2) ||Delta_{P_k} f||
    distance_ratio: float  # d(R, boundary of P_{k-1}) / (l(R) l(P_{k-1}))^(1/2)


def paraproduct_bound_check(chain, k: int, exp, kernel, consts: EstimateConstants, b: BoundedDensity,
                            params: GoodnessParams | None = None, max_points: int = 8) -> ParaproductSample:
    """Both paraproduct terms at the Whitney samples of ``R`` against ``C 2^(-alpha k/2) sigma(P_{k-1})^(-1/2) ||Delta_{P_k} f||``."""
    if params is not None:
        if classify_goodness(chain.R, exp.tree.grid, params) is not Goodness.GOOD:
            raise ValueError("R is not good")
    return paraproduct_chain(chain, exp, kernel, consts, b, [k], max_points)[0]


def paraproduct_chain(chain, exp, kernel, consts: EstimateConstants, b: BoundedDensity, ks,
                      max_points: int = 8) -> list[ParaproductSample]:
    sigma = exp.sigma
    tree = exp.tree
    s = sigma.abs_weights
    centers = sigma.centers
    R = chain.R
    idx, times = whitney_samples(R, centers[chain.R_cells], max_points)
    idx = chain.R_cells[idx]
    K = _kernel_rows(kernel, centers[idx], centers, times, sigma.pitch)
    T, X = K.shape[:2]
    K2 = K.reshape(T * X, -1)
    bs = b.values * s
    full = K2 @ bs
    out = []
    for k in ks:
        if not (k - 1 in chain.nodes and k in chain.nodes):
            raise KeyError("k outside the chain")
        lo_node, hi_node = chain.nodes[k - 1], chain.nodes[k]
        d_lo, d_hi = int(tree.node_depth[lo_node]), int(tree.node_depth[hi_node])
        in_lo = tree.cell_node[d_lo] == lo_node
        in_hi = tree.cell_node[d_hi] == hi_node
        delta = exp.coefficients[d_hi] + (exp.top if d_hi == 0 else 0)
        B = b_coefficient(chain, k, exp, b, sigma)
        outside = full - K2 @ (bs * in_lo)
        lhs_b = float(np.max(np.abs(B * outside)))
        lhs_sib = float(np.max(np.abs(K2 @ (delta * s * (in_hi & ~in_lo)))))
        norm = math.sqrt(math.fsum(np.abs(delta[in_hi]) ** 2 * s[in_hi]))
        s_lo = math.fsum(s[in_lo])
        scale = norm / math.sqrt(s_lo)
        rhs = SLACK * consts.paraproduct * 2.0 ** (-consts.alpha * k / 2) * scale
        P = tree.cube(lo_node)
        gap = float(np.min(np.minimum(R.lower - P.lower, P.upper - R.upper)))
        dr = gap / math.sqrt(R.side * P.side)
        out.append(ParaproductSample(k, lhs_b, lhs_sib, rhs, scale, dr))
    return out


def paraproduct_battery(exp, chains, kernel, consts: EstimateConstants, b: BoundedDensity,
                        max_cubes: int = 48, max_points: int = 8) -> tuple[CheckRow, float]:
    """Worst paraproduct ratio over the (thinned) chains and the smallest ``d(R, dP)/l(R)`` seen."""
    row = CheckRow("paraproduct", 0.0, 1.0, 0)
    min_dist = math.inf
    for ch in select_cubes(chains, max_cubes):
        ks = [k for k in sorted(ch.nodes) if k - 1 in ch.nodes]
        for smp in paraproduct_chain(ch, exp, kernel, consts, b, ks, max_points):
            row.count += 1
            lhs = max(smp.lhs_b, smp.lhs_sibling)
            row = _worse(row, lhs, smp.rhs, f"R={_cube_label(ch.R)} k={smp.k}")
            P = exp.tree.cube(ch.nodes[smp.k - 1])
            min_dist = min(min_dist, smp.distance_ratio * math.sqrt(P.side / ch.R.side))
            if smp.distance_ratio < 1:
                row = _worse(row, math.inf, 1.0, f"R={_cube_label(ch.R)} k={smp.k} too close to the boundary")
    return row, min_dist


def whitney_assignment(times: np.ndarray, l_root: float) -> np.ndarray:
    """Depth in the reference tree of the Whitney cube ``R(x,t)`` (side ``l`` with ``l/2 <= t < l``) per time."""
    ell = 2.0 ** (np.floor(np.log2(times)) + 1)
    return np.rint(np.log2(l_root / ell)).astype(int)


def whitney_weights(sigma: CellMeasure, grid0: DyadicGrid, grid_w: DyadicGrid, excluded_cells: np.ndarray,
                    times: np.ndarray, params: GoodnessParams, require_depth: int = 0):
    """For each ``(t, x)``: the reference node of ``R(x,t)`` and whether it is good and transit."""
    depths = whitney_assignment(times, grid0.root.side)
    if np.any(depths < 0):
        raise ValueError("times exceed the root side")
    tree0 = CubeTree(grid0, sigma.coords, min_depth=int(depths.max()))
    tr = tree0.any_cell(~excluded_cells)
    kmax = bad_scale_exponent(tree0.node_lower, tree0.node_side, grid_w, params.gamma)
    good = kmax < params.r_param
    nodes = tree0.cell_node[depths]  # (T, M)
    ok = tr[nodes] & good[nodes] & (depths[:, None] >= require_depth)
    return tree0, nodes, ok


def carleson_sequence_tree(sigma: CellMeasure, sf_sq: np.ndarray, weights_t: np.ndarray, grid0: DyadicGrid,
                           grid_w: DyadicGrid, excluded_cells: np.ndarray, times: np.ndarray,
                           params: GoodnessParams, r_map: int | None = None) -> float:
    """Carleson norm of ``a_P = sum_{R: P_{R,r} = P} int_{W_R} |theta~ b|^2`` on the random grid.

    ``sf_sq`` is ``|theta~_t b|^2`` with shape ``(T, M)``.  Goodness uses
    ``params``; ``r_map`` (default ``params.r_param``) fixes the ancestor ``P_{R,r}``.
    """
    r = params.r_param if r_map is None else r_map
    _, _, ok = whitney_weights(sigma, grid0, grid_w, excluded_cells, times, params, require_depth=r + 1)
    depths = whitney_assignment(times, grid0.root.side)
    tw = CubeTree(grid_w, sigma.coords, min_depth=int(depths.max()))
    s = sigma.abs_weights
    a = np.zeros(tw.n_nodes)
    contrib = weights_t[:, None] * sf_sq * s[None, :] * ok
    for i, d in enumerate(depths):
        if d - r < 0:
            continue
        np.add.at(a, tw.cell_node[d - r], contrib[i])
    return carleson_norm_tree(tw, a, tw.sums(s))


def assembly_constant(sigma: CellMeasure, kernel, times: np.ndarray, weights_t: np.ndarray, grid0: DyadicGrid,
                      grid_w: DyadicGrid, excluded_cells: np.ndarray, params: GoodnessParams,
                      iters: int = 100, seed: int = 0):
    """Top eigenvalue ``C`` of ``sum_{R good, transit} int_{W_R} |theta~_t f|^2 <= C ||f||^2``."""
    _, _, ok = whitney_weights(sigma, grid0, grid_w, excluded_cells, times, params)
    op = LatticeSF(sigma.pitch, sigma.coords, sigma.coords, kernel, times)
    xw = weights_t[:, None] * sigma.abs_weights[None, :] * ok
    return quadratic_norm(op, sigma.abs_weights, xw, iters, seed)


def rows_to_csv(rows, scenario: str) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["check", "scenario", "lhs", "rhs", "ratio", "witness"])
    for r in rows:
        w.writerow([r.name, scenario, repr(float(r.lhs)), repr(float(r.rhs)), repr(float(r.ratio)), r.witness])
    return out.getvalue()
