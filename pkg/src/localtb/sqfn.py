"""Kernel averages ``theta_t``, vertical square functions and operator-norm estimates.

Integrals over ``t`` use the midpoint rule in ``log t``.  When the evaluation
points are cell centres of the same lattice as the measure, ``theta_t`` is a
lattice convolution and is computed by FFT (:class:`LatticeSF`).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import fft as sfft

from ._numerics import PowerResult, top_eigenvalue, weak_type_functional
from .geometry import Cube
from .kernel import CellMask, KernelSpec, _split, default_sample_plan, verify_kernel_conditions
from .measure import BoundedDensity, CellMeasure

__all__ = [
    "TimeQuadrature", "SFValue", "LatticeSF", "theta", "vertical_sf", "square_function_field",
    "tail_estimate_check", "weak_type_functional", "restricted_operator_norm", "NormEstimate",
    "sf_field_to_csv",
]


@dataclass(frozen=True)
class TimeQuadrature:
    """Midpoint rule for ``int_{t_min}^{t_max} g(t) dt/t`` on a uniform grid in ``log t``."""

    t_min: float
    t_max: float
    nodes_per_octave: int = 16

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.nodes_per_octave < 1:
            raise ValueError("nodes_per_octave must be positive")

    @classmethod
    def for_pitch(cls, pitch: float, t_max: float, nodes_per_octave: int = 16) -> "TimeQuadrature":
        """Quadrature starting at the smallest admissible time ``4 h``."""
        return cls(4 * pitch, t_max, nodes_per_octave)

    def check_pitch(self, pitch: float) -> None:
        if self.t_min < 4 * pitch * (1 - 1e-12):
            raise ValueError(f"t_min={self.t_min} is below 4h={4 * pitch}")

    @property
    def count(self) -> int:
        return max(1, int(math.ceil(math.log2(self.t_max / self.t_min) * self.nodes_per_octave - 1e-9)))

    @property
    def step(self) -> float:
        return math.log(self.t_max / self.t_min) / self.count

    @property
    def times(self) -> np.ndarray:
        return self.t_min * np.exp((np.arange(self.count) + 0.5) * self.step)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.count, self.step)

    @property
    def nodes(self) -> list[tuple[float, float]]:
        return list(zip(self.times.tolist(), self.weights.tolist()))

    def truncated(self, t_max: float) -> "TimeQuadrature":
        return TimeQuadrature(self.t_min, t_max, self.nodes_per_octave)

    def refined(self) -> "TimeQuadrature":
        return TimeQuadrature(self.t_min, self.t_max, 2 * self.nodes_per_octave)


@dataclass(frozen=True)
class SFValue:
    value: float
    per_band: np.ndarray

    def __float__(self):
        return self.value


def _check_t(t, quad: TimeQuadrature | None, pitch: float):
    if not t > 0:
        raise ValueError("t must be positive")
    floor = quad.t_min if quad is not None else 4 * pitch
    if t < floor * (1 - 1e-12):
        raise ValueError(f"t={t} is below the smallest admissible time {floor}")


def _profile_matrix(nu: CellMeasure, x: np.ndarray, times: np.ndarray, base: KernelSpec) -> np.ndarray:
    d = np.sqrt(np.sum((nu.centers - x[None, :]) ** 2, axis=1))
    return base.profile(times[:, None], d[None, :])


def theta(nu: CellMeasure, x, t: float, kernel, quad: TimeQuadrature | None = None) -> complex:
    """``sum_j s_t(x, c_j) w_j`` (midpoint rule per cell)."""
    _check_t(t, quad, nu.pitch)
    base, mask = _split(kernel)
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(nu) == 0 or (mask is not None and len(mask) and mask.contains_points(x)[0]):
        return 0j
    k = _profile_matrix(nu, x, np.array([t]), base)[0]
    return complex(np.sum(k * nu.weights))


def vertical_sf(nu: CellMeasure, x, quad: TimeQuadrature, kernel) -> SFValue:
    """``(sum_nodes |theta_t nu(x)|^2 w_t)^(1/2)`` with the per-node contributions."""
    base, mask = _split(kernel)
    x = np.asarray(x, dtype=float).reshape(-1)
    tt = quad.times
    if len(nu) == 0 or (mask is not None and len(mask) and mask.contains_points(x)[0]):
        return SFValue(0.0, np.zeros(len(tt)))
    th = _profile_matrix(nu, x, tt, base) @ nu.weights
    bands = np.abs(th) ** 2 * quad.weights
    return SFValue(math.sqrt(math.fsum(bands)), bands)


class LatticeSF:
    """``theta_t`` from cells ``src`` to the centres of cells ``dst`` for all quadrature times.

    Both cell sets live on the lattice of pitch ``h``; ``suppressed`` (a boolean
    array over ``dst``) zeroes the output rows of suppressed points.
    """

    def __init__(self, pitch: float, src, dst, kernel, times: Sequence[float], suppressed=None):
        base, mask = _split(kernel)
        self.pitch = pitch
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.times = np.asarray(times, dtype=float)
        n = self.src.shape[1]
        allc = np.concatenate([self.src, self.dst])
        self.lo = allc.min(axis=0)
        span = allc.max(axis=0) - self.lo + 1
        self.shape = tuple(int(sfft.next_fast_len(int(2 * s - 1))) for s in span)
        offs = []
        for a, F in enumerate(self.shape):
            i = np.arange(F)
            offs.append(np.where(i < F // 2 + 1, i, i - F).astype(float))
        mesh = np.meshgrid(*offs, indexing="ij")
        dist = pitch * np.sqrt(sum(m * m for m in mesh))
        axes = tuple(range(1, n + 1))
        ker = base.profile(self.times.reshape((-1,) + (1,) * n), dist[None])
        self.kf = sfft.fftn(ker, axes=axes)
        self.axes = axes
        self._si = tuple((self.src - self.lo).T)
        self._di = tuple((self.dst - self.lo).T)
        keep = np.ones(len(self.dst))
        if suppressed is not None:
            keep = 1.0 - np.asarray(suppressed, dtype=float)
        if mask is not None and len(mask):
            keep = keep * (~mask.contains_cells(self.dst))
        self.keep = keep

    def theta(self, weights) -> np.ndarray:
        """Array ``(T, len(dst))`` of ``theta_t`` applied to the cell weights on ``src``."""
        g = np.zeros(self.shape, dtype=complex)
        g[self._si] = weights
        gf = sfft.fftn(g)
        out = sfft.ifftn(self.kf * gf[None], axes=self.axes)
        idx = (slice(None),) + self._di
        return out[idx] * self.keep[None, :]

    def adjoint(self, values) -> np.ndarray:
        """``sum_t sum_x conj(s_t(x, y)) values[t, x]`` at each source cell ``y``."""
        vals = np.asarray(values) * self.keep[None, :]
        g = np.zeros((len(self.times),) + self.shape, dtype=complex)
        g[(slice(None),) + self._di] = vals
        gf = sfft.fftn(g, axes=self.axes)
        acc = np.sum(np.conj(self.kf) * gf, axis=0)
        return sfft.ifftn(acc)[self._si]


def square_function_field(nu: CellMeasure, quad: TimeQuadrature, kernel, dst=None,
                          suppressed=None) -> np.ndarray:
    """``V nu`` at the centres of the cells ``dst`` (defaults to the support of ``nu``)."""
    dst = nu.coords if dst is None else np.asarray(dst, dtype=np.int64)
    if len(nu) == 0:
        return np.zeros(len(dst))
    op = LatticeSF(nu.pitch, nu.coords, dst, kernel, quad.times, suppressed)
    th = op.theta(nu.weights)
    return np.sqrt(np.einsum("t,tx->x", quad.weights, np.abs(th) ** 2))


def sf_field_to_csv(coords, values) -> str:
    out = io.StringIO()
    coords = np.asarray(coords)
    w = csv.writer(out, lineterminator="\n")
    w.writerow([f"k{i}" for i in range(coords.shape[1])] + ["V"])
    for c, v in zip(coords, values):
        w.writerow([int(a) for a in c] + [repr(float(v))])
    return out.getvalue()


def size_constant(kernel) -> float:
    """``sup |s_t(x,y)| (t + |x-y|)^(m+alpha) / t^alpha``: exact for the closed forms, sampled otherwise."""
    base, _ = _split(kernel)
    e = base.m + base.alpha
    if base.family_id.value == "standard":
        return abs(base.amplitude)
    if base.family_id.value == "poisson_like":
        return abs(base.amplitude) * 2.0 ** (e / 2)
    return verify_kernel_conditions(base, default_sample_plan(1)).size_constant


def tail_estimate_check(f: BoundedDensity, nu: CellMeasure, Q: Cube, kernel,
                        nodes_per_octave: int = 16, C_size: float | None = None) -> tuple[float, float]:
    """Largest ``int_{l(Q)}^{2^10 l(Q)} |theta_t(f nu)|^2 dt/t`` over support points, and its bound.

    The bound ``C^2/(2m) |nu|(Q) l(Q)^(-2m) ||f||^2`` follows from
    ``|s_t| <= C t^(-m)`` and Cauchy-Schwarz.
    """
    base, _ = _split(kernel)
    C = size_constant(kernel) if C_size is None else C_size
    l = Q.side
    quad = TimeQuadrature(l, 2.0 ** 10 * l, nodes_per_octave)
    fnu = f.times(nu)
    lhs = 0.0
    if len(fnu):
        op = LatticeSF(nu.pitch, fnu.coords, nu.coords, kernel, quad.times)
        th = op.theta(fnu.weights)
        lhs = float(np.max(np.einsum("t,tx->x", quad.weights, np.abs(th) ** 2)))
    mass_Q = nu.cube_mass(Q, absolute=True)
    rhs = C * C / (2 * base.m) * mass_Q * l ** (-2 * base.m) * f.l2_norm_sq(nu)
    return lhs, rhs


@dataclass(frozen=True)
class NormEstimate:
    value: float
    gap: float
    iterations: int

    def __float__(self):
        return self.value


def quadratic_norm(op: LatticeSF, src_mass: np.ndarray, xweights: np.ndarray, iters: int, seed: int,
                   tol: float = 1e-3) -> PowerResult:
    """Top eigenvalue of ``g -> D K^* W K D g`` with ``D = diag(sqrt(src_mass))``.

    ``xweights`` has shape ``(T, len(dst))``; the eigenvalue is the squared norm
    of ``f -> (sum_t sum_x xweights |theta_t(f src_mass)(x)|^2)^(1/2)`` on ``L^2(src_mass)``.
    """
    root = np.sqrt(src_mass)

    def apply(g):
        th = op.theta(root * g)
        return root * op.adjoint(xweights * th)

    return top_eigenvalue(apply, len(src_mass), iters, seed, tol)


def restricted_operator_norm(sigma: CellMeasure, G, Q: Cube, quad: TimeQuadrature, kernel,
                             iters: int = 64, seed: int = 0, tol: float = 1e-3) -> NormEstimate:
    """Power-iteration estimate of ``sup_f ||1_G V_{sigma,Q} f||_{L^2(sigma)} / ||f||_{L^2(sigma)}``.

    ``G`` is a boolean array over ``sigma.coords`` or a :class:`CellMask`.
    """
    if iters < 8:
        raise ValueError("iters must be at least 8")
    if isinstance(G, CellMask):
        if len(G) == 0:
            raise ValueError("G is empty")
        g_mask = G.contains_cells(sigma.coords)
    else:
        g_mask = np.asarray(G, dtype=bool)
        if g_mask.shape != (len(sigma),):
            raise ValueError("G must be aligned with the cells of sigma")
        if not g_mask.any():
            raise ValueError("G is empty")
    smass = sigma.abs_weights
    if not np.any(g_mask) or math.fsum(smass[g_mask]) == 0:
        return NormEstimate(0.0, 0.0, 0)
    if quad.t_max > Q.side * (1 + 1e-12):
        quad = quad.truncated(Q.side)
    dst = sigma.coords[g_mask]
    op = LatticeSF(sigma.pitch, sigma.coords, dst, kernel, quad.times)
    xw = quad.weights[:, None] * smass[g_mask][None, :]
    res = quadratic_norm(op, smass, xw, iters, seed, tol)
    return NormEstimate(math.sqrt(res.value), res.gap, res.iterations)
