"""Small numerical helpers shared by several modules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def weak_type_functional(values, weights, s: float) -> float:
    """``sup_lambda lambda^s * sum{weights_i : values_i > lambda}``.

    The supremum is reached as lambda increases to one of the values, where the
    level set is ``{values >= v}``, so it is enough to scan the distinct values.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if values.shape != weights.shape:
        raise ValueError("values and weights differ in length")
    if not s > 0:
        raise ValueError("s must be positive")
    if values.size == 0:
        return 0.0
    if np.any(values < 0) or np.any(weights < 0):
        raise ValueError("values and weights must be nonnegative")
    order = np.argsort(-values, kind="stable")
    v = values[order]
    cum = np.cumsum(weights[order])
    # level set {values >= v_i}: take the last index of each tie group
    last = np.r_[v[1:] != v[:-1], True]
    cand = np.power(v[last], s) * cum[last]
    return float(np.max(cand))


@dataclass(frozen=True)
class PowerResult:
    value: float
    gap: float
    iterations: int
    vector: np.ndarray


def top_eigenvalue(apply: Callable[[np.ndarray], np.ndarray], dim: int, iters: int, seed: int,
                   tol: float = 1e-3, dtype=complex) -> PowerResult:
    """Largest eigenvalue of a PSD operator via power iteration with Rayleigh quotients.

    Starts from a seeded positive vector and stops once successive Rayleigh
    quotients differ by less than ``tol`` (relative) or ``iters`` runs out.
    """
    if dim == 0:
        return PowerResult(0.0, 0.0, 0, np.zeros(0, dtype=dtype))
    rng = np.random.default_rng(seed)
    v = (0.5 + rng.random(dim)).astype(dtype)
    v /= np.linalg.norm(v)
    prev = None
    gap = math.inf
    it = 0
    for it in range(1, iters + 1):
        w = apply(v)
        lam = float(np.real(np.vdot(v, w)))
        nw = np.linalg.norm(w)
        if prev is not None:
            gap = abs(lam - prev) / max(abs(lam), 1e-300)
        if nw == 0:
            return PowerResult(0.0, 0.0, it, v)
        v = w / nw
        if prev is not None and gap < tol:
            prev = lam
            break
        prev = lam
    return PowerResult(max(prev, 0.0), gap, it, v)
