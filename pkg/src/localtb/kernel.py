"""Radial kernel families ``s_t(x, y) = k(t, |x - y|)`` and their regularity checks."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .measure import CellMask


class Family(str, enum.Enum):
    STANDARD = "standard"
    POISSON_LIKE = "poisson_like"
    CUSTOM_TABLE = "custom-table"


@dataclass(frozen=True)
class KernelTable:
    """Samples ``k(t_i, d_j)``; rows are times, columns distances.

    Values are interpolated bilinearly in ``(log t, d)``.  ``log t`` is clamped
    to the table range and the kernel vanishes beyond the largest distance.
    A repeated distance node encodes a jump.
    """

    times: np.ndarray
    dists: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        d = np.asarray(self.dists, dtype=float)
        v = np.asarray(self.values, dtype=complex)
        if v.shape != (len(t), len(d)):
            raise ValueError("table values must have shape (len(times), len(dists))")
        if np.any(t <= 0) or np.any(np.diff(t) <= 0):
            raise ValueError("table times must be positive and increasing")
        if np.any(np.diff(d) < 0) or d[0] < 0:
            raise ValueError("table distances must be nonnegative and nondecreasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "dists", d)
        object.__setattr__(self, "values", v)

    def __hash__(self):
        return hash((self.times.tobytes(), self.dists.tobytes(), self.values.tobytes()))

    def __eq__(self, other):
        return (isinstance(other, KernelTable) and np.array_equal(self.times, other.times)
                and np.array_equal(self.dists, other.dists) and np.array_equal(self.values, other.values))

    def evaluate(self, t, d) -> np.ndarray:
        t, d = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(d, dtype=float))
        lt = np.log(self.times)
        x = np.clip(np.log(t), lt[0], lt[-1])
        if len(lt) > 1:
            i = np.clip(np.searchsorted(lt, x, side="right") - 1, 0, len(lt) - 2)
            ft = (x - lt[i]) / (lt[i + 1] - lt[i])
        else:
            i = np.zeros(x.shape, dtype=int)
            ft = np.zeros(x.shape)
        ds = self.dists
        j = np.clip(np.searchsorted(ds, d, side="right") - 1, 0, max(len(ds) - 2, 0))
        if len(ds) > 1:
            width = ds[j + 1] - ds[j]
            fd = np.where(width > 0, (d - ds[j]) / np.where(width > 0, width, 1.0), 0.0)
            fd = np.clip(fd, 0.0, 1.0)
            j1 = j + 1
        else:
            fd = np.zeros(d.shape)
            j1 = j
        i1 = np.minimum(i + 1, len(lt) - 1)
        v = self.values
        lo = v[i, j] * (1 - fd) + v[i, j1] * fd
        hi = v[i1, j] * (1 - fd) + v[i1, j1] * fd
        out = lo * (1 - ft) + hi * ft
        return np.where(d > ds[-1], 0.0, out)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("t,d,re,im\n")
        for a, t in enumerate(self.times):
            for b, d in enumerate(self.dists):
                z = complex(self.values[a, b])
                out.write(f"{float(t)!r},{float(d)!r},{z.real!r},{z.imag!r}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "KernelTable":
        """Rows ``t, |x-y|, re, im`` forming a full tensor grid; a header row is optional."""
        rows = []
        for rec in csv.reader(io.StringIO(text)):
            if not rec or rec[0].strip().startswith("#"):
                continue
            try:
                rows.append(tuple(float(v) for v in rec[:4]))
            except ValueError:
                continue
        if not rows:
            raise ValueError("kernel table is empty")
        ts = sorted({r[0] for r in rows})
        # distance columns keep their multiplicity (a repeated value marks a jump)
        first_t = ts[0]
        ds = [r[1] for r in rows if r[0] == first_t]
        order = np.argsort(ds, kind="stable")
        ds = [ds[k] for k in order]
        vals = np.zeros((len(ts), len(ds)), dtype=complex)
        for a, t in enumerate(ts):
            sub = [r for r in rows if r[0] == t]
            if len(sub) != len(ds):
                raise ValueError("kernel table is not a full (t, d) tensor grid")
            sub = [sub[k] for k in np.argsort([r[1] for r in sub], kind="stable")]
            vals[a] = [complex(r[2], r[3]) for r in sub]
        return cls(np.array(ts), np.array(ds), vals)

    @classmethod
    def load(cls, path) -> "KernelTable":
        with open(path) as fh:
            return cls.from_csv(fh.read())


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family with exponents ``m`` and ``alpha``.

    ``params[0]`` (default 1) is a complex amplitude for the closed-form families.
    """

    m: float
    alpha: float
    family_id: Family = Family.STANDARD
    params: tuple = ()
    table: KernelTable | None = None

    def __post_init__(self):
        object.__setattr__(self, "family_id", Family(self.family_id))
        object.__setattr__(self, "params", tuple(self.params))
        if not (self.m > 0 and self.alpha > 0):
            raise ValueError("m and alpha must be positive")
        if self.family_id is Family.CUSTOM_TABLE and self.table is None:
            raise ValueError("custom-table kernels need a table")

    @property
    def amplitude(self) -> complex:
        return complex(self.params[0]) if self.params else 1.0

    def profile(self, t, d) -> np.ndarray:
        """``k(t, d)`` with broadcasting; ``t`` must be positive."""
        t = np.asarray(t, dtype=float)
        d = np.asarray(d, dtype=float)
        if np.any(t <= 0):
            raise ValueError("t must be positive")
        e = self.m + self.alpha
        if self.family_id is Family.STANDARD:
            val = np.power(t, self.alpha) / np.power(t + d, e)
        elif self.family_id is Family.POISSON_LIKE:
            val = np.power(t, self.alpha) / np.power(t * t + d * d, e / 2)
        else:
            return self.table.evaluate(t, d)
        amp = self.amplitude
        return val * amp if amp != 1.0 else val

    def describe(self) -> dict:
        return {"family": self.family_id.value, "m": self.m, "alpha": self.alpha,
                "params": [repr(complex(p)) if isinstance(p, complex) else p for p in self.params]}


@dataclass(frozen=True)
class SuppressedKernel:
    """``s_t(x, y) 1_{x not in S0}``."""

    base: KernelSpec
    suppression_mask: CellMask

    @property
    def m(self):
        return self.base.m

    @property
    def alpha(self):
        return self.base.alpha


def _split(kernel) -> tuple[KernelSpec, CellMask | None]:
    if isinstance(kernel, SuppressedKernel):
        return kernel.base, kernel.suppression_mask
    return kernel, None


def kernel_eval(spec, x, y, t: float) -> complex:
    """``s_t(x, y)`` for a base or suppressed kernel."""
    if not t > 0:
        raise ValueError("t must be positive")
    base, mask = _split(spec)
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if mask is not None and len(mask) and mask.contains_points(x)[0]:
        return 0j
    d = float(np.sqrt(np.sum((x - y) ** 2)))
    return complex(base.profile(t, d))


@dataclass(frozen=True)
class SamplePlan:
    points: np.ndarray
    times: np.ndarray
    perturbations: np.ndarray  # fractions of t, each in (0, 1/2)
    seed: int = 0


def default_sample_plan(n: int, seed: int = 0, extent: float = 1.0) -> SamplePlan:
    """16 points x 12 log-spaced times x 8 perturbation magnitudes."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-extent, extent, size=(16, n))
    pts[0] = 0.0
    times = np.logspace(-3, 1, 12) * extent
    pert = np.logspace(-4, math.log10(0.49), 8)
    return SamplePlan(pts, times, pert, seed)


@dataclass
class KernelReport:
    size_constant: float
    y_holder: float
    x_holder: float
    samples: int
    violations: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"size_constant": self.size_constant, "y_holder": self.y_holder,
                "x_holder": self.x_holder, "samples": self.samples,
                "violations": dict(sorted(self.violations.items()))}


def verify_kernel_conditions(spec, plan: SamplePlan, ceilings: dict | None = None) -> KernelReport:
    """Empirical size and Hoelder constants over the sample plan.

    For every pair of plan points, time ``t`` and perturbation ``rho`` a point
    ``z`` at distance ``rho t < t/2`` is drawn in a seeded direction.  The
    x-Hoelder ratio is only meaningful for unsuppressed kernels.
    """
    pts = np.atleast_2d(np.asarray(plan.points, dtype=float))
    times = np.asarray(plan.times, dtype=float)
    pert = np.asarray(plan.perturbations, dtype=float)
    if pts.size == 0 or times.size == 0 or pert.size == 0:
        raise ValueError("sample plan is empty")
    if np.any(pert <= 0) or np.any(pert >= 0.5):
        raise ValueError("perturbations must lie in (0, 1/2) as fractions of t")
    base, mask = _split(spec)
    m, a = base.m, base.alpha
    n = pts.shape[1]
    rng = np.random.default_rng(plan.seed + 1)
    P = len(pts)
    X = np.repeat(pts, P, axis=0)
    Y = np.tile(pts, (P, 1))
    dxy = np.linalg.norm(X - Y, axis=1)
    off = np.ones(len(X), dtype=bool)
    if mask is not None and len(mask):
        off = ~mask.contains_points(X)
    size_c = yh = xh = 0.0
    count = 0
    for t in times:
        k = base.profile(t, dxy) * off
        denom_size = t ** a / (t + dxy) ** (m + a)
        size_c = max(size_c, float(np.max(np.abs(k) / denom_size)))
        for rho in pert:
            u = rng.normal(size=(len(X), n))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            step = rho * t
            Z = Y + step * u
            kz = base.profile(t, np.linalg.norm(X - Z, axis=1)) * off
            hol = step ** a / (t + dxy) ** (m + a)
            yh = max(yh, float(np.max(np.abs(k - kz) / hol)))
            W = X + step * u
            kw = base.profile(t, np.linalg.norm(W - Y, axis=1))
            kb = base.profile(t, dxy)
            xh = max(xh, float(np.max(np.abs(kb - kw) / hol)))
            count += len(X)
    rep = KernelReport(size_c, yh, xh if mask is None else math.nan, count)
    for name, val in (("size", size_c), ("y_holder", yh), ("x_holder", xh)):
        lim = (ceilings or {}).get(name)
        if lim is not None and val > lim:
            rep.violations[name] = val
    return rep


def step_table(jump_at: float = 0.5, t_range=(1e-3, 1e2), d_max: float = 8.0, m: float = 1.0,
               alpha: float = 1.0) -> KernelTable:
    """A standard-family table with a jump in ``d`` at ``jump_at`` (for negative tests)."""
    ts = np.logspace(math.log10(t_range[0]), math.log10(t_range[1]), 41)
    ds = np.concatenate([np.linspace(0, jump_at, 33), np.linspace(jump_at, d_max, 65)])
    T, D = np.meshgrid(ts, ds, indexing="ij")
    v = T ** alpha / (T + D) ** (m + alpha)
    v[:, 33:] *= 0.5
    return KernelTable(ts, ds, v.astype(complex))
