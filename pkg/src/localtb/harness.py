"""Scenarios, hypothesis validation, the end-to-end pipeline and its pass/fail ledger."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._numerics import weak_type_functional
from .estimates import (CheckRow, EstimateConstants, assembly_constant, carleson_sequence_tree, case_battery,
                        dyadic_family_1d, paraproduct_battery, schur_bound_check, search_r, bad_probability_estimate,
                        bad_scale_samples)
from .geometry import Cube, CubeTree, GoodnessParams, grid_seeds, reference_grid, sample_grid
from .kernel import Family, KernelSpec, SuppressedKernel, default_sample_plan, verify_kernel_conditions
from .martingale import ChainEntry, expand, generation_chains, quasi_orthogonality, reconstruct, transit_cubes
from .measure import (BoundedDensity, CellMask, CellMeasure, cells_in_cube, check_doubling_small_boundary,
                      polar_decompose)
from .sqfn import LatticeSF, TimeQuadrature, restricted_operator_norm, size_constant, tail_estimate_check, \
    vertical_sf
from .stopping import (StoppingConfig, StoppingReport, accretivity_stopping, choose_lambda0, construct_big_piece,
                       density_stopping, high_density_exceptional)

KINDS = ("lebesgue-1d", "lebesgue-2d", "cantor-1d", "line-in-plane", "spike-mix")

_KIND_DEFAULTS = {
    "lebesgue-1d": {"h": 1 / 256},
    "lebesgue-2d": {"h": 1 / 16},
    "cantor-1d": {"h": 1 / 256, "depth": 6},
    "line-in-plane": {"h": 1 / 32},
    "spike-mix": {"h": 1 / 1024, "spike": 1 / 128, "nu_spike": 0.0},
}

_COMMON_DEFAULTS = {
    "pert": 0.3,
    "alpha": 1.0,
    "family": "standard",
    "nodes_per_octave": 16,
    "t_min": None,
    "n_grids": 256,
    "s": 1.0,
    "B1": None,
    "B2": None,
    "eps0": None,
    "U": [],
}


class PipelineError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Scenario:
    kind: str
    params: dict
    seed: int
    Q: Cube
    m: float
    mu: CellMeasure
    nu: CellMeasure
    U_mask: CellMask
    cfg: StoppingConfig
    kernel: KernelSpec
    quad: TimeQuadrature
    labels: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Q.n

    @property
    def pitch(self) -> float:
        return self.mu.pitch

    @property
    def scenario_id(self) -> str:
        return f"{self.kind}-h{round(1 / self.pitch)}-seed{self.seed}"

    def spec_record(self) -> dict:
        return {"kind": self.kind, "params": self.params, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.spec_record(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        d = json.loads(text)
        return generate_scenario(d["kind"], d.get("params"), d.get("seed", 0))

    def refined(self) -> "Scenario":
        """Half the pitch, same time quadrature, same seed."""
        p = dict(self.params)
        p["h"] = self.pitch / 2
        p["t_min"] = self.quad.t_min
        return generate_scenario(self.kind, p, self.seed)


def _resolve(kind: str, params: dict | None) -> dict:
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    out = dict(_COMMON_DEFAULTS)
    out.update(_KIND_DEFAULTS[kind])
    for k, v in (params or {}).items():
        if k not in out:
            raise ValueError(f"unknown parameter {k!r} for {kind}")
        out[k] = v
    h = float(out["h"])
    k = math.log2(1 / h) if h > 0 else math.nan
    if not (h > 0 and abs(k - round(k)) < 1e-12 and h <= 1 / 8):
        raise ValueError("h must be a power of two no larger than 1/8")
    if not 0 <= out["pert"] < math.pi / 2:
        raise ValueError("pert must lie in [0, pi/2)")
    if int(out["n_grids"]) < 64:
        raise ValueError("n_grids must be at least 64")
    if kind == "cantor-1d" and not 1 <= int(out["depth"]) <= 12:
        raise ValueError("depth must lie in 1..12")
    if kind == "spike-mix":
        if not 0 < out["spike"] < 1:
            raise ValueError("spike mass must lie in (0, 1)")
        if not 0 <= out["nu_spike"] < 1:
            raise ValueError("nu_spike must lie in [0, 1)")
    if out["t_min"] is not None:
        t = float(out["t_min"])
        kt = math.log2(t) if t > 0 else math.nan
        if not (abs(kt - round(kt)) < 1e-12 and 4 * h <= t < 1):
            raise ValueError("t_min must be a power of two in [4h, 1)")
        out["t_min"] = t
    out["h"] = h
    return out


def _cantor_masses(h: float, depth: int, lo: float, length: float, total: float) -> tuple[np.ndarray, np.ndarray]:
    """Cell masses of the depth-``depth`` middle-thirds approximation on ``[lo, lo+length)``."""
    starts = np.zeros(1)
    for _ in range(depth):
        starts = np.concatenate([starts, starts + 2 * 3.0 ** -(_ + 1)])
    width = 3.0 ** -depth
    a = lo + length * starts
    b = a + length * width
    dens = total / 2 ** depth / (length * width)
    k0, k1 = int(math.floor(lo / h)), int(math.ceil((lo + length) / h))
    cells = np.arange(k0, k1)
    left, right = cells * h, (cells + 1) * h
    over = np.clip(np.minimum(right[:, None], b[None, :]) - np.maximum(left[:, None], a[None, :]), 0, None)
    mass = over.sum(axis=1) * dens
    return cells[:, None], mass


def _phase_field(rng: np.random.Generator, centers: np.ndarray, pert: float) -> np.ndarray:
    """A smooth seeded unimodular field ``exp(i pert phi)`` with ``|phi| <= 1``."""
    n = centers.shape[1]
    phi = np.zeros(len(centers))
    for _ in range(3):
        freq = rng.integers(1, 4, size=n)
        phase = rng.uniform(0, 2 * math.pi)
        phi += rng.uniform(0.5, 1.0) * np.sin(2 * math.pi * centers @ freq + phase)
    top = np.max(np.abs(phi)) if len(phi) else 1.0
    return np.exp(1j * pert * phi / (top if top > 0 else 1.0))


def generate_scenario(kind: str, params: dict | None = None, seed: int = 0) -> Scenario:
    """A deterministic scenario on ``Q = [-1/2, 1/2)^n`` with ``nu_Q = b_Q mu``, ``nu_Q(Q) = mu(Q)``."""
    p = _resolve(kind, params)
    h = p["h"]
    rng = np.random.default_rng(seed)
    n = 2 if kind in ("lebesgue-2d", "line-in-plane") else 1
    Q = Cube((-0.5,) * n, 1.0)
    half = round(0.5 / h)
    m = 1.0
    if kind in ("lebesgue-1d", "spike-mix"):
        coords = np.arange(-half, half)[:, None]
        w = np.full(len(coords), h)
        if kind == "spike-mix":
            j = int(rng.integers(-half // 2, half // 2))
            w[j + half] += p["spike"]
    elif kind == "lebesgue-2d":
        g = np.arange(-half, half)
        coords = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
        w = np.full(len(coords), h * h)
        m = 2.0
    elif kind == "line-in-plane":
        coords = np.stack([np.arange(-half, half), np.zeros(2 * half, dtype=int)], axis=1)
        w = np.full(len(coords), h)
    else:
        m = math.log(2) / math.log(3)
        coords, w = _cantor_masses(h, int(p["depth"]), -0.25, 0.5, 0.5 ** m)
    mu = CellMeasure(h, coords, w, Q)
    b = _phase_field(rng, mu.centers, p["pert"]) if p["pert"] > 0 else np.ones(len(mu), dtype=complex)
    nu_w = b * mu.weights
    nu_w = nu_w * (mu.mass() / np.sum(nu_w))
    if kind == "spike-mix" and p["nu_spike"] > 0:
        j = int(rng.integers(0, len(mu)))
        nu_w = nu_w * (1 - p["nu_spike"])
        nu_w[j] += p["nu_spike"] * mu.mass()
    nu = mu.with_weights(nu_w)
    ratio = nu.total_variation() / abs(mu.mass())
    B1 = p["B1"] if p["B1"] is not None else max(1.0, math.ceil(ratio * 8 - 1e-9) / 8)
    eps0 = p["eps0"] if p["eps0"] is not None else (1 / 32 if ratio <= 1 + 1e-12 else 1 / 64)
    kernel = KernelSpec(m, float(p["alpha"]), Family(p["family"]))
    quad = TimeQuadrature(4 * h if p["t_min"] is None else float(p["t_min"]), Q.side, int(p["nodes_per_octave"]))
    quad.check_pitch(h)
    U = CellMask(h, np.asarray(p["U"], dtype=np.int64).reshape(-1, n))
    B2 = p["B2"]
    if B2 is None:
        V = vertical_field(nu, quad, kernel, mu.coords)
        B2 = math.ceil(weak_type_functional(V, mu.abs_weights * ~U.contains_cells(mu.coords), p["s"])
                       / nu.total_variation() * 8) / 8
    cfg = StoppingConfig(B1=B1, B2=B2, eps0=eps0, s=float(p["s"]))
    return Scenario(kind, p, seed, Q, m, mu, nu, U, cfg, kernel, quad, {"n": n})


def vertical_field(nu: CellMeasure, quad: TimeQuadrature, kernel, dst, suppressed=None) -> np.ndarray:
    op = LatticeSF(nu.pitch, nu.coords, dst, kernel, quad.times, suppressed)
    th = op.theta(nu.weights)
    return np.sqrt(np.einsum("t,tx->x", quad.weights, np.abs(th) ** 2))


# hypothesis validation -----------------------------------------------------------------

@dataclass
class LedgerRow:
    key: str
    ok: bool
    detail: dict

    def as_dict(self) -> dict:
        return {"key": self.key, "pass": bool(self.ok), "detail": _plain(self.detail)}


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in sorted(x.items(), key=lambda kv: str(kv[0]))}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def absolute_continuity_check(mu: CellMeasure, nu: CellMeasure, Q: Cube, eps0: float, B1: float,
                              n_random: int = 64, seed: int = 0) -> dict:
    """``|nu|(A) <= ||nu|| / (32 B1)`` for unions ``A`` with ``mu(A) <= eps0 mu(Q)``.

    The greedy bound fills the budget in decreasing order of ``|nu|/mu`` and
    takes a fraction of the last cell, so it dominates every admissible union.
    """
    cells = np.unique(np.concatenate([mu.coords, nu.coords]), axis=0)
    cells = cells[cells_in_cube(cells, mu.pitch, Q)]
    mw = mu.align(cells).real
    vw = np.abs(nu.align(cells))
    budget = eps0 * mu.cube_mass(Q, absolute=True)
    limit = nu.total_variation() / (32 * B1)
    with np.errstate(divide="ignore", invalid="ignore"):
        key = np.where(mw > 0, vw / np.where(mw > 0, mw, 1.0), np.inf)
    order = np.lexsort((np.arange(len(cells)), -key))
    left = budget
    greedy = 0.0
    for i in order:
        if mw[i] <= left:
            greedy += vw[i]
            left -= mw[i]
        else:
            greedy += vw[i] * left / mw[i]
            break
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_random):
        perm = rng.permutation(len(cells))
        cum = np.cumsum(mw[perm])
        take = perm[cum <= budget]
        worst = max(worst, math.fsum(vw[take]))
    tol = 1e-12 * limit
    return {"limit": limit, "greedy_bound": greedy, "random_max": worst,
            "ok": greedy <= limit + tol and worst <= limit + tol}


def validate_hypotheses(sc: Scenario, Q: Cube | None = None) -> list[LedgerRow]:
    """The hypotheses of the local theorem for one cube, one ledger row each."""
    Q = sc.Q if Q is None else Q
    cfg = sc.cfg
    mu, nu = sc.mu, sc.nu
    muQ = mu.cube_mass(Q, absolute=True)
    nu_tv = nu.total_variation()
    rows = []
    inside = cells_in_cube(nu.coords, nu.pitch, Q)
    rows.append(LedgerRow("support", bool(np.all(inside)), {"cells_outside": int(np.sum(~inside))}))
    nuQ = complex(nu.cube_mass(Q))
    gap = abs(nuQ - muQ)
    rows.append(LedgerRow("normalization", gap <= 1e-12 * max(muQ, 1e-300), {"nu_Q": nuQ, "mu_Q": muQ}))
    rows.append(LedgerRow("total_variation", nu_tv <= cfg.B1 * muQ * (1 + 1e-12),
                          {"norm": nu_tv, "B1_mu_Q": cfg.B1 * muQ}))
    ac = absolute_continuity_check(mu, nu, Q, cfg.eps0, cfg.B1, seed=sc.seed)
    rows.append(LedgerRow("absolute_continuity", ac.pop("ok"), {**ac, "eps0": cfg.eps0}))
    U_mass = sc.U_mask.measure_of(nu.variation())
    rows.append(LedgerRow("exceptional_U", U_mass <= nu_tv / (16 * cfg.B1) * (1 + 1e-12),
                          {"nu_U": U_mass, "limit": nu_tv / (16 * cfg.B1)}))
    cells = mu.coords[cells_in_cube(mu.coords, mu.pitch, Q)]
    quad = sc.quad if sc.quad.t_max <= Q.side * (1 + 1e-12) else sc.quad.truncated(Q.side)
    V = vertical_field(nu, quad, sc.kernel, cells)
    w = mu.align(cells).real * ~sc.U_mask.contains_cells(cells)
    weak = weak_type_functional(V, w, cfg.s)
    rows.append(LedgerRow("weak_testing", weak <= cfg.B2 * nu_tv * (1 + 1e-12),
                          {"functional": weak, "B2_norm": cfg.B2 * nu_tv, "s": cfg.s}))
    beta = 2.0 ** (sc.n + 1)
    c_bdry = 16.0 * sc.n
    lambdas = [2.0 ** -k for k in range(0, int(round(math.log2(Q.side / mu.pitch))) + 1)]
    dr = check_doubling_small_boundary(mu, Q, beta, c_bdry, lambdas)
    rows.append(LedgerRow("doubling", dr.doubling_ok, {"mu_Q": dr.mu_Q, "mu_2Q": dr.mu_2Q, "beta": beta}))
    rows.append(LedgerRow("small_boundary", dr.small_boundary_ok, {"worst_ratio": dr.worst_ratio, "C1": c_bdry}))
    return rows


def restrict_scenario(sc: Scenario, Q: Cube) -> Scenario:
    """Test data for a dyadic subcube: ``nu_Q`` is ``nu`` on ``Q`` rescaled so ``nu_Q(Q) = mu(Q)``."""
    inside = cells_in_cube(sc.nu.coords, sc.pitch, Q)
    nu = sc.nu.restrict(inside)
    total = complex(nu.mass())
    muQ = sc.mu.cube_mass(Q, absolute=True)
    if abs(total) == 0 or muQ == 0:
        raise ValueError("subcube carries no mass")
    nu = nu.scaled(muQ / total)
    ratio = nu.total_variation() / muQ
    B1 = max(1.0, math.ceil(ratio * 8 - 1e-9) / 8)
    quad = sc.quad.truncated(Q.side) if sc.quad.t_max > Q.side else sc.quad
    muQc = sc.mu.coords[cells_in_cube(sc.mu.coords, sc.pitch, Q)]
    V = vertical_field(nu, quad, sc.kernel, muQc)
    B2 = math.ceil(weak_type_functional(V, sc.mu.align(muQc).real, sc.cfg.s) / nu.total_variation() * 8) / 8
    cfg = replace(sc.cfg, B1=B1, B2=B2, c_acc=None, delta=None, delta0=None)
    return replace(sc, Q=Q, nu=nu, U_mask=CellMask.empty(sc.pitch, sc.n), cfg=cfg, quad=quad,
                   labels={**sc.labels, "subcube": list(Q.corner) + [Q.side]})


def subcube_family(sc: Scenario, level: int) -> list[tuple[Cube, bool]]:
    """Dyadic subcubes of the base cube at ``level`` with their doubling and small-boundary status."""
    side = sc.Q.side / 2 ** level
    if side < 8 * sc.pitch:
        raise ValueError("subcubes must span at least 8 cells")
    k = 2 ** level
    beta, c_bdry = 2.0 ** (sc.n + 1), 16.0 * sc.n
    lambdas = [2.0 ** -j for j in range(0, int(round(math.log2(side / sc.pitch))) + 1)]
    out = []
    for idx in np.ndindex(*([k] * sc.n)):
        Q = Cube(tuple(lo + i * side for lo, i in zip(sc.Q.corner, idx)), side)
        if sc.mu.cube_mass(Q, absolute=True) == 0:
            continue
        dr = check_doubling_small_boundary(sc.mu, Q, beta, c_bdry, lambdas)
        out.append((Q, bool(dr.doubling_ok and dr.small_boundary_ok)))
    return out


# pipeline ------------------------------------------------------------------------------

CRITERIA = {
    1: "stopping budgets",
    2: "sandwich",
    3: "big piece",
    4: "suppression",
    5: "martingale",
    6: "quadrature",
    7: "tail",
    8: "bad cubes",
    9: "schur and carleson",
    10: "case bounds",
    11: "necessity",
    12: "determinism",
}


@dataclass
class RunReport:
    scenario_id: str
    kernel_constants: dict
    stopping: StoppingReport
    martingale: dict
    estimates: list[CheckRow]
    restricted_norm: dict
    hypotheses: list[LedgerRow]
    ledger: dict[int, LedgerRow]
    extras: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.ledger.values())

    def to_dict(self, include_ledger: bool = True) -> dict:
        out = {
            "scenario": self.scenario_id,
            "kernel_constants": _plain(self.kernel_constants),
            "stopping": self.stopping.to_dict(),
            "martingale": _plain(self.martingale),
            "estimates": [_plain(r.as_dict()) for r in self.estimates],
            "restricted_norm": _plain(self.restricted_norm),
            "hypotheses": [r.as_dict() for r in self.hypotheses],
            "extras": _plain(self.extras),
        }
        if include_ledger:
            out["ledger"] = {str(k): {"criterion": CRITERIA[k], **self.ledger[k].as_dict()} for k in sorted(self.ledger)}
        return out

    def to_json(self, include_ledger: bool = True) -> str:
        return json.dumps(self.to_dict(include_ledger), sort_keys=True, indent=1)

    def estimates_csv(self) -> str:
        from .estimates import rows_to_csv
        return rows_to_csv(self.estimates, self.scenario_id)


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise PipelineError(name, exc) from exc
        return inner
    return wrap


def _fsum(x) -> float:
    return math.fsum(np.asarray(x, dtype=float).tolist())


@dataclass
class _State:
    """Intermediate objects of one pipeline run."""

    sigma: CellMeasure
    b: BoundedDensity
    cells: np.ndarray
    sQ: float
    grids: list
    T_masks: list
    H1: CellMask
    H2: CellMask
    H: CellMask
    phi: BoundedDensity
    p0: float
    lambda0: float
    C1: float
    S0: CellMask
    G: CellMask
    prob: np.ndarray
    cfg: StoppingConfig
    quadQ: TimeQuadrature
    F: tuple


@_stage("stopping")
def _stopping_stage(sc: Scenario, Q: Cube, n_grids: int) -> _State:
    cfg = sc.cfg
    sigma, b = polar_decompose(sc.nu)
    cells = np.unique(np.concatenate([sc.mu.coords, sigma.coords]), axis=0)
    cells = cells[cells_in_cube(cells, sc.pitch, Q)]
    sQ = sigma.total_variation()
    grids, T_masks = [], []
    for s in grid_seeds(sc.seed, n_grids):
        g = sample_grid(Q, s, pitch=sc.pitch)
        grids.append(g)
        T_masks.append(accretivity_stopping(sigma, b, g, cfg.c_acc, cells)[1])
    grid0 = reference_grid(Q, pitch=sc.pitch)
    F1, F2, H1, phi = density_stopping(sc.mu, sigma, grid0, cfg, Q)
    p0, H2 = high_density_exceptional(sc.nu, sc.mu, sc.m, cfg.eps0, Q)
    H = H1.union(H2)
    quadQ = sc.quad if sc.quad.t_max <= Q.side * (1 + 1e-12) else sc.quad.truncated(Q.side)
    V = vertical_field(sigma.with_weights(b.values * sigma.abs_weights), quadQ, sc.kernel, sigma.coords)
    off_H = ~H.contains_cells(sigma.coords)
    C1 = max(cfg.C1_weak, weak_type_functional(V[off_H], sigma.abs_weights[off_H], cfg.s) / sQ)
    cfg = cfg.replace(C1_weak=C1)
    lam0 = choose_lambda0(cfg)
    S0 = CellMask.from_bool(sc.pitch, sigma.coords, (V > lam0) & cells_in_cube(sigma.coords, sc.pitch, Q))
    bp = construct_big_piece(sigma, H, S0, Q, n_grids, sc.seed, cfg, b, cells, T_masks)
    return _State(sigma, b, cells, sQ, grids, T_masks, H1, H2, H, phi, p0, lam0, C1, S0, bp.G_mask,
                  bp.membership_prob, cfg, quadQ, (F1, F2))


def _crit1(st: _State) -> LedgerRow:
    cfg, sg, sQ = st.cfg, st.sigma, st.sQ
    eta = cfg.eta
    sH1 = st.H1.measure_of(sg)
    sH = st.H.measure_of(sg)
    worst_T = worst_HT = 0.0
    for T in st.T_masks:
        worst_T = max(worst_T, T.measure_of(sg))
        worst_HT = max(worst_HT, T.union(st.H).measure_of(sg))
    ok = (worst_T <= (1 - eta) * sQ and sH1 <= 2 * cfg.delta * sQ and sH <= eta / 2 * sQ
          and worst_HT <= (1 - eta / 2) * sQ)
    return LedgerRow("stopping budgets", ok, {
        "sigma_Q": sQ, "max_sigma_T": worst_T, "T_limit": (1 - eta) * sQ, "sigma_H1": sH1,
        "H1_limit": 2 * cfg.delta * sQ, "sigma_H": sH, "H_limit": eta / 2 * sQ, "max_sigma_HT": worst_HT,
        "HT_limit": (1 - eta / 2) * sQ})


def _crit2(sc: Scenario, st: _State, n_unions: int = 64) -> LedgerRow:
    cfg = st.cfg
    cells = st.cells[~st.H1.contains_cells(st.cells)]
    mw = sc.mu.align(cells).real
    sw = st.sigma.align(cells).real
    rng = np.random.default_rng(sc.seed + 2)
    worst_lo = worst_hi = 0.0
    ok = True
    for _ in range(n_unions):
        pick = rng.random(len(cells)) < rng.uniform(0.05, 1.0)
        mA, sA = _fsum(mw[pick]), _fsum(sw[pick])
        ok &= cfg.delta * mA <= sA <= cfg.B1 / cfg.eps0 * mA
        if mA > 0:
            worst_lo = max(worst_lo, cfg.delta * mA / max(sA, 1e-300))
            worst_hi = max(worst_hi, sA / (cfg.B1 / cfg.eps0 * mA))
    return LedgerRow("sandwich", bool(ok), {"unions": n_unions, "max_lower_ratio": worst_lo,
                                            "max_upper_ratio": worst_hi})


def _crit3(sc: Scenario, st: _State) -> LedgerRow:
    cfg, sg, sQ = st.cfg, st.sigma, st.sQ
    d1 = cfg.delta1
    sG = st.G.measure_of(sg)
    masses = []
    fixed = st.H.union(st.S0)
    for T in st.T_masks:
        masses.append(sQ - T.union(fixed).measure_of(sg))
    se = float(np.std(masses) / math.sqrt(len(masses)))
    target = (1 - d1) / (1 + d1) * sQ - 3 * se
    disjoint = len(st.G.intersect(st.H)) == 0
    mQ = sc.mu.cube_mass(sc.Q, absolute=True)
    mG = st.G.measure_of(sc.mu)
    c = cfg.delta * (1 - d1) / (1 + d1)
    ok = sG >= target and disjoint and mG >= c * mQ
    return LedgerRow("big piece", ok, {"sigma_G": sG, "sigma_target": target, "standard_error": se,
                                       "G_meets_H": not disjoint, "mu_G": mG, "mu_target": c * mQ,
                                       "mu_G_fraction": mG / mQ})


def _crit4(sc: Scenario, st: _State) -> LedgerRow:
    sg, b = st.sigma, st.b
    nu_b = sg.with_weights(b.values * sg.abs_weights)
    supp = st.S0.contains_cells(sg.coords)
    V = vertical_field(nu_b, st.quadQ, sc.kernel, sg.coords)
    Vt = vertical_field(nu_b, st.quadQ, SuppressedKernel(sc.kernel, st.S0), sg.coords)
    same_off = bool(np.array_equal(V[~supp], Vt[~supp]))
    bounded = bool(np.all(Vt <= st.lambda0))
    s0_off_H = st.S0.minus(st.H).measure_of(sg)
    limit = st.C1 / st.lambda0 ** st.cfg.s * st.sQ
    ok = same_off and bounded and s0_off_H <= limit
    return LedgerRow("suppression", ok, {"identical_off_S0": same_off, "max_Vtilde_b": float(np.max(Vt)),
                                         "lambda0": st.lambda0, "C1": st.C1, "sigma_S0_off_H": s0_off_H,
                                         "limit": limit, "S0_cells": len(st.S0)})


@_stage("martingale")
def _martingale(sc: Scenario, st: _State, grid_index: int = 0) -> tuple[dict, object, object]:
    g = st.grids[grid_index]
    excluded = st.H.union(st.T_masks[grid_index])
    tr = transit_cubes(g, st.sigma, excluded)
    rng = np.random.default_rng(sc.seed + 3)
    f = BoundedDensity(st.sigma.coords, np.exp(2j * math.pi * rng.random(len(st.sigma))), 1.0)
    exp = expand(f, st.b, st.sigma, g, tr)
    rec = reconstruct(exp)
    rel = float(np.max(np.abs(rec - f.values)) / np.max(np.abs(f.values)))
    fnorm = math.sqrt(f.l2_norm_sq(st.sigma))
    tree = tr.tree
    ints = np.abs(exp.delta_integrals())
    nonroot = tree.node_depth > 0
    mean_zero = float(np.max(ints[nonroot])) if np.any(nonroot) else 0.0
    qo = quasi_orthogonality(st.b, st.sigma, tr, seed=sc.seed)
    out = {"reconstruction_rel_error": rel, "mean_zero_max": mean_zero, "f_norm": fnorm,
           "quasi_orthogonality": qo["operator_norm_sq"], "quasi_probe_max": qo["probe_max"],
           "quasi_gap": qo["gap"], "quasi_limit": 16 * st.cfg.C_b ** 2 / st.cfg.c_acc ** 2,
           "transit_nodes": int(np.sum(tr.is_transit)), "tree_depth": int(tree.depth)}
    return out, exp, f


def _battery(sc: Scenario, st: _State, exp, r_battery: int | None, max_cubes: int, grid_index: int = 0):
    g = st.grids[grid_index]
    grid0 = reference_grid(sc.Q, pitch=sc.pitch)
    excluded = st.H.union(st.T_masks[grid_index])
    excluded_cells = excluded.contains_cells(st.sigma.coords)
    tw = exp.tree
    tree0 = CubeTree(grid0, st.sigma.coords, min_depth=tw.depth)
    tr0 = tree0.any_cell(~excluded_cells)
    pick = np.flatnonzero(tr0 & (tree0.node_depth >= 1) & (tree0.node_depth <= tw.depth))
    reference = [ChainEntry(tree0.cube(i), tree0.cells(i), {}, int(tree0.node_depth[i])) for i in pick]
    candidates = [r_battery] if r_battery is not None else list(range(4, max(tw.depth, 5)))
    for r in candidates:
        params = GoodnessParams.from_exponents(sc.m, sc.kernel.alpha, r)
        chains = generation_chains(exp, grid0, params, excluded, tree0)
        if chains:
            break
    kr = verify_kernel_conditions(sc.kernel, default_sample_plan(sc.n, seed=sc.seed))
    C_size = size_constant(sc.kernel)
    consts = EstimateConstants.build(kr, st.p0, st.cfg.c_acc, st.cfg.C_b, sc.m, sc.kernel.alpha, sc.n, C_size)
    kern = SuppressedKernel(sc.kernel, st.S0)
    rows = case_battery(exp, reference, kern, consts, params, max_cubes=max_cubes)
    para, min_dist = paraproduct_battery(exp, chains, kern, consts, st.b, max_cubes=max_cubes)
    op = LatticeSF(sc.pitch, st.sigma.coords, st.sigma.coords, kern, st.quadQ.times)
    th = op.theta(st.b.values * st.sigma.abs_weights)
    carl = {}
    for rc in sorted({1, params.r_param}):
        carl[rc] = carleson_sequence_tree(st.sigma, np.abs(th) ** 2, st.quadQ.weights, grid0, g, excluded_cells,
                                          st.quadQ.times, params, r_map=rc)
    asm = assembly_constant(st.sigma, kern, st.quadQ.times, st.quadQ.weights, grid0, g, excluded_cells, params,
                            seed=sc.seed)
    info = {"r_battery": params.r_param, "gamma": params.gamma, "chains": len(chains),
            "reference_cubes": len(reference), "carleson_norm": max(carl.values()),
            "carleson_by_r": {str(k): v for k, v in carl.items()}, "carleson_limit": 4 * st.lambda0 ** 2,
            "assembly_constant": asm.value, "assembly_gap": asm.gap, "min_boundary_distance_ratio": min_dist,
            "constants": {"C_size": consts.C_size, "C_yhol": consts.C_yhol, "C_growth": consts.C_growth,
                          "case12": consts.case12, "paraproduct": consts.paraproduct}}
    return list(rows.values()) + [para], info, kr


def _bad_cubes(sc: Scenario, st: _State, n_grids: int) -> LedgerRow:
    gamma = GoodnessParams.from_exponents(sc.m, sc.kernel.alpha, 4).gamma
    side = 8 * sc.pitch
    R = Cube(tuple([0.0] * sc.n), side)
    tau = st.cfg.tau
    r_found, table = search_r(R, sc.Q, gamma, tau, n_grids, sc.seed, sc.pitch)
    ks = bad_scale_samples(R, sc.Q, gamma, n_grids, sc.seed, sc.pitch)
    mono = [bad_probability_estimate(R, sc.Q, GoodnessParams(r, gamma), n_grids, sc.seed, sc.pitch, ks)
            for r in (4, 8, 12)]
    monotone = all(b.value <= a.value + 2 * math.hypot(a.standard_error, b.standard_error)
                   for a, b in zip(mono, mono[1:]))
    at = table[r_found] if r_found is not None else None
    ok = at is not None and at.value <= tau / 2 + 2 * at.standard_error and monotone
    return LedgerRow("bad cubes", ok, {
        "R_side": side, "tau": tau, "searched_r": r_found, "estimate": at.value if at else None,
        "standard_error": at.standard_error if at else None, "monotone": monotone,
        "r_table": {str(r): e.value for r, e in table.items()}})


def schur_depth_ratio(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for depth in (5, 10):
        cubes, sig = dyadic_family_1d(depth)
        x = rng.random(len(cubes))
        y = rng.random(len(cubes))
        res = schur_bound_check(cubes, cubes, sig, sig, x, y, 1.0, 1.0)
        out[depth] = {"ratio": res.ratio, "operator_norm": res.operator_norm}
    return out


def beta_oracle() -> float:
    """``V`` of a unit point mass at distance 1 for the standard kernel with ``m = alpha = 1``."""
    k = KernelSpec(1.0, 1.0)
    one = CellMeasure(1e-4, [[-1]], [1.0], Cube((-2.0,), 4.0))
    return vertical_sf(one, [1.0], TimeQuadrature(1e-3, 1e3, 16), k).value


def tail_oracle() -> tuple[float, float]:
    k = KernelSpec(1.0, 1.0)
    one = CellMeasure(1e-4, [[-1]], [1.0], Cube((-2.0,), 4.0))
    return tail_estimate_check(BoundedDensity.on(one, 1.0), one, Cube((-0.5,), 1.0), k)


def run_pipeline(sc: Scenario, Q: Cube | None = None, *, n_grids: int | None = None, r_battery: int | None = None,
                 max_cubes: int = 48, refine: bool = True, check_determinism: bool = True,
                 override: bool = False) -> RunReport:
    """Stopping constructions, big piece, operator norms and the estimate battery, with the ledger."""
    Q = sc.Q if Q is None else Q
    n_grids = int(sc.params["n_grids"] if n_grids is None else n_grids)
    hyp = validate_hypotheses(sc, Q)
    if not override and not all(r.ok for r in hyp):
        bad = [r.key for r in hyp if not r.ok]
        raise PipelineError("validate", ValueError(f"hypotheses fail: {', '.join(bad)}"))
    st = _stopping_stage(sc, Q, n_grids)
    ledger: dict[int, LedgerRow] = {1: _crit1(st), 2: _crit2(sc, st), 3: _crit3(sc, st), 4: _crit4(sc, st)}
    mart, exp, f = _martingale(sc, st)
    est_rows, bat, kr = _stage("estimates")(_battery)(sc, st, exp, r_battery, max_cubes)
    norms = _stage("operator norms")(_norms)(sc, st)
    refined = None
    if refine:
        refined = run_pipeline(sc.refined(), n_grids=n_grids, r_battery=r_battery, max_cubes=max_cubes,
                               refine=False, check_determinism=False, override=override)
    q = mart["quasi_orthogonality"]
    crit5 = {**mart}
    ok5 = (mart["reconstruction_rel_error"] <= 1e-10 and mart["mean_zero_max"] <= 1e-10 * mart["f_norm"]
           and q <= mart["quasi_limit"])
    if refined is not None:
        qr = refined.martingale["quasi_orthogonality"]
        crit5["refined_quasi_orthogonality"] = qr
        ok5 = ok5 and abs(qr / q - 1) <= 0.25
    ledger[5] = LedgerRow("martingale", ok5, crit5)
    V16 = vertical_field(st.sigma.with_weights(st.b.values * st.sigma.abs_weights), st.quadQ, sc.kernel,
                         st.sigma.coords)
    V32 = vertical_field(st.sigma.with_weights(st.b.values * st.sigma.abs_weights), st.quadQ.refined(), sc.kernel,
                         st.sigma.coords)
    qchange = float(np.max(np.abs(V32 - V16) / V32))
    beta = beta_oracle()
    ledger[6] = LedgerRow("quadrature", qchange < 0.01 and abs(beta / math.sqrt(1 / 6) - 1) <= 0.02,
                          {"max_relative_change": qchange, "beta_oracle": beta, "beta_exact": math.sqrt(1 / 6)})
    lhs, rhs = tail_estimate_check(st.b, st.sigma, Q, sc.kernel, sc.quad.nodes_per_octave)
    olhs, orhs = tail_oracle()
    ledger[7] = LedgerRow("tail", lhs <= rhs and olhs <= orhs and abs(olhs / 0.5 - 1) <= 0.02,
                          {"lhs": lhs, "rhs": rhs, "oracle_lhs": olhs, "oracle_rhs": orhs})
    ledger[8] = _bad_cubes(sc, st, n_grids)
    schur = schur_depth_ratio(sc.seed)
    ok9 = (abs(schur[10]["ratio"]) <= 2 * abs(schur[5]["ratio"])
           and schur[10]["operator_norm"] <= 2 * schur[5]["operator_norm"]
           and bat["carleson_norm"] <= bat["carleson_limit"])
    ledger[9] = LedgerRow("schur and carleson", ok9, {"schur": schur, "carleson_norm": bat["carleson_norm"],
                                                      "carleson_limit": bat["carleson_limit"]})
    ok10 = all(r.ok for r in est_rows)
    d10 = {"rows": {r.name: r.as_dict() for r in est_rows}, "assembly_constant": bat["assembly_constant"],
           "min_boundary_distance_ratio": bat["min_boundary_distance_ratio"]}
    if refined is not None:
        ar = refined.extras["battery"]["assembly_constant"]
        d10["refined_assembly_constant"] = ar
        ok10 = ok10 and abs(ar / bat["assembly_constant"] - 1) <= 0.5
    ledger[10] = LedgerRow("case bounds", ok10, d10)
    K = norms["full_norm_mu"]
    weak = norms["weak_functional"]
    ledger[11] = LedgerRow("necessity", weak <= 8 * K * sc.nu.total_variation(),
                           {"K": K, "weak_functional": weak, "limit": 8 * K * sc.nu.total_variation()})
    constants = {"kernel": sc.kernel.describe(), "size": kr.size_constant, "y_holder": kr.y_holder,
                 "x_holder": kr.x_holder, "samples": kr.samples}
    stop = StoppingReport(
        sc.pitch, sc.n, {**st.cfg.as_dict(), "eta": st.cfg.eta, "delta1": st.cfg.delta1, "tau": st.cfg.tau,
                         "lambda0": st.lambda0, "p0": st.p0, "m": sc.m},
        {"sigma_Q": st.sQ, "mu_Q": sc.mu.cube_mass(Q, absolute=True), "sigma_H1": st.H1.measure_of(st.sigma),
         "sigma_H2": st.H2.measure_of(st.sigma), "sigma_H": st.H.measure_of(st.sigma),
         "sigma_S0": st.S0.measure_of(st.sigma), "sigma_G": st.G.measure_of(st.sigma),
         "mu_G": st.G.measure_of(sc.mu), "F1_cubes": len(st.F[0]), "F2_cubes": len(st.F[1])},
        {"H1": st.H1, "H2": st.H2, "S0": st.S0, "G": st.G}, membership_prob=st.prob, prob_cells=st.cells)
    report = RunReport(sc.scenario_id, constants, stop, mart, est_rows, norms, hyp, ledger,
                       {"battery": bat, "quadrature_change": qchange})
    if check_determinism:
        again = run_pipeline(sc, Q, n_grids=n_grids, r_battery=r_battery, max_cubes=max_cubes, refine=refine,
                             check_determinism=False, override=override)
        same = again.to_json(include_ledger=False) == report.to_json(include_ledger=False)
        ledger[12] = LedgerRow("determinism", same, {"identical": same})
    else:
        ledger[12] = LedgerRow("determinism", True, {"identical": None, "checked": False})
    return report


def _norms(sc: Scenario, st: _State) -> dict:
    quad = st.quadQ
    out = {}
    if len(st.G):
        out["G_sigma"] = restricted_operator_norm(st.sigma, st.G, sc.Q, quad, sc.kernel, seed=sc.seed).value
        muQ = sc.mu.restrict_cube(sc.Q)
        out["G_mu"] = restricted_operator_norm(muQ, st.G, sc.Q, quad, sc.kernel, seed=sc.seed).value
    else:
        out["G_sigma"] = out["G_mu"] = 0.0
    muQ = sc.mu.restrict_cube(sc.Q)
    full = restricted_operator_norm(muQ, np.ones(len(muQ), dtype=bool), sc.Q, quad, sc.kernel, seed=sc.seed)
    out["full_norm_mu"] = full.value
    V = vertical_field(sc.nu, quad, sc.kernel, muQ.coords)
    out["weak_functional"] = weak_type_functional(V, muQ.abs_weights, 1.0)
    return out
