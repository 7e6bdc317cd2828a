"""State grids, control meshes and per-time-level coefficient tables for the HJB solvers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..models import AgentSpec, MarketModel, TimeGrid, lookup


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("axis needs at least one point")
        if self.n > 1 and not self.hi > self.lo:
            raise ValueError("axis needs hi > lo")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n - 1) if self.n > 1 else 1.0

    def points(self) -> np.ndarray:
        if self.n == 1:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, self.n)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular (w, x, y) box plus the time stepping controls of the explicit sweep.

    ``n_t`` is the minimum number of backward steps; the solver refines it until the
    CFL bound holds, failing once more than ``n_t * max_refine`` steps would be needed.
    """

    w: Axis
    x: Axis
    y: Axis
    n_t: int = 32
    cfl: float = 0.9
    max_refine: int = 64

    def __post_init__(self):
        for name in ("w", "x", "y"):
            ax = getattr(self, name)
            if isinstance(ax, (tuple, list)):
                object.__setattr__(self, name, Axis(*ax))
        if self.y.lo != 0.0:
            raise ValueError("y axis must start at 0")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl safety factor must be in (0, 1]")

    def check_full(self, S: float):
        for name in ("w", "x", "y"):
            if getattr(self, name).n < 3:
                raise ValueError(f"{name} axis needs at least 3 points")
        if self.y.hi < S:
            raise ValueError("y axis must cover the risk share S")

    @property
    def shape(self):
        return (self.w.n, self.x.n, self.y.n)


@dataclass(frozen=True)
class ControlMesh:
    """Finite search sets for the contract controls.

    gamma_1 = m * g1(t, w) and gamma_2 = m * s(t, w) for multipliers m, where
    s = sigma_P + sigma_A is the residual volatility and g1 the price-exposure scale
    sigma0(t) e^w E max(remaining-time factor). Both are clipped to ``gamma_cap``.
    zeta_1 is restricted to k * sigma0 * dy / dw for |k| <= zeta1_steps so that the
    joint (w, y) noise lands on lattice points; zeta_2 = m * zeta_max.
    """

    u_levels: tuple
    gamma1_mult: tuple = tuple(np.linspace(-1.0, 1.0, 7))
    gamma2_mult: tuple = tuple(np.linspace(0.0, 1.5, 7))
    zeta1_steps: int = 1
    zeta2_mult: tuple = (-1.0, 0.0, 1.0)
    gamma_cap: tuple = (np.inf, np.inf)
    zeta_max: float = 0.0

    def __post_init__(self):
        for name in ("u_levels", "gamma1_mult", "gamma2_mult", "zeta2_mult"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "gamma_cap", tuple(float(v) for v in self.gamma_cap))
        if not self.u_levels:
            raise ValueError("control set must be non-empty")
        for name in ("gamma1_mult", "gamma2_mult", "zeta2_mult"):
            if 0.0 not in getattr(self, name):
                raise ValueError(f"{name} must contain 0 so the zero-budget control set is non-empty")
        if self.zeta1_steps < 0 or self.zeta_max < 0:
            raise ValueError("zeta bounds must be non-negative")

    @classmethod
    def zero(cls, u_levels) -> "ControlMesh":
        return cls(u_levels=u_levels, gamma1_mult=(0.0,), gamma2_mult=(0.0,), zeta1_steps=0,
                   zeta2_mult=(0.0,))

    @property
    def size(self) -> int:
        return (len(self.u_levels) * len(self.gamma1_mult) * len(self.gamma2_mult)
                * (2 * self.zeta1_steps + 1) * len(self.zeta2_mult))

    def zero_indices(self):
        return (self.gamma1_mult.index(0.0), self.gamma2_mult.index(0.0), self.zeta2_mult.index(0.0))


# -- defaults ---------------------------------------------------------------------


def _window_samples(seq, tg: TimeGrid, n: int = 512):
    t = tg.t0 + (np.arange(n) + 0.5) * tg.horizon / n
    return np.asarray(lookup(seq, t, tg.t0, tg.t1))


def default_grid(a: AgentSpec, m: MarketModel, tg: TimeGrid, *, n_w: int = 15, n_x: int = 49,
                 n_y: int = 11, n_t: int = 32) -> GridSpec:
    nu = _window_samples(m.nu, tg)
    sig_max = float(np.max(m.sigma0))
    if sig_max > 0:
        reach = 1.0 / math.sqrt(2 * m.r0) if m.r0 > 0 else math.sqrt(tg.horizon)
        half = 5.0 * sig_max * min(reach, math.sqrt(tg.horizon))
    else:
        half = 0.25
    w_lo = min(nu.min(), m.w0) - half
    w_hi = max(nu.max(), m.w0) + half
    theta_out = _window_samples(a.etp.theta_out, tg)
    x_lo = min(a.comfort.theta_lo - 5.0, a.etp.x0 - 1.0)
    x_hi = max(theta_out.max() + 2.0, a.etp.x0 + 1.0)
    S = a.terms.S
    y_hi = 1.5 * S if S > 0 else 1.0
    return GridSpec(Axis(w_lo, w_hi, n_w), Axis(x_lo, x_hi, n_x), Axis(0.0, y_hi, n_y), n_t=n_t)


def default_mesh(a: AgentSpec, m: MarketModel, tg: TimeGrid, gs: GridSpec, **overrides) -> ControlMesh:
    """Mesh with caps at four times the largest scale seen along the mean log-price.

    Each gamma component is further capped at 2 sqrt(y_max / T): a larger loading
    would spend the whole budget within a quarter of the window, and leaving it in
    would only shrink the stable time step.
    """
    times = tg.t0 + (np.arange(512) + 0.5) * tg.horizon / 512
    nu = np.asarray(lookup(m.nu, times, tg.t0, tg.t1))
    g1 = gamma1_scale(times, nu, a, m, tg)
    s = residual_volatility(times, nu, a, tg)
    budget = 2.0 * math.sqrt(gs.y.hi / tg.horizon)
    cap = (min(4.0 * float(np.max(np.abs(g1))), budget), min(4.0 * float(np.max(np.abs(s))), budget))
    zeta_max = gs.y.hi / math.sqrt(tg.horizon) if a.terms.S > 0 else 0.0
    kw = dict(u_levels=a.control_set, gamma_cap=cap, zeta_max=zeta_max)
    kw.update(overrides)
    return ControlMesh(**kw)


# -- coefficient helpers shared by solver, policy and simulator -------------------


def exposure_bound(a: AgentSpec, m: MarketModel, tg: TimeGrid) -> float:
    load = _window_samples(a.load_forecast, tg)
    p = _window_samples(m.p_alloc, tg)
    return float(max(np.max(np.abs(load + u - p)) for u in a.control_set))


def remaining_factor(t, m: MarketModel, tg: TimeGrid):
    tau = np.maximum(tg.t1 - np.asarray(t, dtype=float), 0.0)
    if m.r0 > 0:
        return -np.expm1(-m.r0 * tau) / m.r0
    return tau


def gamma1_scale(t, w, a: AgentSpec, m: MarketModel, tg: TimeGrid):
    """Scale of the price-noise loading: sensitivity of remaining cost to a log-price shock."""
    sig0 = lookup(m.sigma0, t, tg.t0, tg.t1)
    return sig0 * np.exp(w) * exposure_bound(a, m, tg) * remaining_factor(t, m, tg)


def residual_volatility(t, w, a: AgentSpec, tg: TimeGrid):
    """sigma_P + sigma_A = (mu - e^w) sigma~ - mu sigma~."""
    mu = lookup(a.tariff, t, tg.t0, tg.t1)
    sig = lookup(a.load_sigma, t, tg.t0, tg.t1)
    return (mu - np.exp(w)) * sig - mu * sig


@dataclass
class LevelParams:
    """Per-time-level scalars consumed by the numerical kernel (one row per level)."""

    t: np.ndarray
    nu: np.ndarray
    sigma0: np.ndarray
    load: np.ndarray
    tariff: np.ndarray
    p_alloc: np.ndarray
    load_sigma: np.ndarray
    theta_out: np.ndarray
    g1_fac: np.ndarray
    zeta_r: np.ndarray
    k_max: np.ndarray
    zeta2_on: np.ndarray
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, times, a: AgentSpec, m: MarketModel, tg: TimeGrid, gs: GridSpec,
              mesh: ControlMesh) -> "LevelParams":
        t = np.asarray(times, dtype=float)

        def L(seq):
            return np.asarray(lookup(seq, t, tg.t0, tg.t1), dtype=float) * np.ones_like(t)

        sig0 = L(m.sigma0)
        g1_fac = sig0 * exposure_bound(a, m, tg) * remaining_factor(t, m, tg) * np.ones_like(t)
        zeta_r = sig0 * gs.y.step / gs.w.step if gs.w.n > 1 else np.zeros_like(t)
        k_max = np.zeros(t.size, dtype=np.int64)
        for n in range(t.size):
            if zeta_r[n] > 0 and mesh.zeta1_steps > 0:
                k_max[n] = min(mesh.zeta1_steps, int(math.floor(mesh.zeta_max / zeta_r[n] + 1e-12)))
        sig_t = L(a.load_sigma)
        return cls(t=t, nu=L(m.nu), sigma0=sig0, load=L(a.load_forecast), tariff=L(a.tariff),
                   p_alloc=L(m.p_alloc), load_sigma=sig_t, theta_out=L(a.etp.theta_out),
                   g1_fac=g1_fac, zeta_r=zeta_r, k_max=k_max,
                   zeta2_on=(sig_t > 0).astype(np.int64))
