"""Domain types and the scalar model functions of the direct load control contract.

Units throughout: prices in $/kWh, power in kW, temperatures in degC, time in hours,
so running payoffs are $/h and integrate to $.

Every time-varying input is a piecewise-constant sequence. A sequence of length L
splits the contract window [t0, t1] into L equal cells; a scalar is a length-1
sequence. Sequences therefore need not share the simulation step of the TimeGrid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np


def as_sequence(values) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float)).copy()
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("time-varying inputs must be a scalar or a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("time-varying inputs must be finite")
    arr.setflags(write=False)
    return arr


def cell_index(n_cells: int, t, t0: float, t1: float):
    """Index of the piecewise-constant cell containing ``t`` (vectorised)."""
    pos = (np.asarray(t, dtype=float) - t0) * (n_cells / (t1 - t0))
    idx = np.floor(pos + 1e-9).astype(np.int64)
    return np.clip(idx, 0, n_cells - 1)


def lookup(seq: np.ndarray, t, t0: float, t1: float):
    out = seq[cell_index(seq.size, t, t0, t1)]
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    dt: float

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("TimeGrid needs t1 > t0")
        if not self.dt > 0:
            raise ValueError("TimeGrid needs dt > 0")
        n = (self.t1 - self.t0) / self.dt
        if abs(n - round(n)) > 1e-6:
            raise ValueError("dt must divide the contract window evenly")

    @property
    def n_steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt))

    @property
    def horizon(self) -> float:
        return self.t1 - self.t0

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def with_dt(self, dt: float) -> "TimeGrid":
        return replace(self, dt=dt)


def _seq_field():
    return field(default_factory=lambda: as_sequence(0.0))


@dataclass(frozen=True, eq=False)
class MarketModel:
    """Log-price Ornstein-Uhlenbeck model dw = r0 (nu(t) - w) dt + sigma0(t) dW0.

    ``p_alloc`` is the day-ahead power allocated to the agent being designed for.
    """

    r0: float
    nu: np.ndarray
    sigma0: np.ndarray
    lambda0: float
    p_alloc: np.ndarray = _seq_field()

    def __post_init__(self):
        for name in ("nu", "sigma0", "p_alloc"):
            object.__setattr__(self, name, as_sequence(getattr(self, name)))
        if self.r0 < 0:
            raise ValueError("r0 must be non-negative")
        if np.any(self.sigma0 < 0):
            raise ValueError("sigma0 must be non-negative")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")

    @property
    def w0(self) -> float:
        return float(np.log(self.lambda0))

    @classmethod
    def split_procurement(cls, p_total, n_agents: int, **kw) -> "MarketModel":
        # symmetric split p_i = p / n; only shifts each sub-payoff by a control-free term
        return cls(p_alloc=as_sequence(p_total) / n_agents, **kw)


@dataclass(frozen=True, eq=False)
class EtpParams:
    alpha: float
    kappa: float
    theta_out: np.ndarray
    x0: float

    def __post_init__(self):
        object.__setattr__(self, "theta_out", as_sequence(self.theta_out))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


@dataclass(frozen=True)
class ComfortParams:
    omega: float
    theta_lo: float
    theta_hi: float

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.theta_lo > self.theta_hi:
            raise ValueError("comfort band must satisfy theta_lo <= theta_hi")


@dataclass(frozen=True)
class ContractTerms:
    b: float
    S: float

    def __post_init__(self):
        if self.S < 0:
            raise ValueError("risk share S must be non-negative")


@dataclass(frozen=True, eq=False)
class AgentSpec:
    load_forecast: np.ndarray
    load_sigma: np.ndarray
    tariff: np.ndarray
    etp: EtpParams
    comfort: ComfortParams
    control_set: tuple
    terms: ContractTerms
    agent_id: str = "agent"

    def __post_init__(self):
        for name in ("load_forecast", "load_sigma", "tariff"):
            object.__setattr__(self, name, as_sequence(getattr(self, name)))
        if np.any(self.load_sigma < 0):
            raise ValueError("load_sigma must be non-negative")
        levels = tuple(sorted(float(u) for u in self.control_set))
        if not levels or not np.all(np.isfinite(levels)):
            raise ValueError("control_set must be a non-empty finite set")
        object.__setattr__(self, "control_set", tuple(dict.fromkeys(levels)))

    def with_terms(self, terms: ContractTerms) -> "AgentSpec":
        return replace(self, terms=terms)


@dataclass(frozen=True, eq=False)
class PrincipalSpec:
    theta: float
    agents: tuple

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))

    @property
    def risk_neutral(self) -> bool:
        return self.theta == 0


# -- scalar model functions -------------------------------------------------------


def comfort_rate(x, c: ComfortParams):
    """Comfort valuation in $/h: zero inside the band, linear penalty outside."""
    x = np.asarray(x, dtype=float)
    out = -c.omega * (np.maximum(x - c.theta_hi, 0.0) + np.maximum(c.theta_lo - x, 0.0))
    return out if out.ndim else float(out)


def etp_drift(x, u, t, p: EtpParams, grid: TimeGrid):
    """Indoor temperature drift alpha (Theta(t) - x) - kappa u, in degC/h."""
    theta_out = lookup(p.theta_out, t, grid.t0, grid.t1)
    return p.alpha * (theta_out - np.asarray(x, dtype=float)) - p.kappa * np.asarray(u, dtype=float)


def principal_running_payoff(t, w, u, a: AgentSpec, m: MarketModel, grid: TimeGrid):
    """(mu - e^w)(u + l) + e^w p_i; it does not depend on the indoor temperature."""
    mu = lookup(a.tariff, t, grid.t0, grid.t1)
    load = lookup(a.load_forecast, t, grid.t0, grid.t1)
    p = lookup(m.p_alloc, t, grid.t0, grid.t1)
    price = np.exp(w)
    return (mu - price) * (np.asarray(u, dtype=float) + load) + price * p


def principal_volatility(t, w, a: AgentSpec, grid: TimeGrid):
    mu = lookup(a.tariff, t, grid.t0, grid.t1)
    sig = lookup(a.load_sigma, t, grid.t0, grid.t1)
    return (mu - np.exp(w)) * sig


def agent_running_payoff(t, x, u, a: AgentSpec, grid: TimeGrid):
    """-mu (l + u) + comfort(x), in $/h."""
    mu = lookup(a.tariff, t, grid.t0, grid.t1)
    load = lookup(a.load_forecast, t, grid.t0, grid.t1)
    return -mu * (load + np.asarray(u, dtype=float)) + comfort_rate(x, a.comfort)


def agent_volatility(t, a: AgentSpec, grid: TimeGrid):
    mu = lookup(a.tariff, t, grid.t0, grid.t1)
    sig = lookup(a.load_sigma, t, grid.t0, grid.t1)
    return -mu * sig


def nominal_risk(a: AgentSpec, grid: TimeGrid) -> float:
    """Variance of the agent's payoff without a contract: integral of sigma_A^2."""
    t = grid.times()[:-1]
    return float(np.sum(np.asarray(agent_volatility(t, a, grid)) ** 2) * grid.dt)


# -- fingerprints -------------------------------------------------------------------


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [float(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def to_plain(obj):
    """Dataclass tree -> JSON-compatible structure."""
    return _plain(obj)


def fingerprint(obj, *, exclude: Sequence[str] = ()) -> str:
    plain = _plain(obj)
    if isinstance(plain, dict):
        plain = {k: v for k, v in plain.items() if k not in exclude}
    blob = json.dumps(plain, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- construction from plain dictionaries (configs, saved bundles) -------------------


def timegrid_from_dict(d: dict) -> TimeGrid:
    return TimeGrid(float(d["t0"]), float(d["t1"]), float(d.get("dt", 0.01)))


def market_from_dict(d: dict) -> MarketModel:
    return MarketModel(r0=float(d["r0"]), nu=d["nu"], sigma0=d["sigma0"], lambda0=float(d["lambda0"]),
                       p_alloc=d.get("p_alloc", 0.0))


def agent_from_dict(d: dict, terms: ContractTerms | None = None) -> AgentSpec:
    e, c = d["etp"], d["comfort"]
    if terms is None:
        t = d.get("terms", {})
        terms = ContractTerms(float(t.get("b", 0.0)), float(t.get("S", 0.0)))
    return AgentSpec(
        load_forecast=d["load_forecast"], load_sigma=d["load_sigma"], tariff=d["tariff"],
        etp=EtpParams(float(e["alpha"]), float(e["kappa"]), e["theta_out"], float(e["x0"])),
        comfort=ComfortParams(float(c["omega"]), float(c["theta_lo"]), float(c["theta_hi"])),
        control_set=tuple(d["control_set"]), terms=terms, agent_id=str(d.get("agent_id", "agent")))
