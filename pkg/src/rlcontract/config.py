"""Run configuration: JSON document -> model objects.

Relative file paths inside a config resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .calibrate import (CalibrationResult, fit_load_diffusion, fit_ou_params, read_consumption_csv,
                        read_price_csv, window_profile)
from .hjb.grid import ControlMesh, GridSpec, default_grid, default_mesh
from .hjb.solver import solve_baseline_hjb
from .models import (AgentSpec, ComfortParams, ContractTerms, EtpParams, MarketModel, TimeGrid,
                     market_from_dict)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    raw: dict
    base: Path
    tg: TimeGrid
    theta: float
    seed: int
    paths: int
    n_record: int
    sweep: list
    grid: dict
    mesh: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {p} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from None
        return cls.from_dict(raw, p.parent)

    @classmethod
    def from_dict(cls, raw: dict, base=".") -> "RunConfig":
        raw = copy.deepcopy(raw)
        try:
            win = raw["window"]
            tg = TimeGrid(float(win["t0"]), float(win["t1"]), float(win.get("dt", 0.01)))
            theta = float(raw.get("principal", {}).get("theta", 0.01))
            sim = raw.get("simulation", {})
            if not raw.get("agents"):
                raise ConfigError("config lists no agents")
            if "market" not in raw:
                raise ConfigError("config has no market section")
        except KeyError as e:
            raise ConfigError(f"config is missing {e}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return cls(raw, Path(base), tg, theta, int(raw.get("seed", 0)), int(sim.get("paths", 10000)),
                   int(sim.get("n_record", 8)), list(sim.get("sweep", [])),
                   dict(raw.get("grid", {})), dict(raw.get("mesh", {})))

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.base / p

    def set_grid(self, spec: str):
        """Override from a 'WxXxY' string."""
        try:
            nw, nx, ny = (int(v) for v in spec.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--grid expects WxXxY, got {spec!r}") from None
        self.grid.update(n_w=nw, n_x=nx, n_y=ny)

    # -- market ---------------------------------------------------------------------

    def calibrate_market(self, unit: str | None = None) -> CalibrationResult:
        mk = self.raw["market"]
        if "price_csv" not in mk:
            raise ConfigError("market section has no price_csv to calibrate from")
        text = _read(self.path(mk["price_csv"]))
        h = read_price_csv(text, unit or mk.get("unit", "usd_per_mwh"))
        return fit_ou_params(h, int(mk.get("seasonal_bins", 24)))

    def market(self, fitted: dict | None = None) -> MarketModel:
        """MarketModel from an inline model, a saved fit, or a fresh calibration."""
        mk = self.raw["market"]
        p_alloc = mk.get("p_alloc", 0.0)
        if "model" in mk:
            d = dict(mk["model"])
            d.setdefault("p_alloc", p_alloc)
            return market_from_dict(d)
        if fitted is None:
            fitted = self.calibrate_market().to_dict()
        nu = window_profile(fitted["nu"], self.tg)
        sig = window_profile(fitted["sigma0"], self.tg)
        lam0 = float(mk.get("lambda0", math.exp(nu[0])))
        return MarketModel(r0=float(fitted["r0"]), nu=nu, sigma0=sig, lambda0=lam0, p_alloc=p_alloc)

    # -- agents ---------------------------------------------------------------------

    def fit_agent_sigma(self, d: dict) -> CalibrationResult:
        panel = read_consumption_csv(_read(self.path(d["consumption_csv"])))
        n_bins = d.get("sigma_bins")
        return fit_load_diffusion(panel, n_bins)

    def agent_templates(self, sigmas: dict | None = None) -> list:
        """AgentSpecs with placeholder terms, expanded by 'copies', plus their raw terms requests."""
        out = []
        seen = set()
        for i, d in enumerate(self.raw["agents"]):
            aid = str(d.get("agent_id", f"agent-{i}"))
            if "load_sigma" in d:
                sig = d["load_sigma"]
            elif "consumption_csv" in d:
                sig = (sigmas or {}).get(aid)
                if sig is None:
                    sig = self.fit_agent_sigma(d).load_sigma.tolist()
            else:
                raise ConfigError(f"agent {aid}: give load_sigma or consumption_csv")
            try:
                e, c = d["etp"], d["comfort"]
                base = dict(load_forecast=d["load_forecast"], load_sigma=sig, tariff=d["tariff"],
                            etp=EtpParams(float(e["alpha"]), float(e["kappa"]), e["theta_out"], float(e["x0"])),
                            comfort=ComfortParams(float(c["omega"]), float(c["theta_lo"]), float(c["theta_hi"])),
                            control_set=tuple(d["control_set"]))
            except KeyError as err:
                raise ConfigError(f"agent {aid}: missing {err}") from None
            except ValueError as err:
                raise ConfigError(f"agent {aid}: {err}") from None
            copies = int(d.get("copies", 1))
            for k in range(copies):
                name = aid if copies == 1 else f"{aid}-{k}"
                if name in seen:
                    raise ConfigError(f"duplicate agent id {name}")
                seen.add(name)
                out.append((AgentSpec(terms=ContractTerms(0.0, 0.0), agent_id=name, **base),
                            dict(d.get("terms", {}))))
        return out

    def grid_for(self, a: AgentSpec, m: MarketModel) -> GridSpec:
        g = self.grid
        return default_grid(a, m, self.tg, n_w=int(g.get("n_w", 15)), n_x=int(g.get("n_x", 49)),
                            n_y=int(g.get("n_y", 11)), n_t=int(g.get("n_t", 32)))

    def mesh_for(self, a: AgentSpec, m: MarketModel, gs: GridSpec) -> ControlMesh:
        return default_mesh(a, m, self.tg, gs, **self.mesh)

    def baseline_grid(self, a: AgentSpec, m: MarketModel) -> GridSpec:
        return self.grid_for(a.with_terms(ContractTerms(0.0, 0.0)), m)


def resolve_terms(a: AgentSpec, req: dict, m: MarketModel, cfg: RunConfig, share=None):
    """Turn a terms request into ContractTerms; 'baseline' and S_share use the no-contract solve."""
    need_base = req.get("b", 0.0) == "baseline" or "S_share" in req or share is not None
    b_bar = s_bar = None
    if need_base:
        sol = solve_baseline_hjb(a, cfg.baseline_grid(a, m), cfg.tg, m)
        b_bar, s_bar = sol.b_bar, sol.S_bar
    b = b_bar if req.get("b", 0.0) == "baseline" else float(req.get("b", 0.0))
    if share is not None:
        S = share * s_bar
    elif "S_share" in req:
        S = float(req["S_share"]) * s_bar
    else:
        S = float(req.get("S", 0.0))
    return ContractTerms(float(b), float(S)), b_bar, s_bar


def _read(p: Path) -> str:
    try:
        return p.read_text()
    except FileNotFoundError:
        raise ConfigError(f"input file {p} not found") from None
