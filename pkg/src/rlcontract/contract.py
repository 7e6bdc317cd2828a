"""Per-agent contract design, compensation, suboptimality certificates and menus."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .hjb.grid import Axis, ControlMesh, GridSpec, default_grid, default_mesh
from .hjb.policy import Policy
from .hjb.solver import ValueGrid, solve_constrained_hjb, solve_risk_neutral
from .models import (AgentSpec, ContractTerms, MarketModel, TimeGrid, agent_from_dict,
                     agent_running_payoff, agent_volatility, fingerprint, lookup, market_from_dict,
                     timegrid_from_dict, to_plain)

log = logging.getLogger(__name__)

# left out of saved bundles so that reruns reproduce them byte for byte
VOLATILE_META = ("designed_at", "solve_seconds")


@dataclass(frozen=True)
class SuboptimalityCertificate:
    """rho = numerator / denominator, available only when the denominator is positive."""

    numerator: float
    denominator: float
    rho: float | None
    theta: float
    label: str = "decomposed-problem bound"
    note: str = ""

    @property
    def available(self) -> bool:
        return self.rho is not None


@dataclass(eq=False)
class Contract:
    agent_id: str
    terms: ContractTerms
    value_grid: ValueGrid
    theta: float
    agent_fp: str
    market_fp: str
    certificate: SuboptimalityCertificate | None = None
    meta: dict = field(default_factory=dict)

    @property
    def policy(self) -> Policy:
        return Policy(self.value_grid)

    @property
    def value(self) -> float:
        a, m = self.value_grid.agent, self.value_grid.market
        return self.value_grid.value_at(m.w0, a.etp.x0, a.terms.S)


def _resolve(a, m, tg, gs, cm):
    gs = gs if gs is not None else default_grid(a, m, tg)
    cm = cm if cm is not None else default_mesh(a, m, tg, gs)
    return gs, cm


def design_contract(a: AgentSpec, m: MarketModel, theta: float, gs: GridSpec | None = None,
                    cm: ControlMesh | None = None, tg: TimeGrid | None = None,
                    certificate: bool = True, n_agents: int = 1) -> Contract:
    """Solve the per-agent problem for the terms held in ``a`` and wrap the policy.

    A certificate is attached for theta > 0; for n_agents == 1 it bounds the exact
    instance rather than a decomposition.
    """
    if tg is None:
        raise ValueError("a TimeGrid is required")
    if a.terms.S < 0:
        raise ValueError("risk share S must be non-negative")
    gs, cm = _resolve(a, m, tg, gs, cm)
    t0 = time.perf_counter()
    vg = solve_constrained_hjb(a, m, theta, gs, cm, tg)
    elapsed = time.perf_counter() - t0
    cert = None
    if certificate and theta > 0:
        cert = suboptimality_ratio(a, m, theta, gs, cm, tg, vg=vg, n_agents=n_agents)
    meta = dict(designed_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                solve_seconds=round(elapsed, 3), n_levels=vg.n_levels, mesh_size=cm.size,
                gamma_cap=list(cm.gamma_cap), zeta_max=cm.zeta_max)
    return Contract(a.agent_id, a.terms, vg, float(theta), fingerprint(a), fingerprint(m), cert, meta)


def suboptimality_ratio(a: AgentSpec, m: MarketModel, theta: float, gs: GridSpec | None = None,
                        cm: ControlMesh | None = None, tg: TimeGrid | None = None,
                        vg: ValueGrid | None = None, n_agents: int = 1) -> SuboptimalityCertificate:
    """rho = phi(w0, x0, S, 0) / (risk-neutral value - b).

    The risk-neutral problem is solved on the same (w, x) axes and the same time
    levels as the constrained one, so both values carry the same discretisation.
    """
    if not theta > 0:
        raise ValueError("the certificate needs theta > 0")
    if tg is None:
        raise ValueError("a TimeGrid is required")
    gs, cm = _resolve(a, m, tg, gs, cm)
    if vg is None:
        vg = solve_constrained_hjb(a, m, theta, gs, cm, tg)
    num = vg.value_at(m.w0, a.etp.x0, a.terms.S)
    g_rn = replace(gs, n_t=vg.n_levels, max_refine=1)
    rn = solve_risk_neutral(a, m, g_rn, tg)
    den = rn.value_at(m.w0, a.etp.x0) - a.terms.b
    label = "exact-instance bound" if n_agents == 1 else "decomposed-problem bound"
    if not den > 0:
        return SuboptimalityCertificate(num, den, None, theta, label,
                                        "risk-neutral value minus b is not positive; bound unavailable")
    return SuboptimalityCertificate(num, den, num / den, theta, label)


# -- compensation ------------------------------------------------------------------------


@dataclass
class PathRecord:
    """Per-step quantities of one path: v has one more entry than the step arrays."""

    v: np.ndarray
    dt: float
    r_a: np.ndarray
    s_a: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    dW0: np.ndarray
    dWi: np.ndarray


def path_record(bundle, p: int, a: AgentSpec, m: MarketModel, tg: TimeGrid) -> PathRecord:
    """Rebuild the per-step payoff terms of recorded path ``p`` of a bundle."""
    rec = bundle.record
    if "v" not in rec:
        raise ValueError("bundle has no v-state record")
    t = bundle.times[:-1]
    w = rec["w"][p, :-1]
    nu = np.asarray(lookup(m.nu, t, tg.t0, tg.t1)) * np.ones_like(t)
    sig0 = np.asarray(lookup(m.sigma0, t, tg.t0, tg.t1)) * np.ones_like(t)
    sig_t = np.asarray(lookup(a.load_sigma, t, tg.t0, tg.t1)) * np.ones_like(t)
    drift = m.r0 * (nu - w) * tg.dt
    with np.errstate(divide="ignore", invalid="ignore"):
        dW0 = np.where(sig0 > 0, (rec["dw"][p] - drift) / sig0, 0.0)
        dWi = np.where(sig_t > 0, rec["dev"][p] / sig_t, 0.0)
    r_a = np.array([agent_running_payoff(tk, xk, uk, a, tg)
                    for tk, xk, uk in zip(t, rec["x"][p, :-1], rec["u"][p])])
    s_a = np.asarray(agent_volatility(t, a, tg)) * np.ones_like(t)
    return PathRecord(rec["v"][p].copy(), tg.dt, r_a, s_a, rec["gamma1"][p].copy(), rec["gamma2"][p].copy(),
                      dW0, dWi)


def compensation_from_path(path: PathRecord, terms: ContractTerms, rtol: float = 1e-9) -> float:
    """C = v_T, checked against b - sum r_A dt - sum sigma_A dWi + sum gamma dW^(i)."""
    if path is None or getattr(path, "v", None) is None or len(path.v) == 0:
        raise ValueError("path carries no v-state trajectory")
    c = float(path.v[-1])
    expansion = (terms.b - math.fsum(path.r_a * path.dt) - math.fsum(path.s_a * path.dWi)
                 + math.fsum(path.gamma1 * path.dW0) + math.fsum(path.gamma2 * path.dWi))
    scale = 1.0 + abs(terms.b) + math.fsum(np.abs(path.r_a * path.dt)) + math.fsum(np.abs(path.s_a * path.dWi)) \
        + math.fsum(np.abs(path.gamma1 * path.dW0)) + math.fsum(np.abs(path.gamma2 * path.dWi))
    if abs(c - expansion) > rtol * scale:
        raise AssertionError(f"v_T = {c!r} disagrees with the payoff expansion {expansion!r}")
    return c


# -- menus -------------------------------------------------------------------------------


@dataclass(eq=False)
class MenuResult:
    contracts: dict
    errors: dict
    n_solves: int
    cache_hits: int
    seconds: float
    keys: dict = field(default_factory=dict)


def _design_job(args):
    a, m, theta, gs, cm, tg, n_agents = args
    try:
        return design_contract(a, m, theta, gs, cm, tg, n_agents=n_agents), None
    except Exception as e:  # isolated per agent, reported in the manifest
        return None, f"{type(e).__name__}: {e}"


def design_menu(agents, menu, m: MarketModel, theta: float, gs: GridSpec | None = None,
                cm: ControlMesh | None = None, tg: TimeGrid | None = None, jobs: int = 1) -> MenuResult:
    """Design one contract per agent; agents equal up to their id share one solve.

    ``menu`` is the list of admissible (b, S) pairs. Agents whose terms are not on the
    menu, and agents whose solve fails, are listed in ``errors`` instead of aborting.
    """
    menu = [(float(b), float(S)) for b, S in menu]
    if not menu:
        raise ValueError("menu is empty")
    agents = list(agents)
    errors = {}
    todo = {}
    keys = {}
    for a in agents:
        if not any(math.isclose(a.terms.b, b, rel_tol=1e-12, abs_tol=1e-12)
                   and math.isclose(a.terms.S, S, rel_tol=1e-12, abs_tol=1e-12) for b, S in menu):
            errors[a.agent_id] = f"terms (b={a.terms.b}, S={a.terms.S}) are not on the menu"
            continue
        key = fingerprint(dict(agent=fingerprint(a, exclude=("agent_id",)), market=fingerprint(m), theta=theta,
                               grid=to_plain(gs), mesh=to_plain(cm)))
        keys[a.agent_id] = key
        todo.setdefault(key, a)
    n_agents = len(agents)
    t0 = time.perf_counter()
    jobs_list = [(a, m, theta, gs, cm, tg, n_agents) for a in todo.values()]
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(jobs_list))) as ex:
            results = list(ex.map(_design_job, jobs_list))
    else:
        results = [_design_job(j) for j in jobs_list]
    solved = dict(zip(todo.keys(), results))
    contracts = {}
    for a in agents:
        key = keys.get(a.agent_id)
        if key is None:
            continue
        c, err = solved[key]
        if err is not None:
            errors[a.agent_id] = err
            continue
        contracts[a.agent_id] = c if c.agent_id == a.agent_id else replace(c, agent_id=a.agent_id)
    n_ok = sum(1 for a in agents if a.agent_id in keys)
    return MenuResult(contracts, errors, len(todo), n_ok - len(todo), time.perf_counter() - t0, keys)


# -- persistence ---------------------------------------------------------------------------


def save_contract(c: Contract, directory) -> Path:
    """Write contract.json, valuegrid.bin and policy.json into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    vg = c.value_grid
    (d / "valuegrid.bin").write_bytes(vg.to_bytes())
    cert = None
    if c.certificate is not None:
        cert = dict(numerator=c.certificate.numerator, denominator=c.certificate.denominator,
                    rho=c.certificate.rho, label=c.certificate.label, note=c.certificate.note)
    doc = dict(agent_id=c.agent_id, terms=dict(b=c.terms.b, S=c.terms.S), theta=c.theta,
               fingerprints=dict(agent=c.agent_fp, market=c.market_fp), certificate=cert,
               value_at_start=c.value, meta={k: v for k, v in c.meta.items() if k not in VOLATILE_META}, agent=to_plain(vg.agent), market=to_plain(vg.market),
               timegrid=dict(t0=vg.timegrid.t0, t1=vg.timegrid.t1, dt=vg.timegrid.dt))
    (d / "contract.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    pol = dict(kind=vg.kind, mesh=to_plain(vg.mesh),
               grid=dict(w=to_plain(vg.grid.w), x=to_plain(vg.grid.x), y=to_plain(vg.grid.y),
                         n_t=vg.grid.n_t, cfl=vg.grid.cfl, max_refine=vg.grid.max_refine),
               n_levels=vg.n_levels, rule="nearest (w, x) node, y node below, loadings rescaled at (t, w)")
    (d / "policy.json").write_text(json.dumps(pol, indent=2, sort_keys=True) + "\n")
    return d


def load_contract(directory) -> Contract:
    d = Path(directory)
    doc = json.loads((d / "contract.json").read_text())
    pol = json.loads((d / "policy.json").read_text())
    terms = ContractTerms(**doc["terms"])
    a = agent_from_dict(doc["agent"], terms)
    m = market_from_dict(doc["market"])
    tg = timegrid_from_dict(doc["timegrid"])
    if fingerprint(a) != doc["fingerprints"]["agent"] or fingerprint(m) != doc["fingerprints"]["market"]:
        raise ValueError(f"{d}: stored fingerprints do not match the stored specifications")
    g = pol["grid"]
    gs = GridSpec(Axis(**g["w"]), Axis(**g["x"]), Axis(**g["y"]), n_t=g["n_t"], cfl=g["cfl"],
                  max_refine=g["max_refine"])
    mesh = ControlMesh(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in pol["mesh"].items()})
    arr = ValueGrid.read_arrays((d / "valuegrid.bin").read_bytes())
    vg = ValueGrid(arr["kind"], arr["values"], arr["controls"], arr["times"], gs, mesh, arr["theta"], arr["b"],
                   a, m, tg, a.agent_id)
    cert = None
    if doc.get("certificate"):
        cd = doc["certificate"]
        cert = SuboptimalityCertificate(cd["numerator"], cd["denominator"], cd["rho"], doc["theta"],
                                        cd["label"], cd.get("note", ""))
    return Contract(doc["agent_id"], terms, vg, doc["theta"], doc["fingerprints"]["agent"],
                    doc["fingerprints"]["market"], cert, doc.get("meta", {}))
