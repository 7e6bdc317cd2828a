"""Euler-Maruyama simulation of price, load, temperature and contract states.

All paths of a run share one time loop and are advanced as numpy vectors. Noise is
drawn per step from two independent generators: one for the market noise W0 (shared
by every agent of a seed, so contract and baseline runs see the same prices) and one
per agent stream for the demand noise Wi.

The core consumes log-price increments dw and demand deviations dev and recovers
dW0 = (dw - drift) / sigma0 and dWi = dev / sigma~ from them. Synthetic runs and
trace replays therefore go through identical arithmetic and agree bit for bit.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .models import (AgentSpec, MarketModel, TimeGrid, agent_running_payoff, agent_volatility,
                     etp_drift, lookup, principal_running_payoff, principal_volatility)
from .stats import mean_se, risk_sensitive_estimate, var_se


@dataclass(frozen=True)
class NoiseSource:
    """Root seed plus the agent stream index; both generators derive from the seed."""

    seed: int
    stream_id: int = 0

    def market(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(0,))))

    def agent(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(1, self.stream_id))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class PathState:
    t: float
    w: float
    x: float
    v: float
    y: float
    z: float
    ja_acc: float
    jp_acc: float


@dataclass(eq=False)
class TrajectoryBundle:
    """Terminal states, payoff samples and the record of the first ``n_record`` paths.

    ``ja`` = int r_A dt + int sigma_A dWi + C and ``jp`` = int r_P dt + int sigma_P dWi - C.
    ``gamma_int`` is int gamma dW^(i) and ``gamma_sq`` is int |gamma|^2 dt.
    """

    times: np.ndarray
    terms_b: float
    terms_S: float
    with_contract: bool
    w: np.ndarray
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    z: np.ndarray
    ja: np.ndarray
    jp: np.ndarray
    comp: np.ndarray
    ra_int: np.ndarray
    sa_int: np.ndarray
    rp_int: np.ndarray
    sp_int: np.ndarray
    gamma_int: np.ndarray
    gamma_sq: np.ndarray
    record: dict = field(default_factory=dict)
    exits: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.ja.size

    def terminal(self, i: int) -> PathState:
        return PathState(float(self.times[-1]), float(self.w[i]), float(self.x[i]), float(self.v[i]),
                         float(self.y[i]), float(self.z[i]),
                         float(self.ra_int[i] + self.sa_int[i]), float(self.rp_int[i] + self.sp_int[i]))

    def to_csv(self, max_export: int | None = None) -> str:
        """One row per step per recorded path, capped at ``max_export`` paths."""
        rec = self.record
        n_rec = rec["w"].shape[0] if rec else 0
        if max_export is not None:
            n_rec = min(n_rec, max_export)
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["path", "t", "w", "x", "u", "gamma1", "gamma2", "zeta1", "zeta2", "v", "y"])
        ns = self.times.size - 1
        for p in range(n_rec):
            for k in range(ns + 1):
                ctl = [rec[c][p, k] if k < ns else rec[c][p, k - 1]
                       for c in ("u", "gamma1", "gamma2", "zeta1", "zeta2")]
                wr.writerow([p] + [f"{v:.12g}" for v in
                                   (self.times[k], rec["w"][p, k], rec["x"][p, k], *ctl,
                                    rec["v"][p, k], rec["y"][p, k])])
        return buf.getvalue()

    def trace(self, p: int = 0) -> "Trace":
        """Increments that drove recorded path ``p``, usable with :func:`replay_on_trace`."""
        return Trace(self.times[:-1].copy(), self.record["dw"][p:p + 1].copy(),
                     self.record["dev"][p:p + 1].copy())


@dataclass(eq=False)
class Trace:
    """Recorded per-step increments: log-price dw and demand deviation dev, shape (paths, steps)."""

    t: np.ndarray
    dw: np.ndarray
    dev: np.ndarray

    def __post_init__(self):
        self.dw = np.atleast_2d(np.asarray(self.dw, dtype=float))
        self.dev = np.atleast_2d(np.asarray(self.dev, dtype=float))
        if self.dw.shape != self.dev.shape:
            raise ValueError("trace columns have different lengths")

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    def scaled(self, factor: float) -> "Trace":
        return Trace(self.t, self.dw * factor, self.dev * factor)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["path", "t", "d_logprice_increment", "d_demand_deviation"])
        for p in range(self.n_paths):
            for k in range(self.n_steps):
                wr.writerow([p, repr(float(self.t[k])), repr(float(self.dw[p, k])), repr(float(self.dev[p, k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty trace file")
        head = [h.strip() for h in rows[0]]
        need = ("t", "d_logprice_increment", "d_demand_deviation")
        if any(h not in head for h in need):
            raise ValueError(f"trace header must contain {need}")
        col = {h: i for i, h in enumerate(head)}
        paths: dict = {}
        for ln, r in enumerate(rows[1:], start=2):
            if not r:
                continue
            try:
                p = int(r[col["path"]]) if "path" in col else 0
                vals = [float(r[col[h]]) for h in need]
            except (ValueError, IndexError) as e:
                raise ValueError(f"trace line {ln}: {e}") from None
            paths.setdefault(p, []).append(vals)
        keys = sorted(paths)
        arr = [np.array(paths[k]) for k in keys]
        if len({a.shape[0] for a in arr}) != 1:
            raise ValueError("trace paths have different lengths")
        return cls(arr[0][:, 0], np.stack([a[:, 1] for a in arr]), np.stack([a[:, 2] for a in arr]))


# -- price paths ----------------------------------------------------------------------


def _check_step(m: MarketModel, g: TimeGrid):
    if g.dt * m.r0 >= 1:
        raise ValueError(f"dt * r0 = {g.dt * m.r0:.3g} >= 1: explicit drift step is unstable")


def _price_increment(m: MarketModel, g: TimeGrid, t: float, w, xi):
    nu = lookup(m.nu, t, g.t0, g.t1)
    sig = lookup(m.sigma0, t, g.t0, g.t1)
    drift = m.r0 * (nu - w) * g.dt
    return drift, drift + sig * math.sqrt(g.dt) * xi, sig


def simulate_price_paths(m: MarketModel, g: TimeGrid, n: int, noise: NoiseSource) -> np.ndarray:
    """Log-price paths, shape (n, n_steps + 1); prices are exp of the result."""
    return _price_paths(m, g, n, noise)[0]


def _price_paths(m: MarketModel, g: TimeGrid, n: int, noise: NoiseSource):
    if n < 1:
        raise ValueError("need at least one path")
    _check_step(m, g)
    rng = noise.market()
    times = g.times()
    w = np.full(n, m.w0)
    out = np.empty((n, times.size))
    inc = np.empty((n, g.n_steps))
    out[:, 0] = w
    for k in range(g.n_steps):
        _, dw, _ = _price_increment(m, g, times[k], w, rng.standard_normal(n))
        w = w + dw
        out[:, k + 1] = w
        inc[:, k] = dw
    return out, inc


def synthetic_trace(a: AgentSpec, m: MarketModel, g: TimeGrid, n: int, noise: NoiseSource) -> Trace:
    """Increments of ``n`` synthetic days, drawn exactly as :func:`simulate_closed_loop` draws them."""
    _, dw = _price_paths(m, g, n, noise)
    rng = noise.agent()
    times = g.times()
    dev = np.empty((n, g.n_steps))
    for k in range(g.n_steps):
        sig_t = lookup(a.load_sigma, times[k], g.t0, g.t1)
        dev[:, k] = sig_t * math.sqrt(g.dt) * rng.standard_normal(n)
    return Trace(times[:-1], dw, dev)


# -- closed loop ----------------------------------------------------------------------


def _run(a: AgentSpec, m: MarketModel, pol, g: TimeGrid, n: int, draw, with_contract: bool,
         n_record: int) -> TrajectoryBundle:
    times = g.times()
    dt = g.dt
    b, S = a.terms.b, a.terms.S
    w = np.full(n, m.w0)
    x = np.full(n, float(a.etp.x0))
    v = np.full(n, float(b))
    y = np.full(n, float(S))
    z = np.zeros(n)
    acc = {k: np.zeros(n) for k in ("ra", "sa", "rp", "sp", "gi", "gs")}
    nr = min(n_record, n)
    ns = g.n_steps
    rec = {k: np.empty((nr, ns + 1)) for k in ("w", "x", "v", "y")}
    rec.update({k: np.empty((nr, ns)) for k in ("u", "gamma1", "gamma2", "zeta1", "zeta2", "dw", "dev")})
    exits0 = getattr(pol, "exits", 0)
    for k in range(ns):
        t = float(times[k])
        for key, arr in (("w", w), ("x", x), ("v", v), ("y", y)):
            rec[key][:, k] = arr[:nr]
        c = pol(t, w, x, y)
        u, g1, g2, z1, z2 = c.u, c.gamma1, c.gamma2, c.zeta1, c.zeta2
        drift, dw, sig0 = draw.price(k, t, w)
        dev, sig_t = draw.demand(k, t)
        dW0 = (dw - drift) / sig0 if sig0 > 0 else np.zeros(n)
        dWi = dev / sig_t if sig_t > 0 else np.zeros(n)
        rA = agent_running_payoff(t, x, u, a, g)
        rP = principal_running_payoff(t, w, u, a, m, g)
        sA = agent_volatility(t, a, g)
        sP = principal_volatility(t, w, a, g)
        price = np.exp(w)
        load = lookup(a.load_forecast, t, g.t0, g.t1)
        p = lookup(m.p_alloc, t, g.t0, g.t1)
        gdw = g1 * dW0 + g2 * dWi
        v = v - rA * dt + g1 * dW0 + (g2 - sA) * dWi
        y = y - (g1 * g1 + g2 * g2) * dt + z1 * dW0 + z2 * dWi
        z = z + price * (p - (load + u)) * dt - price * sig_t * dWi
        x = x + etp_drift(x, u, t, a.etp, g) * dt
        w = w + dw
        acc["ra"] += rA * dt
        acc["sa"] += sA * dWi
        acc["rp"] += rP * dt
        acc["sp"] += sP * dWi
        acc["gi"] += gdw
        acc["gs"] += (g1 * g1 + g2 * g2) * dt
        for key, arr in (("u", u), ("gamma1", g1), ("gamma2", g2), ("zeta1", z1), ("zeta2", z2),
                         ("dw", dw), ("dev", dev)):
            rec[key][:, k] = np.broadcast_to(arr, (n,))[:nr]
    for key, arr in (("w", w), ("x", x), ("v", v), ("y", y)):
        rec[key][:, ns] = arr[:nr]
    comp = v.copy() if with_contract else np.zeros(n)
    ja = acc["ra"] + acc["sa"] + comp
    jp = acc["rp"] + acc["sp"] - comp
    return TrajectoryBundle(times, float(b), float(S), with_contract, w, x, v, y, z, ja, jp, comp,
                            acc["ra"], acc["sa"], acc["rp"], acc["sp"], acc["gi"], acc["gs"], rec,
                            exits=getattr(pol, "exits", 0) - exits0)


class _Synthetic:
    def __init__(self, a, m, g, n, noise):
        self.a, self.m, self.g, self.n = a, m, g, n
        self.rm = noise.market()
        self.ra = noise.agent()

    def price(self, k, t, w):
        return _price_increment(self.m, self.g, t, w, self.rm.standard_normal(self.n))

    def demand(self, k, t):
        sig_t = lookup(self.a.load_sigma, t, self.g.t0, self.g.t1)
        return sig_t * math.sqrt(self.g.dt) * self.ra.standard_normal(self.n), sig_t


class _Replay:
    def __init__(self, a, m, g, trace: Trace):
        self.a, self.m, self.g, self.trace = a, m, g, trace

    def price(self, k, t, w):
        nu = lookup(self.m.nu, t, self.g.t0, self.g.t1)
        sig = lookup(self.m.sigma0, t, self.g.t0, self.g.t1)
        return self.m.r0 * (nu - w) * self.g.dt, self.trace.dw[:, k], sig

    def demand(self, k, t):
        return self.trace.dev[:, k], lookup(self.a.load_sigma, t, self.g.t0, self.g.t1)


def simulate_closed_loop(a: AgentSpec, m: MarketModel, pol, g: TimeGrid, n: int, noise: NoiseSource,
                         with_contract: bool = True, n_record: int = 16) -> TrajectoryBundle:
    """Simulate ``n`` paths under the feedback ``pol`` (anything returning Controls).

    With ``with_contract`` the compensation is C = v_T; otherwise C = 0 (the no-contract
    baseline, where the policy's loadings should be zero).
    """
    if n < 1:
        raise ValueError("need at least one path")
    _check_step(m, g)
    bundle = _run(a, m, pol, g, n, _Synthetic(a, m, g, n, noise), with_contract, n_record)
    bundle.meta.update(seed=noise.seed, stream_id=noise.stream_id, source="synthetic")
    return bundle


def replay_on_trace(a: AgentSpec, m: MarketModel, pol, g: TimeGrid, trace: Trace,
                    with_contract: bool = True, n_record: int = 16) -> TrajectoryBundle:
    """Run the closed loop over recorded increments instead of synthetic draws.

    ``bundle.meta['replay']`` compares the realised mean and variance of J_A with the
    model values b and E[int |gamma|^2 dt] (the risk the policy planned to pass on).
    """
    if trace.n_steps < g.n_steps:
        raise ValueError(f"trace has {trace.n_steps} steps, the time grid needs {g.n_steps}")
    if trace.n_steps > g.n_steps:
        trace = Trace(trace.t[:g.n_steps], trace.dw[:, :g.n_steps], trace.dev[:, :g.n_steps])
    _check_step(m, g)
    n = trace.n_paths
    bundle = _run(a, m, pol, g, n, _Replay(a, m, g, trace), with_contract, n_record)
    mean_ja = float(bundle.ja.mean())
    var_ja = float(bundle.ja.var(ddof=1)) if n > 1 else 0.0
    planned = float(bundle.gamma_sq.mean())
    bundle.meta.update(source="trace", replay=dict(
        mean_ja=mean_ja, predicted_mean_ja=a.terms.b, mean_deviation=mean_ja - a.terms.b,
        var_ja=var_ja, predicted_var_ja=planned, var_deviation=var_ja - planned,
        risk_share=a.terms.S, risk_violation=bool(var_ja > a.terms.S) if n > 1 else False,
        violation_pct=100.0 * max(var_ja / a.terms.S - 1.0, 0.0) if a.terms.S > 0 and n > 1 else 0.0))
    return bundle


def accumulate_payoffs(bundle: TrajectoryBundle, theta: float) -> dict:
    """Means, variances, standard errors and the risk-sensitive value of J_P."""
    if bundle.n_paths < 2:
        raise ValueError("need at least two paths")
    ma, ma_se = mean_se(bundle.ja)
    va, va_se = var_se(bundle.ja)
    mp, mp_se = mean_se(bundle.jp)
    vp, vp_se = var_se(bundle.jp)
    out = dict(n_paths=bundle.n_paths, mean_ja=ma, mean_ja_se=ma_se, var_ja=va, var_ja_se=va_se,
               mean_jp=mp, mean_jp_se=mp_se, var_jp=vp, var_jp_se=vp_se)
    if theta == 0:
        out.update(rs_jp=mp, rs_jp_se=mp_se)
    else:
        rs, rs_se = risk_sensitive_estimate(bundle.jp, theta, return_se=True)
        out.update(rs_jp=rs, rs_jp_se=rs_se)
    return out
