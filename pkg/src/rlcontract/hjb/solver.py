"""Backward explicit sweeps for the constrained risk-sensitive, risk-neutral and baseline problems."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..models import AgentSpec, MarketModel, TimeGrid, nominal_risk
from . import _kernel
from .grid import Axis, ControlMesh, GridSpec, LevelParams, residual_volatility

log = logging.getLogger(__name__)

KINDS = ("constrained", "risk_neutral", "baseline")


class SolverError(RuntimeError):
    """Numerical failure of a backward sweep (CFL cap exceeded, non-finite values)."""


@dataclass(eq=False)
class ValueGrid:
    """Value function on the (t, w, x, y) lattice plus the argmax table of every level.

    ``values[n]`` is phi at ``times[n]``; ``controls[:, n]`` holds the mesh indices
    (u, gamma1, gamma2, zeta1 lattice step + K, zeta2) chosen on [times[n], times[n+1]).
    """

    kind: str
    values: np.ndarray
    controls: np.ndarray
    times: np.ndarray
    grid: GridSpec
    mesh: ControlMesh
    theta: float
    b: float
    agent: AgentSpec
    market: MarketModel
    timegrid: TimeGrid
    agent_id: str = "agent"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values.setflags(write=False)
        self.controls.setflags(write=False)

    @property
    def axes(self):
        return self.grid.w.points(), self.grid.x.points(), self.grid.y.points()

    @property
    def n_levels(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def level(self, t):
        n = np.floor((np.asarray(t, dtype=float) - self.times[0]) / self.dt + 1e-9).astype(np.int64)
        return np.clip(n, 0, self.n_levels - 1)

    def value_at(self, w, x, y=0.0, t=None) -> float:
        """Multilinear interpolation of phi at a state; ``t`` defaults to the first level."""
        n = 0 if t is None else int(round((t - self.times[0]) / self.dt))
        return float(interp3(self.values[n], self.grid, np.atleast_1d(w), np.atleast_1d(x),
                             np.atleast_1d(y))[0])

    def level_params(self) -> LevelParams:
        return LevelParams.build(self.times[:-1], self.agent, self.market, self.timegrid,
                                 self.grid, self.mesh)

    # -- serialisation ---------------------------------------------------------------

    MAGIC = b"RLVG0001"

    def to_bytes(self) -> bytes:
        """Header + little-endian float64 values + int16 control indices.

        Header: magic(8) kind(16, ascii padded) theta b (f8) nt nw nx ny (i4)
        w_lo w_hi x_lo x_hi y_lo y_hi t0 dt (f8).
        """
        nt1, nw, nx, ny = self.values.shape
        head = self.MAGIC + self.kind.encode().ljust(16, b"\0")
        head += struct.pack("<dd4i8d", self.theta, self.b, nt1, nw, nx, ny,
                            self.grid.w.lo, self.grid.w.hi, self.grid.x.lo, self.grid.x.hi,
                            self.grid.y.lo, self.grid.y.hi, self.times[0], self.dt)
        return (head + self.values.astype("<f8").tobytes()
                + self.controls.astype("<i2").tobytes())

    @staticmethod
    def read_arrays(blob: bytes):
        if blob[:8] != ValueGrid.MAGIC:
            raise ValueError("not a value-grid file")
        kind = blob[8:24].rstrip(b"\0").decode()
        off = 24
        fmt = "<dd4i8d"
        vals = struct.unpack_from(fmt, blob, off)
        off += struct.calcsize(fmt)
        theta, b, nt1, nw, nx, ny = vals[:6]
        count = nt1 * nw * nx * ny
        values = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(nt1, nw, nx, ny)
        off += 8 * count
        controls = np.frombuffer(blob, dtype="<i2", count=5 * (nt1 - 1) * nw * nx * ny,
                                 offset=off).reshape(5, nt1 - 1, nw, nx, ny)
        t0, dt = vals[-2], vals[-1]
        times = t0 + dt * np.arange(nt1)
        return dict(kind=kind, theta=theta, b=b, values=values.copy(),
                    controls=controls.astype(np.int16), times=times, bounds=vals[6:12])

    def slice_csv(self, n: int = 0, y_index: int | None = None) -> str:
        """CSV rows (w, x, y, phi) of one time level, optionally one y layer."""
        w, x, y = self.axes
        rows = ["w,x,y,phi"]
        ys = range(y.size) if y_index is None else [y_index]
        for i in range(w.size):
            for j in range(x.size):
                for k in ys:
                    rows.append(f"{w[i]:.10g},{x[j]:.10g},{y[k]:.10g},{self.values[n, i, j, k]:.12g}")
        return "\n".join(rows) + "\n"


def interp3(field3, gs: GridSpec, w, x, y):
    """Multilinear interpolation on the (w, x, y) box; coordinates are clamped to it."""
    out = field3
    coords = []
    for ax, v in ((gs.w, w), (gs.x, x), (gs.y, y)):
        if ax.n == 1:
            coords.append((np.zeros(v.shape, np.int64), np.zeros(v.shape)))
            continue
        pos = np.clip((np.asarray(v, dtype=float) - ax.lo) / ax.step, 0.0, ax.n - 1)
        # snap round-off away so that node coordinates return node values exactly
        near = np.rint(pos)
        pos = np.where(np.abs(pos - near) < 1e-9, near, pos)
        i0 = np.minimum(np.floor(pos).astype(np.int64), ax.n - 2)
        coords.append((i0, pos - i0))
    (i, fi), (j, fj), (k, fk) = coords
    nw, nx, ny = out.shape
    i1 = np.minimum(i + 1, nw - 1)
    j1 = np.minimum(j + 1, nx - 1)
    k1 = np.minimum(k + 1, ny - 1)
    c00 = out[i, j, k] * (1 - fk) + out[i, j, k1] * fk
    c01 = out[i, j1, k] * (1 - fk) + out[i, j1, k1] * fk
    c10 = out[i1, j, k] * (1 - fk) + out[i1, j, k1] * fk
    c11 = out[i1, j1, k] * (1 - fk) + out[i1, j1, k1] * fk
    c0 = c00 * (1 - fj) + c01 * fj
    c1 = c10 * (1 - fj) + c11 * fj
    return c0 * (1 - fi) + c1 * fi


# -- time stepping ------------------------------------------------------------------


def _rate_bound(a: AgentSpec, m: MarketModel, tg: TimeGrid, gs: GridSpec, mesh: ControlMesh,
                theta: float, lp: LevelParams) -> float:
    """Upper bound on the total jump intensity of the chain (1/h)."""
    w = gs.w.points()
    x_ends = np.array([gs.x.lo, gs.x.hi])
    u = np.array(mesh.u_levels)
    f = a.etp.alpha * (lp.theta_out[:, None, None] - x_ends[None, :, None]) - a.etp.kappa * u[None, None, :]
    rate = float(np.max(np.abs(f))) / gs.x.step if gs.x.n > 1 else 0.0
    if gs.w.n > 1:
        g1cap = mesh.gamma_cap[0]
        g1max = min(g1cap, float(np.max(np.abs(mesh.gamma1_mult)) * np.max(lp.g1_fac) * np.exp(w.max())))
        drift_w = m.r0 * np.max(np.abs(lp.nu[:, None] - w[None, :])) + abs(theta) * np.max(lp.sigma0) * g1max
        rate += drift_w / gs.w.step + float(np.max(lp.sigma0)) ** 2 / gs.w.step ** 2
    else:
        g1max = 0.0
    if gs.y.n > 1:
        s = residual_volatility(lp.t[:, None], w[None, :], a, tg)
        s_max = float(np.max(np.abs(s)))
        g2max = min(mesh.gamma_cap[1], float(np.max(np.abs(mesh.gamma2_mult))) * s_max)
        z1max = float(np.max(lp.k_max * lp.zeta_r)) if lp.k_max.size else 0.0
        z2max = float(np.max(np.abs(mesh.zeta2_mult))) * mesh.zeta_max if np.any(lp.zeta2_on) else 0.0
        drift_y = g1max ** 2 + g2max ** 2 + abs(theta) * (z1max * g1max + z2max * (g2max + s_max))
        rate += drift_y / gs.y.step + z2max ** 2 / gs.y.step ** 2
    return rate


def _choose_levels(a, m, tg, gs, mesh, theta):
    n = gs.n_t
    for _ in range(64):
        times = tg.t0 + (tg.horizon / n) * np.arange(n + 1)
        lp = LevelParams.build(times[:-1], a, m, tg, gs, mesh)
        rate = _rate_bound(a, m, tg, gs, mesh, theta, lp)
        need = int(math.ceil(tg.horizon * rate / gs.cfl - 1e-12))
        if need <= n:
            return times, lp
        if need > gs.n_t * gs.max_refine:
            raise SolverError(
                f"CFL bound needs {need} steps, above the cap of {gs.n_t * gs.max_refine}; "
                "coarsen the grid or raise max_refine")
        n = need
    raise SolverError("time-step selection did not settle")


def estimate_levels(a: AgentSpec, m: MarketModel, theta: float, gs: GridSpec, mesh: ControlMesh,
                    tg: TimeGrid) -> int:
    """Number of backward steps the solver would take (raises past the refinement cap)."""
    return _choose_levels(a, m, tg, gs, mesh, theta)[0].size - 1


def _sweep_all(kind, theta, reward_kind, a, m, tg, gs, mesh, terminal):
    times, lp = _choose_levels(a, m, tg, gs, mesh, theta)
    nt = times.size - 1
    dt = tg.horizon / nt
    shape = gs.shape
    values = np.empty((nt + 1,) + shape)
    values[nt] = terminal
    controls = np.empty((5, nt) + shape, dtype=np.int16)
    wg, xg, yg = gs.w.points(), gs.x.points(), gs.y.points()
    iz = mesh.zero_indices()
    u_levels = np.array(mesh.u_levels)
    g1m = np.array(mesh.gamma1_mult)
    g2m = np.array(mesh.gamma2_mult)
    z2 = np.array(mesh.zeta2_mult) * mesh.zeta_max
    K = mesh.zeta1_steps
    et, cf = a.etp, a.comfort
    for n in range(nt - 1, -1, -1):
        _kernel.sweep(
            float(theta), dt, reward_kind, values[n + 1], values[n], controls[:, n],
            wg, xg, yg, gs.w.step, gs.x.step, gs.y.step,
            m.r0, lp.nu[n], lp.sigma0[n], lp.load[n], lp.tariff[n], lp.p_alloc[n],
            lp.load_sigma[n], lp.theta_out[n], et.alpha, et.kappa, cf.omega, cf.theta_lo,
            cf.theta_hi, u_levels, g1m, lp.g1_fac[n], mesh.gamma_cap[0], g2m, mesh.gamma_cap[1],
            lp.zeta_r[n], int(lp.k_max[n]), K, z2, int(lp.zeta2_on[n]), iz[0], iz[1], iz[2])
        if not np.all(np.isfinite(values[n])):
            bad = np.argwhere(~np.isfinite(values[n]))[0]
            raise SolverError(f"non-finite value at t={times[n]:.4g}, node (w,x,y) index {tuple(bad)}")
    return times, values, controls


def solve_constrained_hjb(a: AgentSpec, m: MarketModel, theta: float, gs: GridSpec,
                          mesh: ControlMesh, tg: TimeGrid) -> ValueGrid:
    """Risk-sensitive value phi(w, x, y, t) of the single-agent contract problem.

    Terminal condition phi(., T) = -b; the y = 0 layer only admits gamma = zeta = 0.
    theta = 0 is delegated to the risk-neutral problem (gamma, zeta add nothing there).
    """
    gs.check_full(a.terms.S)
    if theta == 0:
        rn = solve_risk_neutral(a, m, gs, tg)
        vals = np.repeat(rn.values - a.terms.b, gs.y.n, axis=3)
        ctl = np.repeat(rn.controls, gs.y.n, axis=4)
        return ValueGrid("constrained", vals, ctl, rn.times, gs, rn.mesh, 0.0, a.terms.b, a, m, tg,
                         a.agent_id, meta=dict(rn.meta))
    terminal = np.full(gs.shape, -float(a.terms.b))
    times, values, controls = _sweep_all("constrained", theta, _kernel.REWARD_FULL, a, m, tg, gs,
                                         mesh, terminal)
    return ValueGrid("constrained", values, controls, times, gs, mesh, float(theta), float(a.terms.b),
                     a, m, tg, a.agent_id, meta=dict(mesh_size=mesh.size))


def solve_risk_neutral(a: AgentSpec, m: MarketModel, gs: GridSpec, tg: TimeGrid,
                       theta: float | None = None) -> ValueGrid:
    """max E[integral of R] over u with gamma = zeta = 0, on (t, w, x); terminal value 0.

    ``theta`` is accepted and ignored: the risk-neutral objective does not involve it.
    """
    g2 = GridSpec(gs.w, gs.x, Axis(0.0, gs.y.hi, 1), n_t=gs.n_t, cfl=gs.cfl, max_refine=gs.max_refine)
    mesh = ControlMesh.zero(a.control_set)
    times, values, controls = _sweep_all("risk_neutral", 0.0, _kernel.REWARD_FULL, a, m, tg, g2, mesh,
                                         np.zeros(g2.shape))
    return ValueGrid("risk_neutral", values, controls, times, g2, mesh, 0.0, 0.0, a, m, tg, a.agent_id)


@dataclass(eq=False)
class BaselineSolution:
    """No-contract customer optimum: value table on (t, x), nominal payoff and risk."""

    grid: ValueGrid
    b_bar: float
    S_bar: float

    @property
    def policy(self):
        from .policy import Policy
        return Policy(self.grid)


def solve_baseline_hjb(a: AgentSpec, gs: GridSpec, tg: TimeGrid,
                       market: MarketModel | None = None) -> BaselineSolution:
    """Customer maximises E[integral of r_A] alone; returns b_bar = phi_hat(x0, 0) and S_bar."""
    if market is None:
        market = MarketModel(r0=0.0, nu=0.0, sigma0=0.0, lambda0=1.0)
    g1 = GridSpec(Axis(market.w0, market.w0, 1), gs.x, Axis(0.0, max(gs.y.hi, 1.0), 1), n_t=gs.n_t,
                  cfl=gs.cfl, max_refine=gs.max_refine)
    mesh = ControlMesh.zero(a.control_set)
    quiet = MarketModel(r0=0.0, nu=market.w0, sigma0=0.0, lambda0=market.lambda0, p_alloc=market.p_alloc)
    times, values, controls = _sweep_all("baseline", 0.0, _kernel.REWARD_AGENT, a, quiet, tg, g1, mesh,
                                         np.zeros(g1.shape))
    vg = ValueGrid("baseline", values, controls, times, g1, mesh, 0.0, 0.0, a, quiet, tg, a.agent_id)
    b_bar = vg.value_at(market.w0, a.etp.x0, 0.0)
    return BaselineSolution(vg, b_bar, nominal_risk(a, tg))
