"""Feedback maps (t, w, x, y) -> (u, gamma, zeta) built from a solved ValueGrid."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernel
from .solver import ValueGrid, interp3

log = logging.getLogger(__name__)


@dataclass
class Controls:
    u: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray


class Policy:
    """Read-only lookup of the argmax table stored during the backward sweep.

    The mesh indices are taken at the nearest (w, x) node and at the y node just
    below the state, so the budget the policy plans with never exceeds the budget
    held. Loadings are then re-scaled at the actual (t, w). States with y <= 0
    always get gamma = zeta = 0. Coordinates outside the grid box are clamped and
    counted in ``exits``.
    """

    def __init__(self, vg: ValueGrid, use_contract: bool = True):
        self.vg = vg
        self.use_contract = use_contract and vg.kind == "constrained"
        self.lp = vg.level_params()
        mesh = vg.mesh
        self._u = np.array(mesh.u_levels)
        self._g1 = np.array(mesh.gamma1_mult)
        self._g2 = np.array(mesh.gamma2_mult)
        self._z2 = np.array(mesh.zeta2_mult) * mesh.zeta_max
        self.exits = 0

    @property
    def agent_id(self):
        return self.vg.agent_id

    def _index(self, ax, v, floor=False):
        if ax.n == 1:
            return np.zeros(np.shape(v), dtype=np.int64), np.zeros(np.shape(v), dtype=bool)
        pos = (np.asarray(v, dtype=float) - ax.lo) / ax.step
        tol = 1e-9
        out = (pos < -tol) | (pos > ax.n - 1 + tol)
        idx = np.floor(pos + tol) if floor else np.rint(pos)
        return np.clip(idx, 0, ax.n - 1).astype(np.int64), out

    def __call__(self, t, w, x, y) -> Controls:
        vg = self.vg
        t = np.asarray(t, dtype=float)
        w, x, y = (np.broadcast_to(np.asarray(v, dtype=float), np.broadcast(w, x, y).shape)
                   for v in (w, x, y))
        n = vg.level(t) * np.ones(w.shape, dtype=np.int64)
        gs = vg.grid
        i, ow = self._index(gs.w, w)
        j, ox = self._index(gs.x, x)
        k, oy = self._index(gs.y, np.maximum(y, 0.0), floor=True)
        self.exits += int(np.count_nonzero(ow | ox | oy))
        idx = vg.controls[:, n, i, j, k]
        u = self._u[idx[0]]
        zero = np.zeros(w.shape)
        if not self.use_contract:
            return Controls(u, zero, zero.copy(), zero.copy(), zero.copy())
        lp = self.lp
        live = y > 0
        g1 = np.clip(self._g1[idx[1]] * lp.g1_fac[n] * np.exp(w), -vg.mesh.gamma_cap[0], vg.mesh.gamma_cap[0])
        s = _residual(lp, n, w)
        g2 = np.clip(self._g2[idx[2]] * s, -vg.mesh.gamma_cap[1], vg.mesh.gamma_cap[1])
        z1 = (idx[3] - vg.mesh.zeta1_steps) * lp.zeta_r[n]
        z2 = self._z2[idx[4]] * (lp.zeta2_on[n] > 0)
        return Controls(u, np.where(live, g1, 0.0), np.where(live, g2, 0.0),
                        np.where(live, z1, 0.0), np.where(live, z2, 0.0))


def _residual(lp, n, w):
    mu = lp.tariff[n]
    sig = lp.load_sigma[n]
    return (mu - np.exp(w)) * sig - mu * sig


def extract_policy(vg: ValueGrid, state, return_indices: bool = False):
    """Argmax of the discrete Hamiltonian at an arbitrary state (t, w, x, y).

    phi at the next level is interpolated multilinearly at the stencil points of the
    state, and the same per-node maximisation as the sweep is applied. At grid nodes
    this reproduces the stored table exactly. Returns (u, (gamma1, gamma2), (zeta1, zeta2)),
    plus the mesh index tuple when ``return_indices`` is set.
    """
    t, w, x, y = (float(v) for v in state)
    gs = vg.grid
    for name, v in (("w", w), ("x", x), ("y", y)):
        ax = getattr(gs, name)
        if ax.n > 1 and not ax.lo - 1e-9 <= v <= ax.hi + 1e-9:
            log.warning("state %s=%g outside grid box [%g, %g]; clamped", name, v, ax.lo, ax.hi)
    w = float(np.clip(w, gs.w.lo, gs.w.hi)) if gs.w.n > 1 else w
    x = float(np.clip(x, gs.x.lo, gs.x.hi))
    y_c = float(np.clip(y, 0.0, gs.y.hi)) if gs.y.n > 1 else 0.0
    n = int(vg.level(t))
    nxt = vg.values[n + 1]
    dw = gs.w.step
    dx = gs.x.step
    dy = gs.y.step
    mesh = vg.mesh
    lp = vg.level_params()
    K = mesh.zeta1_steps

    def phi(ws, xs, ys):
        return float(interp3(nxt, gs, np.array([ws]), np.array([xs]), np.array([ys]))[0])

    wp = min(w + dw, gs.w.hi) if gs.w.n > 1 else w
    wm = max(w - dw, gs.w.lo) if gs.w.n > 1 else w
    xp, xm = min(x + dx, gs.x.hi), max(x - dx, gs.x.lo)
    yp = min(y_c + dy, gs.y.hi) if gs.y.n > 1 else y_c
    ym = max(y_c - dy, 0.0) if gs.y.n > 1 else y_c
    dp = np.empty(2 * K + 1)
    dm = np.empty(2 * K + 1)
    for k in range(-K, K + 1):
        yk = float(np.clip(y_c + k * dy, 0.0, gs.y.hi)) if gs.y.n > 1 else y_c
        dp[k + K] = phi(wp, x, yk)
        dm[k + K] = phi(wm, x, yk)
    at_zero = y <= 0 or gs.y.n == 1
    et, cf = vg.agent.etp, vg.agent.comfort
    iz = mesh.zero_indices()
    reward = _kernel.REWARD_AGENT if vg.kind == "baseline" else _kernel.REWARD_FULL
    z2_vals = np.array(mesh.zeta2_mult) * mesh.zeta_max
    res = _kernel.best_control(
        vg.theta, vg.dt, reward, phi(w, x, y_c), phi(wp, x, y_c), phi(wm, x, y_c),
        phi(w, xp, y_c), phi(w, xm, y_c), phi(w, x, yp), phi(w, x, ym), dp, dm,
        w, x, at_zero, dw, dx, dy, vg.market.r0, lp.nu[n], lp.sigma0[n], lp.load[n],
        lp.tariff[n], lp.p_alloc[n], lp.load_sigma[n], lp.theta_out[n], et.alpha, et.kappa,
        cf.omega, cf.theta_lo, cf.theta_hi, np.array(mesh.u_levels), np.array(mesh.gamma1_mult),
        lp.g1_fac[n], mesh.gamma_cap[0], np.array(mesh.gamma2_mult), mesh.gamma_cap[1],
        lp.zeta_r[n], int(lp.k_max[n]), K, z2_vals, int(lp.zeta2_on[n]), iz[0], iz[1], iz[2])
    _, iu, ig1, ig2, ik, iz2 = res
    u = mesh.u_levels[iu]
    idx = (int(iu), int(ig1), int(ig2), int(ik), int(iz2))
    if at_zero:
        out = (u, (0.0, 0.0), (0.0, 0.0))
        return out + (idx,) if return_indices else out
    g1 = float(np.clip(mesh.gamma1_mult[ig1] * lp.g1_fac[n] * np.exp(w), -mesh.gamma_cap[0], mesh.gamma_cap[0]))
    s = float(_residual(lp, n, w))
    g2 = float(np.clip(mesh.gamma2_mult[ig2] * s, -mesh.gamma_cap[1], mesh.gamma_cap[1]))
    z1 = (ik - K) * float(lp.zeta_r[n])
    z2 = float(z2_vals[iz2]) if lp.zeta2_on[n] else 0.0
    out = (u, (g1, g2), (z1, z2))
    return out + (idx,) if return_indices else out



class FixedPolicy:
    """Constant feedback (u, gamma, zeta), still honouring gamma = zeta = 0 when y <= 0."""

    def __init__(self, u: float = 0.0, gamma=(0.0, 0.0), zeta=(0.0, 0.0), agent_id: str = "agent"):
        self.u = float(u)
        self.gamma = tuple(float(g) for g in gamma)
        self.zeta = tuple(float(z) for z in zeta)
        self.agent_id = agent_id
        self.exits = 0

    def __call__(self, t, w, x, y) -> Controls:
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(w, x, y).shape
        live = np.broadcast_to(y > 0, shape)

        def fill(v):
            return np.where(live, v, 0.0)

        return Controls(np.full(shape, self.u), fill(self.gamma[0]), fill(self.gamma[1]),
                        fill(self.zeta[0]), fill(self.zeta[1]))
