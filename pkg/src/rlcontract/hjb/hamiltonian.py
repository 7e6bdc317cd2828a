"""Pointwise evaluation of the constrained HJB Hamiltonian (used by tests and diagnostics)."""
from __future__ import annotations

import numpy as np

from ..models import (AgentSpec, MarketModel, TimeGrid, agent_running_payoff, agent_volatility,
                      etp_drift, lookup, principal_running_payoff, principal_volatility)


def running_reward(t, w, x, u, a: AgentSpec, m: MarketModel, tg: TimeGrid):
    """R = r_P + r_A, in $/h."""
    return principal_running_payoff(t, w, u, a, m, tg) + agent_running_payoff(t, x, u, a, tg)


def coefficients(t, w, x, control, a: AgentSpec, m: MarketModel, tg: TimeGrid):
    """Drift F (3,), diffusion Sigma (3, 2) and noise loading G (2,) of the (w, x, y) system."""
    u, gamma, zeta = control
    g1, g2 = gamma
    z1, z2 = zeta
    sig0 = lookup(m.sigma0, t, tg.t0, tg.t1)
    nu = lookup(m.nu, t, tg.t0, tg.t1)
    F = np.array([m.r0 * (nu - w), etp_drift(x, u, t, a.etp, tg), -(g1 * g1 + g2 * g2)], dtype=float)
    Sig = np.array([[sig0, 0.0], [0.0, 0.0], [z1, z2]], dtype=float)
    s = principal_volatility(t, w, a, tg) + agent_volatility(t, a, tg)
    G = np.array([-g1, -g2 + s], dtype=float)
    return F, Sig, G


def hamiltonian_terms(state, control, gradients, a: AgentSpec, m: MarketModel, theta: float,
                      tg: TimeGrid) -> float:
    """(F - theta Sigma G^T)^T Dphi + R - theta/2 |G|^2 - theta/2 |Sigma^T Dphi|^2 + 1/2 tr(Sigma Sigma^T D2phi).

    state = (t, w, x, y); control = (u, (gamma1, gamma2), (zeta1, zeta2));
    gradients = (Dphi with shape (3,), D2phi with shape (3, 3)) in (w, x, y) order.
    """
    t, w, x, _y = state
    D, D2 = (np.asarray(g, dtype=float) for g in gradients)
    F, Sig, G = coefficients(t, w, x, control, a, m, tg)
    R = float(running_reward(t, w, x, control[0], a, m, tg))
    drift = F - theta * Sig @ G
    StD = Sig.T @ D
    return float(drift @ D + R - 0.5 * theta * G @ G - 0.5 * theta * StD @ StD
                 + 0.5 * np.trace(Sig @ Sig.T @ D2))
