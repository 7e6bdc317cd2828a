"""Compiled per-node maximisation for the explicit backward sweep.

The scheme is a monotone Markov-chain approximation written in log form: for a fixed
control c with transition probabilities p_j (upwind drift, lattice diffusion),

    phi(node) = max_c  R dt - (theta/2)|G|^2 dt - (1/theta) log sum_j p_j exp(-theta phi_j)

where the chain drift is F - theta Sigma G^T.  Expanding the log-sum-exp recovers the
-(theta/2)|Sigma^T D phi|^2 term, so no explicit gradient nonlinearity is needed and
the update stays monotone.  theta == 0 reduces to the linear expectation.
"""
import math

import numpy as np
from numba import njit

REWARD_FULL = 0      # R = r_P + r_A
REWARD_AGENT = 1     # r_A only (no-contract baseline)


@njit(cache=True)
def _tr(theta, v, phi0):
    if theta == 0.0:
        return v - phi0
    return math.expm1(-theta * (v - phi0))


@njit(cache=True)
def best_control(theta, dt, reward_kind,
                 phi0, wp, wm, xp, xm, yp, ym, dp, dm,
                 w, x, at_zero, dw, dx, dy,
                 r0, nu, sig0, load, tariff, p, sigt, th_out,
                 alpha, kappa, omega, th_lo, th_hi,
                 u_levels, g1_mult, g1_fac, g1_cap, g2_mult, g2_cap,
                 zeta_r, k_max, K, z2_vals, zeta2_on, iz_g1, iz_g2, iz_z2):
    ew = math.exp(w)
    comfort = -omega * (max(x - th_hi, 0.0) + max(th_lo - x, 0.0))
    s = (tariff - ew) * sigt - tariff * sigt

    e_wp = _tr(theta, wp, phi0)
    e_wm = _tr(theta, wm, phi0)
    e_xp = _tr(theta, xp, phi0)
    e_xm = _tr(theta, xm, phi0)
    e_yp = _tr(theta, yp, phi0)
    e_ym = _tr(theta, ym, phi0)

    nu_ = u_levels.size
    R = np.empty(nu_)
    X = np.empty(nu_)
    em_a = np.empty(nu_)
    for iu in range(nu_):
        u = u_levels[iu]
        r_a = -tariff * (load + u) + comfort
        if reward_kind == REWARD_FULL:
            R[iu] = (tariff - ew) * (u + load) + ew * p + r_a
        else:
            R[iu] = r_a
        f = alpha * (th_out - x) - kappa * u
        X[iu] = dt * (max(f, 0.0) * e_xp + max(-f, 0.0) * e_xm) / dx

    if at_zero:
        g1_lo, g1_hi = iz_g1, iz_g1 + 1
        g2_lo, g2_hi = iz_g2, iz_g2 + 1
        kk = 0
        z_lo, z_hi = iz_z2, iz_z2 + 1
    else:
        g1_lo, g1_hi = 0, g1_mult.size
        g2_lo, g2_hi = 0, g2_mult.size
        kk = k_max
        if zeta2_on:
            z_lo, z_hi = 0, z2_vals.size
        else:
            z_lo, z_hi = iz_z2, iz_z2 + 1

    diff_w = dt * sig0 * sig0 / (2.0 * dw * dw)
    best = -np.inf
    best_q = 0.0
    b_iu = 0
    b_g1 = iz_g1
    b_g2 = iz_g2
    b_k = K
    b_z = iz_z2
    for ig1 in range(g1_lo, g1_hi):
        g1 = g1_mult[ig1] * g1_fac * ew
        if g1 > g1_cap:
            g1 = g1_cap
        elif g1 < -g1_cap:
            g1 = -g1_cap
        bw = r0 * (nu - w) + theta * sig0 * g1
        Wg = dt * (max(bw, 0.0) * e_wp + max(-bw, 0.0) * e_wm) / dw
        for ig2 in range(g2_lo, g2_hi):
            g2 = g2_mult[ig2] * s
            if g2 > g2_cap:
                g2 = g2_cap
            elif g2 < -g2_cap:
                g2 = -g2_cap
            G1 = -g1
            G2 = -g2 + s
            gg = g1 * g1 + g2 * g2
            GG = G1 * G1 + G2 * G2
            if theta != 0.0:
                for iu in range(nu_):
                    em_a[iu] = math.expm1(-theta * (R[iu] - 0.5 * theta * GG) * dt)
            for k in range(-kk, kk + 1):
                z1 = k * zeta_r
                if diff_w > 0.0:
                    dg = diff_w * (_tr(theta, dp[k + K], phi0) + _tr(theta, dm[K - k], phi0))
                else:
                    dg = 0.0
                for iz in range(z_lo, z_hi):
                    z2 = z2_vals[iz]
                    by = -gg - theta * (z1 * G1 + z2 * G2)
                    Y = dt * (max(by, 0.0) * e_yp + max(-by, 0.0) * e_ym) / dy
                    if z2 != 0.0:
                        Y += dt * z2 * z2 / (2.0 * dy * dy) * (e_yp + e_ym)
                    if diff_w == 0.0 and z1 != 0.0:
                        Y += dt * z1 * z1 / (2.0 * dy * dy) * (e_yp + e_ym)
                    base = Wg + dg + Y
                    for iu in range(nu_):
                        sig = base + X[iu]
                        if theta == 0.0:
                            score = R[iu] * dt + sig
                            q = score
                        else:
                            q = em_a[iu] * (1.0 + sig) + sig
                            score = -q / theta
                        if score != score:
                            # let the caller report the node instead of skipping the control
                            return math.nan, iu, ig1, ig2, k + K, iz
                        if score > best:
                            best = score
                            best_q = q
                            b_iu = iu
                            b_g1 = ig1
                            b_g2 = ig2
                            b_k = k + K
                            b_z = iz
    if theta == 0.0:
        value = phi0 + best_q
    else:
        value = phi0 - math.log1p(best_q) / theta
    return value, b_iu, b_g1, b_g2, b_k, b_z


@njit(cache=True)
def sweep(theta, dt, reward_kind, phi_next, phi_out, idx_out, wg, xg, yg, dw, dx, dy,
          r0, nu, sig0, load, tariff, p, sigt, th_out, alpha, kappa, omega, th_lo, th_hi,
          u_levels, g1_mult, g1_fac, g1_cap, g2_mult, g2_cap,
          zeta_r, k_max, K, z2_vals, zeta2_on, iz_g1, iz_g2, iz_z2):
    nw, nx, ny = phi_next.shape
    dp = np.empty(2 * K + 1)
    dm = np.empty(2 * K + 1)
    for i in range(nw):
        ip = min(i + 1, nw - 1)
        im = max(i - 1, 0)
        for jx in range(nx):
            xp_ = min(jx + 1, nx - 1)
            xm_ = max(jx - 1, 0)
            for jy in range(ny):
                for k in range(-K, K + 1):
                    dp[k + K] = phi_next[ip, jx, min(max(jy + k, 0), ny - 1)]
                    dm[k + K] = phi_next[im, jx, min(max(jy + k, 0), ny - 1)]
                # dm is indexed by the y offset of the backward move: dm[K - k] <-> y - k
                res = best_control(
                    theta, dt, reward_kind, phi_next[i, jx, jy],
                    phi_next[ip, jx, jy], phi_next[im, jx, jy],
                    phi_next[i, xp_, jy], phi_next[i, xm_, jy],
                    phi_next[i, jx, min(jy + 1, ny - 1)], phi_next[i, jx, max(jy - 1, 0)],
                    dp, dm, wg[i], xg[jx], jy == 0, dw, dx, dy,
                    r0, nu, sig0, load, tariff, p, sigt, th_out,
                    alpha, kappa, omega, th_lo, th_hi,
                    u_levels, g1_mult, g1_fac, g1_cap, g2_mult, g2_cap,
                    zeta_r, k_max, K, z2_vals, zeta2_on, iz_g1, iz_g2, iz_z2)
                phi_out[i, jx, jy] = res[0]
                idx_out[0, i, jx, jy] = res[1]
                idx_out[1, i, jx, jy] = res[2]
                idx_out[2, i, jx, jy] = res[3]
                idx_out[3, i, jx, jy] = res[4]
                idx_out[4, i, jx, jy] = res[5]
