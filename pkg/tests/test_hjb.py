import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import bf_instance, enumerate_best, noise_instance
from rlcontract.hjb import (Axis, ControlMesh, GridSpec, Policy, SolverError, ValueGrid, default_grid,
                            default_mesh, extract_policy, hamiltonian_terms, running_reward,
                            solve_baseline_hjb, solve_constrained_hjb, solve_risk_neutral)
from rlcontract.models import (AgentSpec, ComfortParams, ContractTerms, EtpParams, MarketModel, TimeGrid,
                               agent_volatility, principal_volatility)


def y_monotone(vg):
    d = np.diff(vg.values, axis=3)
    return d.min() >= -1e-12 * (1.0 + np.abs(vg.values).max())


# -- brute-force oracle -------------------------------------------------------------------

def test_constrained_matches_enumeration():
    a, m, tg, gs = bf_instance()
    vg = solve_constrained_hjb(a, m, 1e-2, gs, default_mesh(a, m, tg, gs), tg)
    best, seq = enumerate_best(a, m, tg)
    assert len(set(seq)) == 2   # the optimum switches control
    assert abs(vg.value_at(m.w0, a.etp.x0, a.terms.S) - (best - a.terms.b)) < 1e-6
    assert np.all(vg.values[-1] == -a.terms.b)
    assert y_monotone(vg)


def test_risk_neutral_matches_enumeration_and_ignores_theta():
    a, m, tg, gs = bf_instance()
    rn = solve_risk_neutral(a, m, gs, tg)
    best, _ = enumerate_best(a, m, tg)
    assert abs(rn.value_at(m.w0, a.etp.x0) - best) < 1e-9
    again = solve_risk_neutral(a, m, gs, tg, theta=5.0)
    assert np.array_equal(again.values, rn.values)


def test_baseline_matches_enumeration():
    a, m, tg, gs = bf_instance(omega=0.15)
    bl = solve_baseline_hjb(a, gs, tg, m)
    best, seq = enumerate_best(a, m, tg, principal=False)
    assert len(set(seq)) == 2
    assert abs(bl.b_bar - best) < 1e-9
    assert bl.S_bar == 0.0


# -- analytic cases -----------------------------------------------------------------------

def test_pure_noise_offloads_variance():
    theta, T = 1.0, 1.0
    a, m, tg = noise_instance(S=3.0)
    s = float(principal_volatility(0.0, m.w0, a, tg) + agent_volatility(0.0, a, tg))
    assert s == pytest.approx(-1.0)
    gs = default_grid(a, m, tg, n_w=3, n_x=5, n_y=11)
    vg = solve_constrained_hjb(a, m, theta, gs, default_mesh(a, m, tg, gs), tg)
    b = a.terms.b
    assert vg.value_at(m.w0, 21.0, 3.0) == pytest.approx(-b, abs=1e-3 * abs(b) + 1e-3)
    u, gamma, zeta = extract_policy(vg, (0.0, m.w0, 21.0, 3.0))
    assert gamma[1] == pytest.approx(s)
    assert y_monotone(vg)


def test_pure_noise_zero_share():
    a, m, tg = noise_instance(S=0.0)
    gs = default_grid(a, m, tg, n_w=3, n_x=5, n_y=11)
    vg = solve_constrained_hjb(a, m, 1.0, gs, default_mesh(a, m, tg, gs), tg)
    target = -1.0 - 0.5 * 1.0 * 1.0
    assert vg.value_at(m.w0, 21.0, 0.0) == pytest.approx(target, abs=1e-3 * 1.0 + 1e-3)
    assert extract_policy(vg, (0.0, m.w0, 21.0, 0.0))[1:] == ((0.0, 0.0), (0.0, 0.0))


def flat_agent(omega=0.0, sig=0.0, S=0.2, b=0.1):
    return AgentSpec(1.0, sig, 0.11, EtpParams(0.1, 1.5, 30.0, 22.0), ComfortParams(omega, 20.0, 22.0),
                     (0.0, 1.0, 2.0), ContractTerms(b, S))


def test_monotone_payoff_picks_lowest_control():
    tg = TimeGrid(0.0, 2.0, 0.01)
    a = flat_agent()
    m = MarketModel(r0=0.0, nu=math.log(0.05), sigma0=0.0, lambda0=0.05, p_alloc=1.0)
    gs = default_grid(a, m, tg, n_w=3, n_x=9, n_y=3)
    vg = solve_constrained_hjb(a, m, 1e-4, gs, default_mesh(a, m, tg, gs), tg)
    # r_A + r_P = -e^w (l + u) + e^w p: strictly decreasing in u
    expected = -a.terms.b + (-0.05 * 1.0 + 0.05 * 1.0) * 2.0
    assert vg.value_at(m.w0, 22.0, 0.2) == pytest.approx(expected, abs=1e-9)
    assert np.all(vg.controls[0] == 0)
    bl = solve_baseline_hjb(a, gs, tg, m)
    assert bl.b_bar == pytest.approx(-0.11 * 1.0 * 2.0, abs=1e-12)
    assert np.all(bl.grid.controls[0] == 0)


def test_risk_neutral_value_independent_of_w():
    tg = TimeGrid(0.0, 1.0, 0.01)
    a = flat_agent(omega=0.15)
    m = MarketModel(r0=1.0, nu=math.log(0.05), sigma0=0.2, lambda0=0.05, p_alloc=0.0)
    # no load and a single control level: R carries no price term
    a = AgentSpec(0.0, 0.0, 0.11, a.etp, a.comfort, (0.0,), a.terms)
    gs = default_grid(a, m, tg, n_w=9, n_x=9, n_y=3)
    rn = solve_risk_neutral(a, m, gs, tg)
    spread = np.ptp(rn.values[0], axis=0)
    assert spread.max() < 1e-12


def test_theta_consistency_with_zero_mesh():
    tg = TimeGrid(0.0, 2.0, 0.01)
    a = flat_agent(omega=0.15, sig=0.3)
    m = MarketModel(r0=1.0, nu=np.log([0.04, 0.08]), sigma0=0.2, lambda0=0.05, p_alloc=1.0)
    gs = default_grid(a, m, tg, n_w=7, n_x=13, n_y=3)
    zero = ControlMesh.zero(a.control_set)
    target = solve_risk_neutral(a, m, gs, tg)
    gaps = []
    for theta in (1e-1, 1e-2, 1e-3):
        vg = solve_constrained_hjb(a, m, theta, replace(gs, n_t=target.n_levels), zero, tg)
        assert vg.n_levels == target.n_levels
        gaps.append(target.value_at(m.w0, 22.0) - a.terms.b - vg.value_at(m.w0, 22.0, a.terms.S))
    assert gaps[0] > gaps[1] > gaps[2] >= -1e-12
    assert gaps[2] < 1e-2 * gaps[0] * 1.5


def test_enlarging_meshes_never_lowers_value():
    a, m, tg = noise_instance(S=1.0)
    a = AgentSpec(a.load_forecast, a.load_sigma, a.tariff, EtpParams(0.3, 1.0, 25.0, 21.0),
                  ComfortParams(0.2, 20.0, 22.0), (0.0,), a.terms)
    gs = default_grid(a, m, tg, n_w=3, n_x=9, n_y=7)
    small = default_mesh(a, m, tg, gs, gamma2_mult=(0.0, 0.5))
    big = default_mesh(a, m, tg, gs, gamma2_mult=(0.0, 0.5, 1.0))
    lv = max(solve_constrained_hjb(a, m, 1.0, gs, mesh, tg).n_levels for mesh in (small, big))
    g = replace(gs, n_t=lv, max_refine=1)
    v_small = solve_constrained_hjb(a, m, 1.0, g, small, tg).values
    v_big = solve_constrained_hjb(a, m, 1.0, g, big, tg).values
    assert np.all(v_big >= v_small - 1e-12)
    a2 = AgentSpec(a.load_forecast, a.load_sigma, a.tariff, a.etp, a.comfort, (0.0, 1.0), a.terms)
    v_more_u = solve_constrained_hjb(a2, m, 1.0, g, replace(small, u_levels=(0.0, 1.0)), tg).values
    assert np.all(v_more_u >= v_small - 1e-12)


# -- policy -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_problem():
    tg = TimeGrid(0.0, 2.0, 0.01)
    a = flat_agent(omega=0.15, sig=0.4, S=0.05, b=0.0)
    m = MarketModel(r0=1.0, nu=np.log([0.04, 0.1]), sigma0=0.3, lambda0=0.05, p_alloc=1.0)
    gs = default_grid(a, m, tg, n_w=7, n_x=13, n_y=5)
    vg = solve_constrained_hjb(a, m, 0.1, gs, default_mesh(a, m, tg, gs), tg)
    return a, m, tg, gs, vg


def test_extract_policy_reproduces_table_at_nodes(small_problem):
    a, m, tg, gs, vg = small_problem
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.integers(vg.n_levels))
        i, j, k = (int(rng.integers(ax.n)) for ax in (gs.w, gs.x, gs.y))
        state = (float(vg.times[n]), gs.w.points()[i], gs.x.points()[j], gs.y.points()[k])
        *_, idx = extract_policy(vg, state, return_indices=True)
        assert idx == tuple(int(c) for c in vg.controls[:, n, i, j, k])


def test_policy_lookup_matches_extract_at_nodes(small_problem):
    a, m, tg, gs, vg = small_problem
    pol = Policy(vg)
    n, i, j, k = 3, 2, 5, 3
    t = float(vg.times[n])
    w, x, y = gs.w.points()[i], gs.x.points()[j], gs.y.points()[k]
    c = pol(np.array([t]), np.array([w]), np.array([x]), np.array([y]))
    u, gamma, zeta = extract_policy(vg, (t, w, x, y))
    assert c.u[0] == u
    assert c.gamma1[0] == pytest.approx(gamma[0]) and c.gamma2[0] == pytest.approx(gamma[1])
    assert c.zeta1[0] == pytest.approx(zeta[0]) and c.zeta2[0] == pytest.approx(zeta[1])


def test_policy_zero_loadings_without_budget(small_problem):
    a, m, tg, gs, vg = small_problem
    pol = Policy(vg)
    w = np.linspace(gs.w.lo, gs.w.hi, 5)
    c = pol(0.5, w, np.full(5, 22.0), np.array([0.0, -0.01, -1.0, 0.0, -1e-9]))
    for arr in (c.gamma1, c.gamma2, c.zeta1, c.zeta2):
        assert np.all(arr == 0)
    for y in (0.0, -0.2):
        assert extract_policy(vg, (0.5, m.w0, 22.0, y))[1:] == ((0.0, 0.0), (0.0, 0.0))


def test_policy_counts_box_exits(small_problem):
    a, m, tg, gs, vg = small_problem
    pol = Policy(vg)
    pol(0.0, np.array([gs.w.hi + 1.0, m.w0]), np.array([22.0, 22.0]), np.array([0.01, 0.01]))
    assert pol.exits == 1


def test_symmetric_instance_has_zero_gamma1():
    # no load, no allocation, no load noise and cooling off: R and phi do not depend on w,
    # so gamma_1 only adds penalty
    tg = TimeGrid(0.0, 1.0, 0.01)
    a = AgentSpec(0.0, 0.0, 0.11, EtpParams(0.1, 1.5, 30.0, 22.0), ComfortParams(0.15, 20.0, 22.0),
                  (0.0,), ContractTerms(0.0, 0.5))
    m = MarketModel(r0=0.5, nu=math.log(0.05), sigma0=0.3, lambda0=0.05, p_alloc=0.0)
    gs = default_grid(a, m, tg, n_w=5, n_x=9, n_y=5)
    vg = solve_constrained_hjb(a, m, 1.0, gs, default_mesh(a, m, tg, gs), tg)
    assert np.ptp(vg.values[0], axis=0).max() < 1e-12
    for w in gs.w.points():
        u, gamma, zeta = extract_policy(vg, (0.0, w, 21.0, 0.25))
        assert gamma == (0.0, 0.0)


def test_baseline_policy_cycles_near_upper_band(worked):
    """The no-contract optimum holds the house near the top of the comfort band."""
    from rlcontract.simulate import NoiseSource, simulate_closed_loop
    a, m, tg, base = worked["agent"], worked["market"], worked["tg"], worked["baseline"]
    bd = simulate_closed_loop(a, m, base.policy, tg, 4, NoiseSource(1), with_contract=False, n_record=1)
    x = bd.record["x"][0, tg.n_steps // 4:]
    u = bd.record["u"][0]
    assert 21.0 < x.mean() < 22.5
    assert 0 < np.count_nonzero(u) < u.size
    *_, idx = extract_policy(base.grid, (tg.t0, m.w0, base.grid.grid.x.points()[10], 0.0), return_indices=True)
    assert idx[0] == base.grid.controls[0, 0, 0, 10, 0]


# -- hamiltonian --------------------------------------------------------------------------

def test_hamiltonian_examples():
    tg = TimeGrid(0.0, 1.0, 0.01)
    a = flat_agent(omega=0.15, sig=0.4)
    m = MarketModel(r0=1.0, nu=math.log(0.05), sigma0=0.2, lambda0=0.05, p_alloc=1.0)
    state = (0.2, math.log(0.06), 21.0, 0.1)
    s = float(principal_volatility(0.2, state[1], a, tg) + agent_volatility(0.2, a, tg))
    R = float(running_reward(0.2, state[1], 21.0, 1.0, a, m, tg))
    zero_grad = (np.zeros(3), np.zeros((3, 3)))
    theta = 0.5
    h0 = hamiltonian_terms(state, (1.0, (0.0, 0.0), (0.0, 0.0)), zero_grad, a, m, theta, tg)
    assert h0 == pytest.approx(R - 0.5 * theta * s * s)
    h_off = hamiltonian_terms(state, (1.0, (0.0, s), (0.0, 0.0)), zero_grad, a, m, theta, tg)
    # gamma = (0, sigma_P + sigma_A) gives G = 0: the offloading control pays no penalty
    assert h_off == pytest.approx(R)
    # theta -> 0, gamma = zeta = 0: the risk-neutral generator
    D = np.array([0.3, -0.2, 0.7])
    D2 = np.diag([0.5, 0.1, 0.2])
    F_w = m.r0 * (math.log(0.05) - state[1])
    F_x = 0.1 * (30.0 - 21.0) - 1.5 * 1.0
    h_rn = hamiltonian_terms(state, (1.0, (0.0, 0.0), (0.0, 0.0)), (D, D2), a, m, 0.0, tg)
    assert h_rn == pytest.approx(F_w * 0.3 + F_x * -0.2 + R + 0.5 * 0.2 ** 2 * 0.5)


# -- numerics and storage -----------------------------------------------------------------

def test_cfl_cap_raises():
    a, m, tg, gs = bf_instance()
    tight = GridSpec(gs.w, Axis(40.0, 60.0, 401), gs.y, n_t=8, max_refine=1)
    with pytest.raises(SolverError, match="CFL"):
        solve_constrained_hjb(a, m, 1e-2, tight, default_mesh(a, m, tg, tight), tg)


def test_nan_detection():
    a, m, tg, gs = bf_instance()
    bad = AgentSpec(a.load_forecast, a.load_sigma, np.full(8, 1e308), a.etp, a.comfort, a.control_set, a.terms)
    with pytest.raises(SolverError, match="non-finite"):
        solve_risk_neutral(bad, m, gs, tg)


def test_grid_validation():
    a, m, tg, gs = bf_instance()
    with pytest.raises(ValueError):
        solve_constrained_hjb(a, m, 1e-2, replace(gs, y=Axis(0.0, 0.1, 3)), default_mesh(a, m, tg, gs), tg)
    with pytest.raises(ValueError):
        GridSpec(gs.w, gs.x, Axis(0.1, 1.0, 3))
    with pytest.raises(ValueError):
        ControlMesh(u_levels=(0.0,), gamma1_mult=(0.5, 1.0))


def test_value_grid_binary_round_trip(small_problem):
    vg = small_problem[4]
    arr = ValueGrid.read_arrays(vg.to_bytes())
    assert np.array_equal(arr["values"], vg.values)
    assert np.array_equal(arr["controls"], vg.controls)
    assert np.array_equal(arr["times"], vg.times)
    assert arr["theta"] == vg.theta and arr["b"] == vg.b
    with pytest.raises(ValueError):
        ValueGrid.read_arrays(b"nonsense" + vg.to_bytes()[8:])
    assert vg.slice_csv(0).startswith("w,")
