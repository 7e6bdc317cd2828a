import math

import numpy as np
import pytest

from rlcontract.hjb import FixedPolicy
from rlcontract.models import (AgentSpec, ComfortParams, ContractTerms, EtpParams, MarketModel, TimeGrid,
                               agent_running_payoff, etp_drift, nominal_risk)
from rlcontract.simulate import (NoiseSource, Trace, accumulate_payoffs, replay_on_trace, simulate_closed_loop,
                                 simulate_price_paths, synthetic_trace)
from rlcontract.stats import risk_sensitive_estimate
from rlcontract.verify import verify_conditions

TG = TimeGrid(0.0, 1.0, 0.01)


def agent(sig=0.4, b=0.0, S=0.0, omega=0.15):
    return AgentSpec(1.0, sig, 0.11, EtpParams(0.1, 1.5, 30.0, 22.0), ComfortParams(omega, 20.0, 22.0),
                     (0.0, 2.0), ContractTerms(b, S))


def market(sig0=0.2, r0=1.0):
    return MarketModel(r0=r0, nu=math.log(0.05), sigma0=sig0, lambda0=0.04, p_alloc=1.0)


def same_bundle(b1, b2):
    for k in ("w", "x", "v", "y", "z", "ja", "jp", "comp", "gamma_int", "gamma_sq"):
        if not np.array_equal(getattr(b1, k), getattr(b2, k)):
            return False
    return True


# -- price paths ------------------------------------------------------------------------

def test_price_paths_noise_free_ode():
    tg = TimeGrid(0.0, 2.0, 1e-3)
    m = MarketModel(r0=0.8, nu=3.0, sigma0=0.0, lambda0=math.exp(1.0))
    w = simulate_price_paths(m, tg, 2, NoiseSource(0))
    exact = 3.0 + (1.0 - 3.0) * math.exp(-0.8 * 2.0)
    assert abs(w[0, -1] - exact) < 5 * tg.dt
    assert np.array_equal(w[0], w[1])


def test_price_paths_frozen():
    m = MarketModel(r0=0.0, nu=3.0, sigma0=0.0, lambda0=math.exp(1.5))
    w = simulate_price_paths(m, TG, 3, NoiseSource(0))
    assert np.all(w == m.w0)


def test_price_paths_reject_unstable_step():
    m = MarketModel(r0=200.0, nu=3.0, sigma0=0.1, lambda0=1.0)
    with pytest.raises(ValueError):
        simulate_price_paths(m, TG, 1, NoiseSource(0))


def test_price_paths_stationary_variance():
    tg = TimeGrid(0.0, 20.0, 0.01)
    m = MarketModel(r0=1.0, nu=0.0, sigma0=0.3, lambda0=1.0)
    w = simulate_price_paths(m, tg, 4000, NoiseSource(3))
    assert w[:, -1].var() == pytest.approx(0.09 / 2, rel=0.1)


# -- closed loop --------------------------------------------------------------------------

def test_zero_policy_noise_free_skeleton():
    a = agent(sig=0.0, b=0.4, S=0.2)
    m = market(sig0=0.0)
    bd = simulate_closed_loop(a, m, FixedPolicy(0.0), TG, 3, NoiseSource(1))
    x, ra = 22.0, 0.0
    for k in range(TG.n_steps):
        t = k * TG.dt
        ra += agent_running_payoff(t, x, 0.0, a, TG) * TG.dt
        x += etp_drift(x, 0.0, t, a.etp, TG) * TG.dt
    assert np.allclose(bd.v, 0.4 - ra, rtol=0, atol=1e-14)
    assert np.all(bd.y == 0.2)
    assert np.allclose(bd.ja, 0.4, atol=1e-14)


def test_constant_gamma_spends_budget_deterministically():
    a = agent(S=2.0)
    bd = simulate_closed_loop(a, market(), FixedPolicy(0.0, gamma=(1.0, 0.0)), TG, 100_000, NoiseSource(2))
    assert np.allclose(bd.y, 1.0, atol=1e-12)
    assert np.allclose(bd.gamma_sq, 1.0, atol=1e-12)


def test_zero_gamma_variance_is_nominal_risk():
    # without compensation the agent carries all of its own demand noise
    a = agent(sig=0.4)
    bd = simulate_closed_loop(a, market(), FixedPolicy(2.0), TG, 100_000, NoiseSource(3), with_contract=False)
    assert np.var(bd.ja, ddof=1) == pytest.approx(nominal_risk(a, TG), rel=0.05)
    # with the contract and gamma = 0 the compensation absorbs it entirely
    bc = simulate_closed_loop(a, market(), FixedPolicy(2.0), TG, 1000, NoiseSource(3))
    assert np.max(np.abs(bc.ja - a.terms.b)) < 1e-13


def test_telescoping_and_isometry_identities():
    a = agent(b=0.3, S=1.0)
    pol = FixedPolicy(2.0, gamma=(0.05, 0.03))
    bd = simulate_closed_loop(a, market(), pol, TG, 50_000, NoiseSource(4))
    # J_A - b = int gamma dW^(i), path by path
    assert np.max(np.abs(bd.ja - 0.3 - bd.gamma_int)) < 1e-13
    # martingale property
    se = bd.gamma_int.std(ddof=1) / math.sqrt(bd.n_paths)
    assert abs(bd.gamma_int.mean()) < 3 * se
    assert np.var(bd.ja, ddof=1) == pytest.approx(bd.gamma_sq.mean(), rel=0.05)


def test_reproducible_and_common_random_numbers():
    a = agent(b=0.0, S=0.5)
    pol = FixedPolicy(0.0, gamma=(0.02, 0.01))
    b1 = simulate_closed_loop(a, market(), pol, TG, 500, NoiseSource(7))
    b2 = simulate_closed_loop(a, market(), pol, TG, 500, NoiseSource(7))
    b3 = simulate_closed_loop(a, market(), pol, TG, 500, NoiseSource(8))
    assert same_bundle(b1, b2)
    assert not same_bundle(b1, b3)
    # the market stream is shared by agents, the demand stream is not
    other = simulate_closed_loop(a, market(), pol, TG, 500, NoiseSource(7, stream_id=1))
    assert np.array_equal(other.w, b1.w)
    assert not np.array_equal(other.z, b1.z)


def test_baseline_mode_pays_nothing():
    bd = simulate_closed_loop(agent(), market(), FixedPolicy(2.0), TG, 200, NoiseSource(5), with_contract=False)
    assert np.all(bd.comp == 0)
    assert np.allclose(bd.ja, bd.ra_int + bd.sa_int)


def test_record_and_terminal_state():
    bd = simulate_closed_loop(agent(S=0.1), market(), FixedPolicy(2.0), TG, 50, NoiseSource(5), n_record=4)
    assert bd.record["x"].shape == (4, TG.n_steps + 1)
    st = bd.terminal(2)
    assert st.x == bd.x[2] and st.y == bd.y[2]
    csv = bd.to_csv(max_export=3)
    assert csv.splitlines()[0].startswith("path") and len({l.split(",")[0] for l in csv.splitlines()[1:]}) == 3


def test_no_paths_is_an_error():
    with pytest.raises(ValueError):
        simulate_closed_loop(agent(), market(), FixedPolicy(), TG, 0, NoiseSource(1))


# -- replay -------------------------------------------------------------------------------

def test_replay_of_synthetic_trace_is_bit_identical():
    a = agent(b=0.1, S=0.3)
    pol = FixedPolicy(2.0, gamma=(0.03, 0.02), zeta=(0.01, -0.01))
    n = 64
    tr = synthetic_trace(a, market(), TG, n, NoiseSource(11))
    b1 = simulate_closed_loop(a, market(), pol, TG, n, NoiseSource(11))
    b2 = replay_on_trace(a, market(), pol, TG, tr)
    assert same_bundle(b1, b2)
    # the bundle's own record reproduces the path it came from
    b3 = replay_on_trace(a, market(), pol, TG, b1.trace(0))
    assert b3.ja[0] == b1.ja[0] and b3.v[0] == b1.v[0]


def test_replay_zero_increments_is_skeleton():
    a = agent(b=0.2, S=0.3)
    m = market()
    tr = Trace(TG.times()[:-1], np.zeros((2, TG.n_steps)), np.zeros((2, TG.n_steps)))
    bd = replay_on_trace(a, m, FixedPolicy(0.0, gamma=(0.1, 0.1)), TG, tr)
    assert bd.ja[0] == bd.ja[1] and bd.v[0] == bd.v[1] and bd.y[0] == bd.y[1]
    # a flat log price is a deterministic (not zero) W0 path once the drift is removed
    assert bd.ja[0] == pytest.approx(0.2 + bd.gamma_int[0], abs=1e-14)
    assert np.all(bd.z == bd.z[0])
    still = replay_on_trace(a, m, FixedPolicy(0.0), TG, tr)
    assert np.all(np.abs(still.ja - 0.2) < 1e-14)
    assert bd.meta["replay"]["risk_violation"] is False


def test_replay_short_trace_error():
    tr = Trace(np.arange(10) * 0.01, np.zeros((1, 10)), np.zeros((1, 10)))
    with pytest.raises(ValueError, match="steps"):
        replay_on_trace(agent(), market(), FixedPolicy(), TG, tr)


def test_replay_scaled_trace_flags_violation():
    g = 0.05
    a = agent(sig=0.4, b=0.0, S=1.01 * g * g)
    pol = FixedPolicy(2.0, gamma=(0.0, g))
    tr = synthetic_trace(a, market(), TG, 4000, NoiseSource(12))
    ok = replay_on_trace(a, market(), pol, TG, tr)
    bad = replay_on_trace(a, market(), pol, TG, tr.scaled(1.5))
    assert ok.meta["replay"]["predicted_var_ja"] == pytest.approx(g * g, rel=1e-9)
    rep = bad.meta["replay"]
    assert rep["var_ja"] > rep["predicted_var_ja"]
    assert rep["risk_violation"] is True and rep["violation_pct"] > 50
    assert not verify_conditions(bad, a.terms).check("risk_limit_var_ja").passed


def test_trace_csv_round_trip_and_errors():
    tr = synthetic_trace(agent(), market(), TG, 2, NoiseSource(1))
    back = Trace.from_csv(tr.to_csv())
    assert np.array_equal(back.dw, tr.dw) and np.array_equal(back.dev, tr.dev)
    with pytest.raises(ValueError, match="line 3"):
        Trace.from_csv("t,d_logprice_increment,d_demand_deviation\n0,0.1,0.2\n0.01,abc,0.1\n")
    with pytest.raises(ValueError):
        Trace.from_csv("")


# -- payoff summaries ---------------------------------------------------------------------

def test_accumulate_payoffs_summary():
    bd = simulate_closed_loop(agent(), market(), FixedPolicy(2.0), TG, 1000, NoiseSource(2))
    s = accumulate_payoffs(bd, 0.01)
    assert s["mean_jp"] == pytest.approx(bd.jp.mean())
    assert s["var_jp"] == pytest.approx(bd.jp.var(ddof=1))
    assert s["rs_jp"] <= s["mean_jp"]
    assert s["rs_jp"] == pytest.approx(s["mean_jp"] - 0.005 * s["var_jp"], abs=1e-6)


def test_risk_sensitive_estimate_examples():
    assert risk_sensitive_estimate(np.full(100, 3.5), 0.7) == 3.5
    assert risk_sensitive_estimate(np.full(100, -2.0), -1.0) == pytest.approx(-2.0)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 10_000)
    assert risk_sensitive_estimate(x, 1e-6) == pytest.approx(x.mean(), abs=1e-4)
    # a huge exponent does not overflow
    assert math.isfinite(risk_sensitive_estimate(np.array([-1e4, 0.0, 1e4]), 1.0))
    with pytest.raises(ValueError):
        risk_sensitive_estimate(x, 0.0)
    with pytest.raises(ValueError):
        risk_sensitive_estimate([], 1.0)


def test_risk_sensitive_standard_normal():
    x = np.random.default_rng(1).standard_normal(1_000_000)
    ce, se = risk_sensitive_estimate(x, 1.0, return_se=True)
    assert abs(ce + 0.5) < 3 * se
