"""Estimation of the log-price model and of the load diffusion from recorded data."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
from scipy.optimize import minimize_scalar

from .models import MarketModel, TimeGrid, as_sequence

UNITS = {"usd_per_kwh": 1.0, "usd_per_mwh": 1e-3}


@dataclass(frozen=True, eq=False)
class PriceHistory:
    """Prices in $/kWh at times in hours (hour 0 is the first midnight of the record)."""

    timestamps: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.prices, dtype=float)
        if t.shape != p.shape or t.ndim != 1:
            raise ValueError("timestamps and prices must be 1-D arrays of equal length")
        if t.size < 2:
            raise ValueError("price history needs at least two observations")
        if np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise ValueError("prices must be positive and finite")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "prices", p)


@dataclass(frozen=True, eq=False)
class ConsumptionPanel:
    """Cumulative non-controlled energy (kWh) per day, shape (days, len(t))."""

    t: np.ndarray
    energy: np.ndarray
    day_ids: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        e = np.atleast_2d(np.asarray(self.energy, dtype=float))
        if e.shape[1] != t.size:
            raise ValueError("every trajectory must have one value per grid time")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("panel times must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "energy", e)

    @property
    def n_days(self) -> int:
        return self.energy.shape[0]


@dataclass(eq=False)
class CalibrationResult:
    """Point estimates, standard errors and the maximised Gaussian log-likelihood.

    For a price fit ``r0``, ``nu`` and ``sigma0`` are set (``nu``/``sigma0`` per
    seasonal bin of the day); for a load fit ``load_sigma`` is set on ``bin_edges``.
    """

    kind: str
    loglik: float
    bin_edges: np.ndarray
    r0: float | None = None
    nu: np.ndarray | None = None
    sigma0: np.ndarray | None = None
    load_sigma: np.ndarray | None = None
    se: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dict(kind=self.kind, loglik=self.loglik, bin_edges=self.bin_edges.tolist(),
                   flags=list(self.flags), se={k: np.asarray(v).tolist() for k, v in self.se.items()})
        for name in ("r0", "nu", "sigma0", "load_sigma"):
            v = getattr(self, name)
            if v is not None:
                out[name] = np.asarray(v).tolist()
        out.update(self.extra)
        return out

    def market_model(self, tg: TimeGrid, lambda0: float, p_alloc=0.0) -> MarketModel:
        """MarketModel for the contract window, sampling the daily bins at window resolution."""
        if self.kind != "ou":
            raise ValueError("not a price calibration")
        return MarketModel(r0=float(self.r0), nu=window_profile(self.nu, tg), sigma0=window_profile(self.sigma0, tg),
                           lambda0=lambda0, p_alloc=p_alloc)


def window_profile(daily_bins, tg: TimeGrid) -> np.ndarray:
    """Restrict a profile of equal bins over 24 h to the window [t0, t1] (hours of day)."""
    vals = as_sequence(daily_bins)
    width = 24.0 / vals.size
    n = tg.horizon / width
    if abs(n - round(n)) < 1e-9 and abs(tg.t0 / width - round(tg.t0 / width)) < 1e-9:
        n = int(round(n))
        mids = tg.t0 + (np.arange(n) + 0.5) * width
    else:
        mids = tg.times()[:-1] + 0.5 * tg.dt
    idx = np.floor((mids % 24.0) / width).astype(int) % vals.size
    return vals[idx].copy()


# -- price model -------------------------------------------------------------------


def _seasonal_bins(t, n_bins):
    return np.floor((np.asarray(t) % 24.0) * n_bins / 24.0).astype(int) % n_bins


def _profile(r0, w0, dw, dt, bins, n_bins):
    """Closed-form bin-wise nu, sigma0 and the Euler log-likelihood for a given r0."""
    nu = np.empty(n_bins)
    sig2 = np.empty(n_bins)
    ll = 0.0
    for b in range(n_bins):
        sel = bins == b
        d, w, h = dw[sel], w0[sel], dt[sel]
        if r0 > 0:
            nu[b] = np.sum(d + r0 * h * w) / (r0 * np.sum(h))
            e = d - r0 * h * (nu[b] - w)
        else:
            nu[b] = float(np.mean(w))
            e = d
        sig2[b] = float(np.mean(e * e / h))
        ll += -0.5 * np.sum(np.log(2 * np.pi * max(sig2[b], 1e-300) * h) + e * e / (max(sig2[b], 1e-300) * h))
    return nu, sig2, float(ll)


def _polish(r0, w0, dw, dt, bins, n_bins, r_max, iters=100):
    """Feasible GLS iterations from the bounded-search optimum to the stationary point.

    Given the bin variances, the Euler likelihood is a weighted least-squares problem in
    (r0 nu_b, r0); re-weighting until r0 stops moving removes the search tolerance.
    """
    if not 0 < r0 < r_max:
        return r0
    X = np.zeros((dw.size, n_bins + 1))
    X[np.arange(dw.size), bins] = dt
    X[:, -1] = -dt * w0
    for _ in range(iters):
        _, sig2, _ = _profile(r0, w0, dw, dt, bins, n_bins)
        if np.any(sig2 <= 0):
            return r0
        wt = 1.0 / np.sqrt(sig2[bins] * dt)
        coef = np.linalg.lstsq(X * wt[:, None], dw * wt, rcond=None)[0]
        r_new = float(coef[-1])
        if not 0 < r_new < r_max:
            return r0
        done = abs(r_new - r0) <= 1e-14 * r0
        r0 = r_new
        if done:
            break
    return r0


def fit_ou_params(h: PriceHistory, seasonal_bins: int = 24) -> CalibrationResult:
    """Maximum likelihood for dw = r0 (nu - w) dt + sigma0 dW on w = ln(price).

    For a fully observed linear Gaussian state the Kalman innovations are the one-step
    prediction errors of the Euler recursion, so the likelihood is evaluated in that
    closed form. nu and sigma0 are piecewise constant over ``seasonal_bins`` equal
    bins of the day; given r0 they are closed form, and r0 is found by a bounded
    scalar search of the profile likelihood.
    """
    if seasonal_bins < 1:
        raise ValueError("seasonal_bins must be positive")
    w = np.log(h.prices)
    t = h.timestamps
    # fit on centred log prices: a change of price unit then only moves nu
    c = float(np.mean(w))
    dw = np.diff(w)
    dt = np.diff(t)
    w0 = w[:-1] - c
    bins = _seasonal_bins(t[:-1], seasonal_bins)
    counts = np.bincount(bins, minlength=seasonal_bins)
    if counts.min() < 10:
        raise ValueError(f"need at least 10 observations per seasonal bin, smallest bin has {counts.min()}")
    edges = np.linspace(0.0, 24.0, seasonal_bins + 1)
    if np.ptp(w) < 1e-12:
        nu = np.full(seasonal_bins, w[0])
        return CalibrationResult("ou", 0.0, edges, r0=0.0, nu=nu, sigma0=np.zeros(seasonal_bins),
                                 se=dict(r0=0.0, nu=np.zeros(seasonal_bins), sigma0=np.zeros(seasonal_bins)),
                                 flags=["degenerate: constant price series"])
    r_max = 0.999 / float(dt.max())
    res = minimize_scalar(lambda r: -_profile(r, w0, dw, dt, bins, seasonal_bins)[2], bounds=(1e-8, r_max),
                          method="bounded", options=dict(xatol=1e-10))
    r0 = _polish(float(res.x), w0, dw, dt, bins, seasonal_bins, r_max)
    nu, sig2, ll = _profile(r0, w0, dw, dt, bins, seasonal_bins)
    nu = nu + c
    hstep = max(1e-6, 1e-4 * r0)
    f = [_profile(r, w0, dw, dt, bins, seasonal_bins)[2] for r in (r0 - hstep, r0, r0 + hstep)]
    curv = -(f[0] - 2 * f[1] + f[2]) / hstep ** 2
    sig = np.sqrt(sig2)
    tot_dt = np.bincount(bins, weights=dt, minlength=seasonal_bins)
    flags = []
    if r0 < 1e-6:
        flags.append("no mean reversion detected: nu is the bin mean of w")
    if r0 > 0.99 * r_max:
        flags.append("r0 at the upper search bound")
    se = dict(r0=1.0 / math.sqrt(curv) if curv > 0 else float("nan"),
              nu=sig / (max(r0, 1e-12) * np.sqrt(tot_dt)), sigma0=sig / np.sqrt(2 * counts))
    return CalibrationResult("ou", ll, edges, r0=r0, nu=nu, sigma0=sig, se=se, flags=flags)


# -- load diffusion ---------------------------------------------------------------------


def _local_level(obs, R, Q):
    """Kalman filter + RTS smoother for s_{k+1} = s_k + eta, obs_k = s_k + eps."""
    n = obs.size
    m = np.empty(n)
    P = np.empty(n)
    mp = np.empty(n)
    Pp = np.empty(n)
    mk, Pk = obs[0], R * 1e6
    ll = 0.0
    for k in range(n):
        if k > 0:
            Pk = Pk + Q
        mp[k], Pp[k] = mk, Pk
        S = Pk + R
        innov = obs[k] - mk
        ll += -0.5 * (math.log(2 * math.pi * S) + innov * innov / S) if k > 0 else 0.0
        K = Pk / S
        mk = mk + K * innov
        Pk = (1 - K) * Pk
        m[k], P[k] = mk, Pk
    ms, Ps = m.copy(), P.copy()
    for k in range(n - 2, -1, -1):
        C = P[k] / Pp[k + 1]
        ms[k] = m[k] + C * (ms[k + 1] - mp[k + 1])
        Ps[k] = P[k] + C * C * (Ps[k + 1] - Pp[k + 1])
    return ms, Ps, ll


def fit_load_diffusion(p: ConsumptionPanel, n_bins: int | None = None) -> CalibrationResult:
    """sigma~(t) from the across-day dispersion of consumption increments.

    Per step, the across-day variance of the increments divided by dt is a noisy
    reading of sigma~^2. A local-level Kalman smoother (process variance chosen by
    maximum likelihood, observation variance 2 q^2 / (days - 1)) denoises it; the
    result is averaged onto ``n_bins`` equal bins and finally rescaled by one
    constant so that the integral of sigma~^2 equals the across-day sample variance
    of total consumption.
    """
    if p.n_days < 2:
        raise ValueError("need at least two trajectories to estimate a variance")
    dt = np.diff(p.t)
    inc = np.diff(p.energy, axis=1)
    q = inc.var(axis=0, ddof=1) / dt
    total = p.energy[:, -1] - p.energy[:, 0]
    target = float(total.var(ddof=1))
    n_steps = q.size
    n_bins = n_steps if n_bins is None else int(n_bins)
    if not 1 <= n_bins <= n_steps:
        raise ValueError("n_bins must lie between 1 and the number of panel steps")
    edges = np.linspace(p.t[0], p.t[-1], n_bins + 1)
    flags = []
    scale = float(q.mean())
    # below round-off of the cumulative sums the days are identical
    if scale <= 1e-24 * max(1.0, float(np.mean(inc * inc / dt))):
        sig = np.zeros(n_bins)
        return CalibrationResult("load", 0.0, edges, load_sigma=sig, se=dict(load_sigma=np.zeros(n_bins)),
                                 flags=["zero dispersion across days"], extra=dict(target_variance=target))
    obs = q / scale
    R = 2.0 / (p.n_days - 1)
    if n_steps > 2:
        res = minimize_scalar(lambda lq: -_local_level(obs, R, R * math.exp(lq))[2], bounds=(-20.0, 5.0),
                              method="bounded")
        Q = R * math.exp(float(res.x))
    else:
        Q = R
    sm, Ps, ll = _local_level(obs, R, Q)
    s2 = np.maximum(sm, 0.0) * scale
    mids = 0.5 * (p.t[:-1] + p.t[1:])
    which = np.clip(np.searchsorted(edges, mids, side="right") - 1, 0, n_bins - 1)
    width = np.diff(edges)
    s2_bin = np.bincount(which, weights=s2 * dt, minlength=n_bins) / width
    current = float(np.sum(s2_bin * width))
    c2 = target / current if current > 0 else 0.0
    s2_bin = s2_bin * c2
    sig = np.sqrt(s2_bin)
    var_bin = np.bincount(which, weights=Ps * dt, minlength=n_bins) / width * scale * scale * c2 * c2
    with np.errstate(divide="ignore", invalid="ignore"):
        se_sig = np.where(sig > 0, np.sqrt(var_bin) / (2 * sig), 0.0)
    if c2 > 4 or (c2 > 0 and c2 < 0.25):
        flags.append(f"large variance-matching factor {c2:.3g}: increments and totals disagree")
    return CalibrationResult("load", ll, edges, load_sigma=sig, se=dict(load_sigma=se_sig), flags=flags,
                             extra=dict(target_variance=target, scale_factor=math.sqrt(c2),
                                        process_variance=Q * scale * scale))


# -- CSV ingestion -------------------------------------------------------------------


def _rows(text: str, what: str):
    rows = [r for r in csv.reader(io.StringIO(text))]
    body = [(i + 1, r) for i, r in enumerate(rows) if r and any(c.strip() for c in r)]
    if not body:
        raise ValueError(f"{what}: file is empty")
    first = body[0][1]
    try:
        float(first[-1])
        return body
    except ValueError:
        if len(body) == 1:
            raise ValueError(f"{what}: no data rows") from None
        return body[1:]


def read_price_csv(text: str, unit: str = "usd_per_mwh") -> PriceHistory:
    """Rows of (timestamp_iso8601, lmp); ``unit`` names the unit of the lmp column."""
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r}; choose from {sorted(UNITS)}")
    stamps, vals = [], []
    for ln, r in _rows(text, "price csv"):
        if len(r) < 2:
            raise ValueError(f"price csv line {ln}: expected 2 columns, got {len(r)}")
        try:
            stamps.append(datetime.fromisoformat(r[0].strip()))
            vals.append(float(r[1]))
        except ValueError as e:
            raise ValueError(f"price csv line {ln}: {e}") from None
    base = stamps[0].replace(hour=0, minute=0, second=0, microsecond=0)
    hours = np.array([(s - base).total_seconds() / 3600.0 for s in stamps])
    return PriceHistory(hours, np.array(vals) * UNITS[unit])


def read_consumption_csv(text: str) -> ConsumptionPanel:
    """Rows of (day_id, t_hours, cumulative_kwh); every day must share the same times."""
    days: dict = {}
    for ln, r in _rows(text, "consumption csv"):
        if len(r) < 3:
            raise ValueError(f"consumption csv line {ln}: expected 3 columns, got {len(r)}")
        try:
            days.setdefault(r[0].strip(), []).append((float(r[1]), float(r[2])))
        except ValueError as e:
            raise ValueError(f"consumption csv line {ln}: {e}") from None
    ids = list(days)
    arrs = [np.array(sorted(days[d])) for d in ids]
    t = arrs[0][:, 0]
    for d, a in zip(ids, arrs):
        if a.shape != arrs[0].shape or not np.allclose(a[:, 0], t):
            raise ValueError(f"consumption csv: day {d} is not on the common time grid")
    return ConsumptionPanel(t, np.stack([a[:, 1] for a in arrs]), tuple(ids))


def price_history_csv(h: PriceHistory, start: datetime, unit: str = "usd_per_mwh") -> str:
    lines = ["timestamp,lmp"]
    for t, p in zip(h.timestamps, h.prices):
        lines.append(f"{(start + timedelta(hours=float(t))).isoformat()},{p / UNITS[unit]:.10g}")
    return "\n".join(lines) + "\n"


def consumption_csv(p: ConsumptionPanel) -> str:
    lines = ["day_id,t_hours,cumulative_kwh"]
    ids = p.day_ids or tuple(str(i) for i in range(p.n_days))
    for d, row in zip(ids, p.energy):
        for t, e in zip(p.t, row):
            lines.append(f"{d},{t:.10g},{e:.10g}")
    return "\n".join(lines) + "\n"
