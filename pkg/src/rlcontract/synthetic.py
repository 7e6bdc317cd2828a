"""Synthetic stand-ins for price and consumption records, and the worked example setup."""
from __future__ import annotations

import math
from datetime import datetime

import numpy as np

from .calibrate import ConsumptionPanel, PriceHistory
from .models import MarketModel, TimeGrid
from .simulate import NoiseSource, simulate_price_paths

# hourly price levels ($/kWh) and log-price volatilities (1/sqrt(h)) of a hot summer day
PRICE_LEVELS = np.array([0.025, 0.024, 0.023, 0.023, 0.024, 0.026, 0.028, 0.030,
                         0.031, 0.032, 0.033, 0.034, 0.036, 0.040, 0.045, 0.055,
                         0.080, 0.070, 0.050, 0.042, 0.036, 0.032, 0.028, 0.026])
PRICE_VOL = np.array([0.15] * 8 + [0.3] * 8 + [0.6] * 2 + [0.3] * 6)
REVERSION = 1.0
OUTDOOR = np.array([30.0, 31.0, 32.0, 33.0, 34.0, 35.0, 35.0, 34.0])   # 10h to 18h
START = datetime(2025, 7, 1)


def synthetic_price_history(days: int = 30, dt: float = 1 / 12, seed: int = 1,
                            levels=PRICE_LEVELS, vol=PRICE_VOL, r0: float = REVERSION) -> PriceHistory:
    """Log-price OU path over ``days`` days with hourly-binned level and volatility."""
    if len(levels) != len(vol):
        raise ValueError("levels and vol need the same number of bins")
    tg = TimeGrid(0.0, 24.0 * days, dt)
    m = MarketModel(r0=r0, nu=np.tile(np.log(levels), days), sigma0=np.tile(vol, days),
                    lambda0=float(levels[0]))
    w = simulate_price_paths(m, tg, 1, NoiseSource(seed))[0]
    return PriceHistory(tg.times(), np.exp(w))


def synthetic_consumption_panel(days: int = 60, t0: float = 10.0, t1: float = 18.0, dt: float = 1 / 12,
                                load=1.0, sigma=0.4, seed: int = 2) -> ConsumptionPanel:
    """Cumulative energy of the non-controlled load: dE = l dt + sigma~ dW, one row per day."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = int(round((t1 - t0) / dt))
    t = t0 + dt * np.arange(n + 1)
    mids = t[:-1]
    l = np.broadcast_to(np.asarray(load, dtype=float), (n,)) if np.ndim(load) == 0 else \
        np.asarray(load, dtype=float)[np.minimum(((mids - t0) / (t1 - t0) * len(load)).astype(int), len(load) - 1)]
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (n,)) if np.ndim(sigma) == 0 else \
        np.asarray(sigma, dtype=float)[np.minimum(((mids - t0) / (t1 - t0) * len(sigma)).astype(int), len(sigma) - 1)]
    inc = l * dt + s * math.sqrt(dt) * rng.standard_normal((days, n))
    energy = np.concatenate([np.zeros((days, 1)), np.cumsum(inc, axis=1)], axis=1)
    return ConsumptionPanel(t, energy, tuple(f"d{d:03d}" for d in range(days)))


def worked_example_config(price_csv: str = "synthetic_prices.csv",
                          consumption_csv: str = "synthetic_consumption.csv") -> dict:
    """Run configuration of the worked example: a 10h-18h cooling contract for one house."""
    return {
        "window": {"t0": 10.0, "t1": 18.0, "dt": 0.01},
        "market": {"price_csv": price_csv, "unit": "usd_per_mwh", "seasonal_bins": 24, "p_alloc": 2.0},
        "agents": [{
            "agent_id": "house-1",
            "load_forecast": 1.0,
            "consumption_csv": consumption_csv,
            "sigma_bins": 8,
            "tariff": 0.11,
            "etp": {"alpha": 0.1, "kappa": 1.5, "theta_out": OUTDOOR.tolist(), "x0": 22.0},
            "comfort": {"omega": 0.15, "theta_lo": 20.0, "theta_hi": 22.0},
            "control_set": [0.0, 2.0],
            "terms": {"b": "baseline", "S_share": 0.1},
        }],
        "principal": {"theta": 0.01},
        "grid": {"n_w": 15, "n_x": 49, "n_y": 11, "n_t": 32},
        "simulation": {"paths": 10000, "n_record": 8, "sweep": [0.0, 0.1, 0.2, 0.3]},
        "seed": 20250701,
    }
