"""Monte Carlo checks of the contract guarantees and comparison with the no-contract baseline."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ContractTerms
from .simulate import TrajectoryBundle, accumulate_payoffs
from .stats import mean_se, risk_sensitive_estimate, var_diff_se, var_se

__all__ = ["Tolerances", "Check", "VerificationReport", "verify_conditions", "compare_to_baseline",
           "risk_sensitive_estimate"]


@dataclass(frozen=True)
class Tolerances:
    """tol_var: relative slack on the variance bound; se_band: standard errors added to it;
    tol_y: relative (to S) depth below zero that counts as a budget violation;
    tol_frac: allowed fraction of such paths; mean_se: band for the participation check."""

    tol_var: float = 0.05
    se_band: float = 3.0
    tol_y: float = 1e-6
    tol_frac: float = 0.01
    mean_se: float = 3.0


@dataclass
class Check:
    name: str
    estimate: float
    se: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass(eq=False)
class VerificationReport:
    checks: list
    summary: dict
    baseline: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return dict(passed=self.passed, checks=[asdict(c) for c in self.checks], summary=self.summary,
                    baseline=self.baseline, notes=list(self.notes))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["quantity", "estimate", "se", "threshold", "passed"])
        for c in self.checks:
            wr.writerow([c.name, repr(c.estimate), repr(c.se), repr(c.threshold), int(c.passed)])
        for k, v in sorted(self.summary.items()):
            wr.writerow([k, repr(v), "", "", ""])
        for k, v in sorted(self.baseline.items()):
            if isinstance(v, (int, float)):
                wr.writerow([f"baseline.{k}", repr(v), "", "", ""])
        return buf.getvalue()


def verify_conditions(bundle: TrajectoryBundle, terms: ContractTerms, tol: Tolerances = Tolerances(),
                      theta: float = 0.0) -> VerificationReport:
    """Participation payoff, risk limit and terminal budget checks on a simulated bundle."""
    n = bundle.n_paths
    if n < 100:
        raise ValueError(f"verification needs at least 100 paths, got {n}")
    b, S = terms.b, terms.S
    m, m_se = mean_se(bundle.ja)
    v, v_se = var_se(bundle.ja)
    roundoff = 1e-9 * (1.0 + abs(b))
    mean_ok = abs(m - b) <= tol.mean_se * m_se + roundoff
    var_thr = S * (1 + tol.tol_var) + tol.se_band * v_se
    var_ok = v <= var_thr + 1e-12 * (1 + S)
    depth = tol.tol_y * S
    frac = float(np.count_nonzero(bundle.y < -depth)) / n
    checks = [
        Check("participation_mean_ja", m, m_se, b, mean_ok,
              f"|mean - b| = {abs(m - b):.3g} vs {tol.mean_se:g} SE = {tol.mean_se * m_se:.3g}"),
        Check("risk_limit_var_ja", v, v_se, var_thr, var_ok,
              f"S = {S:.6g}, slack {tol.tol_var:.0%} + {tol.se_band:g} SE"),
        Check("budget_y_terminal", frac, math.sqrt(frac * (1 - frac) / n), tol.tol_frac, frac <= tol.tol_frac,
              f"paths with y_T < -{depth:.3g}"),
    ]
    summary = accumulate_payoffs(bundle, theta)
    summary["mean_gamma_sq"] = float(bundle.gamma_sq.mean())
    summary["min_y_terminal"] = float(bundle.y.min())
    summary["box_exits"] = int(bundle.exits)
    return VerificationReport(checks, summary)


def compare_to_baseline(contract_bundle: TrajectoryBundle, baseline_bundle: TrajectoryBundle,
                        theta: float) -> dict:
    """Variance of J_P with and without the contract, risk reduction and mean-payoff delta."""
    notes = []
    same = (contract_bundle.meta.get("seed") == baseline_bundle.meta.get("seed")
            and contract_bundle.n_paths == baseline_bundle.n_paths)
    if not same:
        warnings.warn("bundles were not driven by the same seeds; the comparison is valid but noisier")
        notes.append("seed mismatch")
    vc, vc_se = var_se(contract_bundle.jp)
    vb, vb_se = var_se(baseline_bundle.jp)
    mc, mc_se = mean_se(contract_bundle.jp)
    mb, mb_se = mean_se(baseline_bundle.jp)
    paired = same
    d_se = var_diff_se(contract_bundle.jp, baseline_bundle.jp) if paired else math.hypot(vc_se, vb_se)
    dm = contract_bundle.jp - baseline_bundle.jp if paired else None
    out = dict(var_jp_contract=vc, var_jp_contract_se=vc_se, var_jp_baseline=vb, var_jp_baseline_se=vb_se,
               var_jp_delta=vc - vb, var_jp_delta_se=d_se,
               risk_reduction_pct=100.0 * (1.0 - vc / vb) if vb > 0 else 0.0,
               mean_jp_contract=mc, mean_jp_baseline=mb, mean_jp_delta=mc - mb,
               mean_jp_delta_se=float(dm.std(ddof=1) / math.sqrt(dm.size)) if paired else math.hypot(mc_se, mb_se),
               common_random_numbers=paired, notes=notes)
    if theta != 0:
        out["rs_jp_contract"] = risk_sensitive_estimate(contract_bundle.jp, theta)
        out["rs_jp_baseline"] = risk_sensitive_estimate(baseline_bundle.jp, theta)
    return out
