"""Command-line entry point: calibrate -> design -> simulate -> verify -> report.

Exit codes: 0 ok, 1 validation error, 2 numerical failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import filecmp
import json
import logging
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, resolve_terms
from .contract import design_contract, design_menu, load_contract, save_contract
from .hjb.solver import SolverError, estimate_levels, solve_baseline_hjb
from .models import ContractTerms, to_plain
from .simulate import NoiseSource, TrajectoryBundle, accumulate_payoffs, simulate_closed_loop
from .verify import Tolerances, compare_to_baseline, verify_conditions

log = logging.getLogger("rlcontract")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VERIFY = 0, 1, 2, 3


class VerificationFailed(Exception):
    pass


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path: Path, what: str):
    if not path.exists():
        raise ConfigError(f"{what} not found at {path}; run the earlier step first")
    return json.loads(path.read_text())


class Run:
    def __init__(self, args):
        self.args = args
        self.cfg = RunConfig.load(args.config)
        if args.seed is not None:
            self.cfg.seed = int(args.seed)
        if args.paths is not None:
            self.cfg.paths = int(args.paths)
        if args.grid:
            self.cfg.set_grid(args.grid)
        if self.cfg.paths < 1:
            raise ConfigError("--paths must be at least 1")
        self.out = Path(args.out or self.cfg.raw.get("output") or "out")
        self.timings = {}

    def echo(self, command: str):
        """Record the effective configuration of each step (one entry per subcommand)."""
        a = self.args
        path = self.out / "config_echo.json"
        doc = json.loads(path.read_text()) if path.exists() else {}
        doc[command] = dict(config=self.cfg.raw, config_dir=str(self.cfg.base.resolve()),
                            overrides=dict(seed=self.cfg.seed, paths=self.cfg.paths, grid=self.cfg.grid,
                                           jobs=a.jobs, unit=a.unit, max_export=a.max_export))
        _dump(path, doc)

    # -- shared loaders -------------------------------------------------------------

    def market(self):
        mm = self.out / "market_model.json"
        if "model" in self.cfg.raw["market"]:
            return self.cfg.market()
        fitted = json.loads(mm.read_text()) if mm.exists() else self.cfg.calibrate_market(self.args.unit).to_dict()
        return self.cfg.market(fitted)

    def sigmas(self):
        p = self.out / "agent_sigma.json"
        if p.exists():
            return {k: v["load_sigma"] for k, v in json.loads(p.read_text()).items()}
        return None

    def contracts(self):
        summary = _load_json(self.out / "design_summary.json", "design summary")
        out = []
        for aid in summary["agents"]:
            d = self.out / "contracts" / aid
            if not (d / "contract.json").exists():
                raise ConfigError(f"contract bundle for {aid} missing at {d}")
            out.append(load_contract(d))
        return out


# -- subcommands ------------------------------------------------------------------------


def cmd_calibrate(run: Run) -> int:
    cfg = run.cfg
    t0 = time.perf_counter()
    res = cfg.calibrate_market(run.args.unit)
    doc = res.to_dict()
    doc["unit"] = run.args.unit or cfg.raw["market"].get("unit", "usd_per_mwh")
    _dump(run.out / "market_model.json", doc)
    print(f"price model: r0 = {res.r0:.4f} (se {res.se['r0']:.2g}) 1/h, log-likelihood {res.loglik:.2f}")
    for i in range(len(res.nu)):
        print(f"  bin {i:2d}: nu = {res.nu[i]:+.4f} (se {res.se['nu'][i]:.2g})  "
              f"sigma0 = {res.sigma0[i]:.4f} (se {res.se['sigma0'][i]:.2g})")
    for f in res.flags:
        print(f"  flag: {f}")
    if doc["unit"] == "usd_per_kwh" and np.exp(np.max(res.nu)) > 5:
        print("  warning: prices above $5/kWh; is the file in $/MWh?")
    if doc["unit"] == "usd_per_mwh" and np.exp(np.max(res.nu)) < 1e-3:
        print("  warning: prices below $0.001/kWh; is the file in $/kWh?")
    sig = {}
    for d in cfg.raw["agents"]:
        if "consumption_csv" in d:
            aid = str(d.get("agent_id"))
            lr = cfg.fit_agent_sigma(d)
            sig[aid] = dict(load_sigma=lr.load_sigma.tolist(), se=lr.se["load_sigma"].tolist(),
                            scale_factor=lr.extra.get("scale_factor"), target_variance=lr.extra.get("target_variance"),
                            flags=lr.flags)
            print(f"load diffusion {aid}: sigma~ in [{lr.load_sigma.min():.4f}, {lr.load_sigma.max():.4f}], "
                  f"variance-matching factor {lr.extra.get('scale_factor', 0):.4f}")
    if sig:
        _dump(run.out / "agent_sigma.json", sig)
    run.timings["calibrate"] = time.perf_counter() - t0
    return EXIT_OK


def _agents_with_terms(run: Run, m):
    cfg = run.cfg
    resolved = []
    cache = {}
    for a, req in cfg.agent_templates(run.sigmas()):
        key = (json.dumps(to_plain(a), sort_keys=True, default=str).replace(a.agent_id, ""),
               json.dumps(req, sort_keys=True))
        if key not in cache:
            cache[key] = resolve_terms(a, req, m, cfg)
        terms, b_bar, s_bar = cache[key]
        resolved.append((a.with_terms(terms), b_bar, s_bar))
    return resolved


def cmd_design(run: Run) -> int:
    cfg = run.cfg
    m = run.market()
    resolved = _agents_with_terms(run, m)
    agents = [r[0] for r in resolved]
    if run.args.dry_run:
        total = 0
        for a in agents:
            gs = cfg.grid_for(a, m)
            cm = cfg.mesh_for(a, m, gs)
            n_lv = estimate_levels(a, m, cfg.theta, gs, cm, cfg.tg)
            nodes = gs.w.n * gs.x.n * gs.y.n
            mem = nodes * (n_lv + 1) * 8 + nodes * n_lv * 5 * 2
            total += mem
            print(f"{a.agent_id}: grid {gs.w.n}x{gs.x.n}x{gs.y.n} ({nodes} nodes), mesh {cm.size} controls, "
                  f"{n_lv} time levels, ~{mem / 2**20:.1f} MiB")
        print(f"dry run: {len(agents)} agents, ~{total / 2**20:.1f} MiB of value tables; nothing solved")
        return EXIT_OK
    menu_cfg = cfg.raw.get("menu")
    menu = [tuple(p) for p in menu_cfg] if menu_cfg else sorted({(a.terms.b, a.terms.S) for a in agents})
    groups = {}
    for a in agents:
        gs = cfg.grid_for(a, m)
        cm = cfg.mesh_for(a, m, gs)
        groups.setdefault((json.dumps(to_plain(gs)), json.dumps(to_plain(cm))), (gs, cm, []))[2].append(a)
    t0 = time.perf_counter()
    contracts, errors, n_solves, hits = {}, {}, 0, 0
    for gs, cm, group in groups.values():
        res = design_menu(group, menu, m, cfg.theta, gs, cm, cfg.tg, jobs=run.args.jobs)
        contracts.update(res.contracts)
        errors.update(res.errors)
        n_solves += res.n_solves
        hits += res.cache_hits
    run.timings["design"] = time.perf_counter() - t0
    summary = dict(agents=[], errors=errors, n_solves=n_solves, dedup_hits=hits, theta=cfg.theta,
                   menu=[list(p) for p in menu])
    for (a, b_bar, s_bar) in resolved:
        c = contracts.get(a.agent_id)
        if c is None:
            continue
        save_contract(c, run.out / "contracts" / a.agent_id)
        cert = c.certificate
        summary["agents"].append(a.agent_id)
        summary.setdefault("details", {})[a.agent_id] = dict(
            b=a.terms.b, S=a.terms.S, b_bar=b_bar, S_bar=s_bar, value=c.value,
            rho=cert.rho if cert else None, rho_label=cert.label if cert else None,
            n_levels=c.value_grid.n_levels)
        rho = f"{cert.rho:.6f} ({cert.label})" if cert and cert.available else "unavailable"
        print(f"{a.agent_id}: b = {a.terms.b:.4f}, S = {a.terms.S:.6g}, value {c.value:.6f}, rho = {rho}, "
              f"solve {c.meta.get('solve_seconds', 0):.1f} s")
    print(f"{n_solves} HJB solves for {len(agents)} agents ({hits} shared by deduplication), "
          f"{run.timings['design']:.1f} s")
    for aid, err in errors.items():
        print(f"error {aid}: {err}")
    _dump(run.out / "design_summary.json", summary)
    if errors and not contracts:
        return EXIT_NUMERICAL
    return EXIT_OK


def _bundle_npz(path: Path, b: TrajectoryBundle):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, ja=b.ja, jp=b.jp, y=b.y, gamma_sq=b.gamma_sq, gamma_int=b.gamma_int, comp=b.comp,
                 seed=np.array([b.meta.get("seed", -1)]), terms=np.array([b.terms_b, b.terms_S]),
                 exits=np.array([b.exits]))


def _npz_bundle(path: Path) -> TrajectoryBundle:
    if not path.exists():
        raise ConfigError(f"simulation output {path} missing; run simulate first")
    d = np.load(path)
    n = d["ja"].size
    z = np.zeros(n)
    b = TrajectoryBundle(np.zeros(1), float(d["terms"][0]), float(d["terms"][1]), True, z, z, z, d["y"], z,
                         d["ja"], d["jp"], d["comp"], z, z, z, z, d["gamma_int"], d["gamma_sq"],
                         exits=int(d["exits"][0]))
    b.meta["seed"] = int(d["seed"][0])
    return b


def _fig6_rows(times, rec_c, rec_b, price):
    lines = ["t,price,u_contract,x_contract,u_baseline,x_baseline"]
    n = times.size - 1
    for k in range(n):
        lines.append(f"{times[k]:.4f},{price[k]:.6g},{int(rec_c['u'][0, k] > 0)},{rec_c['x'][0, k]:.4f},"
                     f"{int(rec_b['u'][0, k] > 0)},{rec_b['x'][0, k]:.4f}")
    return "\n".join(lines) + "\n"


def cmd_simulate(run: Run) -> int:
    cfg = run.cfg
    contracts = run.contracts()
    n = cfg.paths
    t0 = time.perf_counter()
    for idx, c in enumerate(contracts):
        vg = c.value_grid
        a, m, tg = vg.agent, vg.market, cfg.tg
        noise = NoiseSource(cfg.seed, idx)
        bc = simulate_closed_loop(a, m, c.policy, tg, n, noise, n_record=cfg.n_record)
        base = solve_baseline_hjb(a, cfg.baseline_grid(a, m), tg, m)
        bb = simulate_closed_loop(a, m, base.policy, tg, n, noise, with_contract=False, n_record=cfg.n_record)
        d = run.out / "simulation" / c.agent_id
        _bundle_npz(d / "contract.npz", bc)
        _bundle_npz(d / "baseline.npz", bb)
        (d / "trajectories.csv").write_text(bc.to_csv(run.args.max_export))
        (d / "fig6_paths.csv").write_text(_fig6_rows(bc.times, bc.record, bb.record, np.exp(bc.record["w"][0])))
        sc = accumulate_payoffs(bc, cfg.theta)
        sb = accumulate_payoffs(bb, cfg.theta)
        _dump(d / "summary.json", dict(contract=sc, baseline=sb, b_bar=base.b_bar, S_bar=base.S_bar,
                                       box_exits=bc.exits, seed=cfg.seed, stream=idx))
        print(f"{c.agent_id}: E[J_A] = {sc['mean_ja']:.5f} (b = {c.terms.b:.5f}), Var[J_A] = {sc['var_ja']:.3g} "
              f"(S = {c.terms.S:.3g}), Var[J_P] = {sc['var_jp']:.3g} vs baseline {sb['var_jp']:.3g}")
        if idx == 0 and cfg.sweep:
            _sweep(run, c, base, bb, noise)
    run.timings["simulate"] = time.perf_counter() - t0
    return EXIT_OK


def _sweep(run: Run, c, base, bb, noise):
    cfg = run.cfg
    vg = c.value_grid
    a0, m, tg = vg.agent, vg.market, cfg.tg
    lines = ["share,S,var_ja,var_ja_se,var_jp,var_jp_se,var_jp_baseline,risk_reduction_pct,mean_jp_delta"]
    for share in cfg.sweep:
        a = a0.with_terms(ContractTerms(c.terms.b, float(share) * base.S_bar))
        gs = cfg.grid_for(a, m)
        cs = design_contract(a, m, cfg.theta, gs, cfg.mesh_for(a, m, gs), tg, certificate=False)
        bs = simulate_closed_loop(a, m, cs.policy, tg, cfg.paths, noise, n_record=1)
        s = accumulate_payoffs(bs, cfg.theta)
        cmp = compare_to_baseline(bs, bb, cfg.theta)
        lines.append(",".join(f"{v:.10g}" for v in (
            float(share), a.terms.S, s["var_ja"], s["var_ja_se"], s["var_jp"], s["var_jp_se"],
            cmp["var_jp_baseline"], cmp["risk_reduction_pct"], cmp["mean_jp_delta"])))
        print(f"  sweep S/S_bar = {share:.2f}: Var[J_P] = {s['var_jp']:.4g} "
              f"(baseline {cmp['var_jp_baseline']:.4g}, reduction {cmp['risk_reduction_pct']:.1f}%)")
    (run.out / "fig4_sweep.csv").write_text("\n".join(lines) + "\n")


def cmd_verify(run: Run) -> int:
    cfg = run.cfg
    summary = _load_json(run.out / "design_summary.json", "design summary")
    ok = True
    for aid in summary["agents"]:
        d = run.out / "simulation" / aid
        bc = _npz_bundle(d / "contract.npz")
        bb = _npz_bundle(d / "baseline.npz")
        terms = ContractTerms(bc.terms_b, bc.terms_S)
        rep = verify_conditions(bc, terms, Tolerances(), theta=cfg.theta)
        rep.baseline = compare_to_baseline(bc, bb, cfg.theta)
        rep.notes.append("gamma and zeta searched on a truncated mesh; see contract policy.json for the caps")
        vd = run.out / "verification"
        vd.mkdir(parents=True, exist_ok=True)
        (vd / f"{aid}.json").write_text(rep.to_json())
        (vd / f"{aid}.csv").write_text(rep.csv_rows())
        for ch in rep.checks:
            print(f"{aid} {ch.name}: {'PASS' if ch.passed else 'FAIL'} estimate {ch.estimate:.6g} "
                  f"(se {ch.se:.2g}) threshold {ch.threshold:.6g}")
        print(f"{aid} risk reduction vs no contract: {rep.baseline['risk_reduction_pct']:.1f}%, "
              f"mean J_P delta {rep.baseline['mean_jp_delta']:+.4f} $")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_report(run: Run) -> int:
    out = run.out
    design = _load_json(out / "design_summary.json", "design summary")
    lines = ["# Contract run report", ""]
    lines.append(f"theta = {design['theta']}, {design['n_solves']} solves, {design['dedup_hits']} deduplicated")
    lines.append("")
    lines.append("| agent | b | S | rho | Var[J_A] | Var[J_P] | baseline Var[J_P] | checks |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for aid in design["agents"]:
        det = design["details"][aid]
        vpath = out / "verification" / f"{aid}.json"
        if vpath.exists():
            v = json.loads(vpath.read_text())
            s = v["summary"]
            row = (f"{s['var_ja']:.4g} | {s['var_jp']:.4g} | {v['baseline']['var_jp_baseline']:.4g} | "
                   f"{'pass' if v['passed'] else 'FAIL'}")
        else:
            row = "- | - | - | not verified"
        rho = f"{det['rho']:.6f}" if det.get("rho") is not None else "n/a"
        lines.append(f"| {aid} | {det['b']:.5f} | {det['S']:.4g} | {rho} | {row} |")
    sweep = out / "fig4_sweep.csv"
    if sweep.exists():
        lines += ["", "Variance sweep (fig4_sweep.csv):", "", "```", sweep.read_text().rstrip(), "```"]
    lines += ["", "The gamma/zeta search sets are truncated meshes; caps are listed in each policy.json."]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print((out / "report.md").read_text())
    return EXIT_OK


COMMANDS = dict(calibrate=cmd_calibrate, design=cmd_design, simulate=cmd_simulate, verify=cmd_verify,
                report=cmd_report)
VOLATILE = ("run_log.json",)


def _execute(args) -> int:
    run = Run(args)
    run.out.mkdir(parents=True, exist_ok=True)
    run.echo(args.command)
    code = COMMANDS[args.command](run)
    if not args.dry_run:
        _dump(run.out / "run_log.json", dict(command=args.command, seconds=run.timings))
    return code


def _check(args) -> int:
    """Re-run the command on a copy of the output directory and diff every file."""
    out = Path(args.out or RunConfig.load(args.config).raw.get("output") or "out")
    if not out.exists():
        raise ConfigError(f"--check needs an existing output directory ({out})")
    with tempfile.TemporaryDirectory() as tmp:
        copy = Path(tmp) / "out"
        shutil.copytree(out, copy)
        args2 = argparse.Namespace(**{**vars(args), "out": str(copy), "check": False})
        code = _execute(args2)
        diffs = []
        for p in sorted(out.rglob("*")):
            if p.is_file() and p.name not in VOLATILE:
                q = copy / p.relative_to(out)
                if not q.exists() or not filecmp.cmp(p, q, shallow=False):
                    diffs.append(str(p.relative_to(out)))
    if diffs:
        print("check: regenerated files differ:\n  " + "\n  ".join(diffs))
        return EXIT_VERIFY
    print(f"check: {args.command} reproduces every file in {out}")
    return code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--out", help="output directory (default: config 'output' or ./out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-agent solves")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--grid", help="state grid size WxXxY, e.g. 15x49x11")
    common.add_argument("--paths", type=int, help="Monte Carlo paths per simulation")
    common.add_argument("--max-export", type=int, default=None, help="cap on paths written to trajectory CSVs")
    common.add_argument("--unit", choices=["usd_per_mwh", "usd_per_kwh"], help="unit of the price CSV")
    common.add_argument("--dry-run", action="store_true", help="validate and size the run without solving")
    common.add_argument("--check", action="store_true", help="re-run into a scratch copy and diff the outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="rlcontract", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return p


cmd_calibrate.__doc__ = "fit the price model and load diffusions from the configured CSVs"
cmd_design.__doc__ = "solve the per-agent contract problems and write contract bundles"
cmd_simulate.__doc__ = "closed-loop and no-contract simulations with common random numbers"
cmd_verify.__doc__ = "check participation, risk-limit and budget conditions on the simulations"
cmd_report.__doc__ = "summarise the run in report.md"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _check(args) if args.check else _execute(args)
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
