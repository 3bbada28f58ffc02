"""Command-line experiment runner.

Each subcommand loads a preset (or an INI config), runs one experiment and
writes JSON reports, CSV tables and binary field dumps into ``--out-dir``.
Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 divergence or blow-up detected.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .degenerate_wave import CFLViolation, SolverDivergence, energy_timeseries, solve_linear, verify_energy_inequality
from .nash_moser import NashMoser, PerturbedStart, uniqueness_check
from .oracle import compare, direct_solve
from .presets import ConfigError, PRESET_NAMES, Preset, load_config, load_preset
from .rescale import from_W, physical_problem, rescale_forward

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_DIVERGENCE = 0, 2, 3, 4

_LEMMAS = {"2.3": "lemma2_3", "2.4": "lemma2_4", "2.5": "lemma2_5", "2.6": "lemma2_6"}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--preset", choices=PRESET_NAMES, help="named preset (default nondegenerate-small)")
    src.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--out-dir", type=Path, default=Path("lcm-out"), help="output directory")
    common.add_argument("--grid", type=int, help="points per axis (power of two)")
    common.add_argument("--dt", type=float, help="time step")
    common.add_argument("--epsilon", type=float, help="smallness parameter")
    common.add_argument("--levels", type=int, help="maximum Nash-Moser levels")
    common.add_argument("--delta", type=float, help="regularization added to varrho")
    common.add_argument("--lambda", dest="lam", default="auto", help="energy weight lambda or 'auto'")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized starts")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="lcmembrane", description="Light-cone membrane numerical laboratory.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="direct method-of-lines solve")
    s.add_argument("--mode", choices=("model", "membrane"), default="model")
    sub.add_parser("nash-moser", parents=[common], help="run the Nash-Moser iteration")
    e = sub.add_parser("energy-check", parents=[common], help="audit an energy inequality on the linear problem")
    e.add_argument("--lemma", choices=sorted(_LEMMAS), default="2.5")
    e.add_argument("--constant", type=float, default=50.0, help="admissible constant")
    sub.add_parser("convergence-report", parents=[common], help="Nash-Moser run cross-checked against the direct solver")
    sub.add_parser("rescale-compare", parents=[common], help="rescaled solve mapped back vs long-horizon direct solve")
    u = sub.add_parser("uniqueness", parents=[common], help="two distinct starts, compare the limits")
    u.add_argument("--perturbation", type=float, default=1e-3, help="relative size of the second start's forcing")
    return p


def _load(args) -> Preset:
    pre = load_config(args.config) if args.config else load_preset(args.preset or "nondegenerate-small")
    return pre.override(grid=args.grid, dt=args.dt, epsilon=args.epsilon, delta0=args.delta)


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def _meta(pre: Preset, args) -> dict:
    return {"preset": pre.name, "source": pre.source, "seed": args.seed, "command": args.command,
            "grid": pre.n, "dt": pre.dt, "epsilon": pre.epsilon, "T": pre.T}


def _need_membrane(pre: Preset):
    if pre.toy_only:
        raise ConfigError(f"preset {pre.name} is a linear-only problem; use simulate or energy-check")


def _nm(pre: Preset, args, **over):
    kw = pre.nash_moser_kwargs()
    kw.update(over)
    return NashMoser(pre.problem(), pre.schedule(args.levels), pre.dt, verbose=not args.quiet, **kw)


def _write_convergence(out: Path, report, meta: dict):
    d = report.to_dict()
    d["meta"] = meta
    lio.write_json(out / "convergence.json", d)
    cols = {k: [r.to_dict()[k] for r in report.levels] for k in ("l", "N_l", "s_l", "norm_h", "norm_E", "delta_l", "wallclock_ms")}
    lio.write_csv(out / "convergence.csv", cols)


def _status_code(report) -> int:
    if report.status.startswith("solver failure"):
        return EXIT_SOLVER
    if report.status in ("divergence", "ball exit"):
        return EXIT_DIVERGENCE
    return EXIT_OK


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(pre: Preset, args, out: Path) -> int:
    if pre.toy_only:
        c, h0, h1, T, dt = pre.toy_problem(args.delta or 0.0)
        sol = solve_linear(c, h0, h1, T, dt)
        lam = 0.0 if args.lam == "auto" else float(args.lam)
        ts = energy_timeseries(sol, c, lam, h1)
        lio.write_field(out / "trajectory.bin", sol, sol.grid)
        lio.write_csv(out / "energy.csv", ts)
        lio.write_json(out / "simulate.json", {"meta": _meta(pre, args), "linear_only": True, "max_abs": float(np.abs(sol.data).max())})
        return EXIT_OK
    prob = pre.problem()
    res = direct_solve(prob, pre.dt, mode=args.mode)
    lio.write_field(out / "v.bin", res.v, prob.grid)
    lio.write_field(out / "u.bin", res.u, prob.grid)
    lio.write_csv(out / "constraint.csv", {"t": res.times, "constraint": res.constraint, "hamiltonian": res.hamiltonian, "energy": res.energy})
    summary = {
        "meta": _meta(pre, args), "mode": args.mode, "constraint_sup": res.constraint_sup(),
        # the bracket Hamiltonian is an invariant candidate only for the membrane equation
        "hamiltonian_drift": res.hamiltonian_drift() if args.mode == "membrane" else None, "blown_up": res.blown_up, "blowup_time": res.blowup_time,
    }
    lio.write_json(out / "simulate.json", summary)
    _say(args, f"constraint sup {summary['constraint_sup']:.3e}, hamiltonian drift {summary['hamiltonian_drift']}")
    return EXIT_DIVERGENCE if res.blown_up else EXIT_OK


def cmd_nash_moser(pre: Preset, args, out: Path) -> int:
    _need_membrane(pre)
    solver = _nm(pre, args)
    W, rep = solver.run()
    _write_convergence(out, rep, _meta(pre, args))
    lio.write_field(out / "W_limit.bin", W, W.grid)
    _say(args, f"status {rep.status}; d_fit {rep.d_fit}; slope_fit {rep.slope_fit}")
    return _status_code(rep)


def cmd_energy_check(pre: Preset, args, out: Path) -> int:
    c, h0, h1, T, dt = pre.toy_problem(args.delta or 0.0)
    if float(c.varrho.min()) <= 0.0:
        raise ConfigError("varrho vanishes somewhere: pass --delta > 0 to audit the regularized problem")
    sol = solve_linear(c, h0, h1, T, dt)
    lam = args.lam if args.lam == "auto" else float(args.lam)
    rep = verify_energy_inequality(sol, c, _LEMMAS[args.lemma], lam=lam, constant=args.constant, h1=h1)
    d = rep.to_dict()
    d["meta"] = _meta(pre, args)
    d["lambda0"] = rep.lambda0
    d["delta"] = args.delta or 0.0
    lio.write_json(out / "energy_report.json", d)
    lam_ts = 0.0 if not np.isfinite(rep.lam) else rep.lam
    lio.write_csv(out / "energy.csv", energy_timeseries(sol, c, lam_ts, h1))
    _say(args, f"{rep.which}: pass={rep.passed} lambda={rep.lam} constants={rep.constants}")
    return EXIT_OK


def cmd_convergence_report(pre: Preset, args, out: Path) -> int:
    _need_membrane(pre)
    solver = _nm(pre, args)
    W, rep = solver.run()
    _write_convergence(out, rep, _meta(pre, args))
    code = _status_code(rep)
    if code != EXIT_OK:
        return code
    prob = pre.problem()
    v = from_W(W, prob.v0, prob.v1)
    ref = direct_solve(prob, pre.dt)
    cmp_ = compare(v, ref.v)
    lio.write_json(out / "oracle_compare.json", {"meta": _meta(pre, args), "compare": cmp_.to_dict(), "oracle_blown_up": ref.blown_up})
    _say(args, f"relative L2 vs direct solver: {cmp_.aggregate['rel_l2']:.3e}")
    return EXIT_OK


def cmd_rescale_compare(pre: Preset, args, out: Path) -> int:
    _need_membrane(pre)
    prob = pre.problem()
    solver = _nm(pre, args)
    W, rep = solver.run()
    code = _status_code(rep)
    if code != EXIT_OK:
        _write_convergence(out, rep, _meta(pre, args))
        return code
    v = from_W(W, prob.v0, prob.v1)
    mapped = rescale_forward(v, prob.epsilon)
    phys = physical_problem(prob)
    direct = direct_solve(phys, mapped.dt)
    cmp_ = compare(mapped, direct.v)
    result = {
        "meta": _meta(pre, args), "horizon": phys.T, "compare": cmp_.to_dict(),
        "blown_up": direct.blown_up, "blowup_time": direct.blowup_time, "nash_moser_status": rep.status,
    }
    lio.write_json(out / "rescale_compare.json", result)
    lio.write_csv(out / "rescale_compare.csv", {"t": cmp_.times, "rel_l2": cmp_.rel_l2, "abs_l2": cmp_.abs_l2})
    _say(args, f"horizon {phys.T:.4g}: relative L2 {cmp_.aggregate['rel_l2']:.3e}, blown_up={direct.blown_up}")
    return EXIT_DIVERGENCE if direct.blown_up else EXIT_OK


def seeded_profile(grid, m: int, seed: int, modes: int = 3):
    """Random smooth bundle ``phi(x) * sin(pi t)`` with low-mode spatial part."""
    rng = np.random.default_rng(seed)
    x1, x2 = grid.coords
    phi = np.zeros((m,) + grid.shape)
    for j in range(m):
        for k1 in range(-modes, modes + 1):
            for k2 in range(-modes, modes + 1):
                a, b = rng.standard_normal(2) / (1 + k1 * k1 + k2 * k2)
                phi[j] += a * np.cos(k1 * x1 + k2 * x2) + b * np.sin(k1 * x1 + k2 * x2)
    phi /= np.abs(phi).max()
    return lambda t: np.sin(np.pi * t) * phi


def cmd_uniqueness(pre: Preset, args, out: Path) -> int:
    _need_membrane(pre)
    prob = pre.problem()
    kw = pre.nash_moser_kwargs()
    scale = prob.kappa * float(np.abs(prob.v0).max() + np.abs(prob.v1).max())
    start_b = PerturbedStart(seeded_profile(prob.grid, prob.num_components, args.seed), args.perturbation * scale)
    res = uniqueness_check(prob, pre.schedule(args.levels), None, start_b, dt=pre.dt, verbose=not args.quiet, **kw)
    meta = _meta(pre, args)
    lio.write_json(out / "uniqueness.json", {
        "meta": meta, "relative_L2": res["relative_L2"], "absolute_L2": res["absolute_L2"], "agree": res["agree"],
        "difference_sequence": res["difference_sequence"],
        "report_a": res["report_a"].to_dict(), "report_b": res["report_b"].to_dict(),
    })
    _say(args, f"relative L2 difference of limits {res['relative_L2']:.3e} (agree={res['agree']})")
    worst = max(_status_code(res["report_a"]), _status_code(res["report_b"]))
    return worst


_COMMANDS = {
    "simulate": cmd_simulate,
    "nash-moser": cmd_nash_moser,
    "energy-check": cmd_energy_check,
    "convergence-report": cmd_convergence_report,
    "rescale-compare": cmd_rescale_compare,
    "uniqueness": cmd_uniqueness,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.lam != "auto":
            try:
                float(args.lam)
            except ValueError as exc:
                raise ConfigError(f"--lambda must be a number or 'auto', got {args.lam!r}") from exc
        if args.levels is not None and args.levels < 1:
            raise ConfigError("--levels must be positive")
        pre = _load(args)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](pre, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CFLViolation, SolverDivergence) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER if isinstance(exc, CFLViolation) else EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
