"""Newton iteration with dyadic smoothing for the rescaled membrane problem.

The unknown is ``W = v - v0 - v1 t`` on a uniform time grid. The discrete
residual of the ``N``-smoothed problem at node ``n`` is

    (W^{n+1} - 2 W^n + W^{n-1}) / dt^2 - kappa L0 v^n - s Pi_N F(v^n, V^n)

(with the one-sided form ``2 (W^1 - W^0) / dt^2`` at ``n = 0``). The linear
solve at each level uses the same leapfrog stencil, so the Newton update is
exact at the discrete level: the new residual is the quadratic remainder plus
the smoothing-window change, plus the regularization defect when ``delta``
is active. Each part is logged separately.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .degenerate_wave import (
    DegenerateCoefficients,
    SolverDivergence,
    map_membrane_to_toy,
    regularize,
    solve_linear,
    spatial_operator,
)
from .grid import SpacetimeField, cumulative_time_integral, low_pass, spacetime_norm
from .membrane_system import EPS, MembraneProblem, MembraneSystem

__all__ = [
    "IterationSchedule",
    "IterationState",
    "LevelRecord",
    "ConvergenceReport",
    "schedule",
    "approx_operator",
    "NashMoser",
    "PerturbedStart",
    "run",
    "uniqueness_check",
    "fit_double_exponential",
    "epsilon_sweep",
]


@dataclass(frozen=True)
class IterationSchedule:
    s_bar: float
    s: float
    s0: float
    k: int
    d: float
    max_levels: int
    floor_tolerance: float = 1e-10
    s_tilde: float | None = None

    def s_l(self, l: int) -> float:
        return self.s_bar + (self.s - self.s_bar) / 2**l

    def alpha_l(self, l: int) -> float:
        if l < 1:
            raise ValueError("alpha_l is defined for l >= 1")
        return self.s_l(l - 1) - self.s_l(l)

    @staticmethod
    def N_l(l: int) -> int:
        return 2**l

    @property
    def table(self) -> list[dict]:
        return [{"l": l, "s_l": self.s_l(l), "N_l": self.N_l(l)} for l in range(self.max_levels + 2)]


def schedule(s_bar, s, s0, k, d=0.5, max_levels=6, floor_tolerance=1e-10, s_tilde=None) -> IterationSchedule:
    """Build the index schedule; requires ``s0 < s_bar < s <= k - 1`` and ``d`` in (0, 1).

    The proof also asks for ``s0 >= 2``; that bound is not enforced so that
    schedules anchored at ``s_bar = 2`` can be tabulated.
    """
    if not (0 <= s0 < s_bar < s <= k - 1):
        raise ValueError("index chain s0 < s_bar < s <= k - 1 violated")
    if s_tilde is not None and not (s < s_tilde <= k - 1):
        raise ValueError("s_tilde must satisfy s < s_tilde <= k - 1")
    if not 0 < d < 1:
        raise ValueError("d must lie in (0, 1)")
    if max_levels < 1:
        raise ValueError("max_levels must be positive")
    return IterationSchedule(float(s_bar), float(s), float(s0), int(k), float(d), int(max_levels), float(floor_tolerance), s_tilde)


# -- the residual ---------------------------------------------------------


def _check_history(W: SpacetimeField, problem: MembraneProblem):
    if W.data.shape[1:] != problem.u0.shape or not W.grid.same_as(problem.grid):
        raise ValueError("W does not match the problem's grid/components")
    if W.nt < 3:
        raise ValueError("need at least three time levels")


def _residual(system: MembraneSystem, W: SpacetimeField, N: int | None, with_scale: bool = False):
    prob = system.problem
    v, V = system.full_velocity(W)
    dt = W.dt
    d = W.data
    res = np.empty((W.nt - 1,) + d.shape[1:])
    res[0] = 2 * (d[1] - d[0]) / dt**2
    res[1:] = (d[2:] - 2 * d[1:-1] + d[:-2]) / dt**2
    vv, VV = v[:-1], V[:-1]
    lin = prob.kappa * system.principal(vv)
    res -= lin
    res -= prob.forcing_scale * system.F_history(vv, VV, N)
    if with_scale:
        # size of the largest cancelling term, for judging roundoff
        return res, max(1.0, float(np.abs(lin).max()), float(np.abs(res + lin).max()))
    return res


def approx_operator(W: SpacetimeField, problem: MembraneProblem, N_l: int | None, system: MembraneSystem | None = None) -> SpacetimeField:
    """Discrete residual of the ``N_l``-smoothed problem at nodes ``0 .. nt-2``.

    ``N_l = None`` (or any cutoff at or above Nyquist) gives the unsmoothed
    operator.
    """
    _check_history(W, problem)
    scale = max(1.0, float(np.abs(W.data).max()))
    if np.abs(W.data[0]).max() > 1e-13 * scale:
        raise ValueError("W must vanish at t = 0")
    system = system or MembraneSystem(problem)
    return SpacetimeField(W.grid, _residual(system, W, N_l), W.dt, W.t0)


# -- bookkeeping -----------------------------------------------------------


@dataclass
class LevelRecord:
    l: int
    N_l: int
    s_l: float
    norm_h: float
    norm_E: float
    delta_l: float
    wallclock_ms: float
    parts: dict = field(default_factory=dict)
    consistency: float | None = None
    norm_W: float | None = None

    def to_dict(self) -> dict:
        out = {
            "l": self.l,
            "N_l": self.N_l,
            "s_l": self.s_l,
            "norm_h": self.norm_h,
            "norm_E": self.norm_E,
            "delta_l": self.delta_l,
            "wallclock_ms": self.wallclock_ms,
        }
        if self.parts:
            out["parts"] = dict(self.parts)
        if self.consistency is not None:
            out["consistency"] = self.consistency
        if self.norm_W is not None:
            out["norm_W"] = self.norm_W
        return out


@dataclass
class ConvergenceReport:
    levels: list = field(default_factory=list)
    converged: bool = False
    d_fit: float | None = None
    slope_fit: float | None = None
    status: str = "running"
    failure_level: int | None = None
    fit_levels: list = field(default_factory=list)
    normalized_slope: float | None = None
    quadratic_constant: float | None = None

    def to_dict(self) -> dict:
        return {
            "levels": [r.to_dict() for r in self.levels],
            "converged": bool(self.converged),
            "d_fit": self.d_fit,
            "slope_fit": self.slope_fit,
            "status": self.status,
            "failure_level": self.failure_level,
            "fit_levels": list(self.fit_levels),
            "normalized_slope": self.normalized_slope,
            "quadratic_constant": self.quadratic_constant,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def norms_E(self) -> np.ndarray:
        return np.array([r.norm_E for r in self.levels])


@dataclass
class IterationState:
    level: int
    W: SpacetimeField
    E: SpacetimeField
    norm_history: list = field(default_factory=list)
    R_ball: float = float("inf")
    increments: list = field(default_factory=list)


def fit_double_exponential(norms, levels=None) -> dict:
    """Fit ``log E_l = log K + 2^l log d`` and the log-log slope.

    Returns ``d``, ``K``, the raw slope of ``log log(1/E_l)`` against ``l``
    (``nan`` unless every ``E_l < 1``) and the slope of ``log log(K/E_l)``.
    """
    e = np.asarray(norms, dtype=float)
    l = np.arange(len(e)) if levels is None else np.asarray(levels, dtype=float)
    out = {"d": math.nan, "K": math.nan, "raw_slope": math.nan, "normalized_slope": math.nan}
    if len(e) < 2 or np.any(e <= 0):
        return out
    X = np.stack([np.ones_like(l), 2.0**l], axis=1)
    coef, *_ = np.linalg.lstsq(X, np.log(e), rcond=None)
    out["K"] = float(np.exp(coef[0]))
    out["d"] = float(np.exp(coef[1]))
    if np.all(e < 1):
        out["raw_slope"] = float(np.polyfit(l, np.log(np.log(1 / e)), 1)[0])
    z = coef[0] - np.log(e)
    if np.all(z > 0):
        out["normalized_slope"] = float(np.polyfit(l, np.log(z), 1)[0])
    return out


@dataclass
class PerturbedStart:
    """Start the iteration from the linear solve with an extra forcing.

    ``profile(t)`` returns a bundle; it is sampled at the nodes and scaled by
    ``amplitude``. Such a start vanishes with its time derivative at ``t = 0``
    and its residual is known exactly.
    """

    profile: Callable
    amplitude: float = 1.0

    def forcing_nodes(self, solver: "NashMoser") -> np.ndarray:
        t = np.arange(solver.nt - 1) * solver.dt
        return self.amplitude * np.stack([np.asarray(self.profile(tt), dtype=float) for tt in t])


# -- the driver ------------------------------------------------------------


class NashMoser:
    """Stateful driver; ``run`` performs the whole iteration."""

    def __init__(
        self,
        problem: MembraneProblem,
        sched: IterationSchedule,
        dt: float,
        *,
        gamma0=None,
        gamma_cd=None,
        delta0: float = 1e-2,
        smoothing: bool = True,
        R_ball: float = float("inf"),
        cfl: float = 1.0,
        check_consistency: bool = True,
        verbose: bool = False,
    ):
        self.problem = problem
        self.sched = sched
        self.dt = float(dt)
        self.nt = int(round(problem.T / dt)) + 1
        if abs((self.nt - 1) * dt - problem.T) > 1e-9 * problem.T:
            raise ValueError("T must be an integer multiple of dt")
        self.system = MembraneSystem(problem)
        if gamma0 is None or gamma_cd is None:
            from .rescale import factorization_check

            fc = factorization_check(problem.u0, problem.grid)
            gamma0 = fc.gamma0 if gamma0 is None else gamma0
            gamma_cd = fc.gamma_cd if gamma_cd is None else gamma_cd
        self.gamma0 = np.broadcast_to(np.asarray(gamma0, dtype=float), problem.grid.shape).copy()
        self.gamma_cd = np.broadcast_to(np.asarray(gamma_cd, dtype=float), (2, 2) + problem.grid.shape).copy()
        self.delta0 = delta0
        self.smoothing = smoothing
        self.R_ball = R_ball
        self.cfl = cfl
        self.check_consistency = check_consistency
        self.verbose = verbose
        self.degenerate = bool(self.gamma0.min() < 1.0)

    # cutoffs
    def N(self, l: int) -> int | None:
        if not self.smoothing:
            return None
        n = self.sched.N_l(l)
        return None if n >= max(self.problem.grid.shape) // 2 else n

    def zeros(self) -> SpacetimeField:
        return SpacetimeField.zeros(self.problem.grid, self.problem.num_components, self.nt, self.dt)

    def residual(self, W: SpacetimeField, N) -> SpacetimeField:
        return SpacetimeField(W.grid, _residual(self.system, W, N), W.dt)

    def _coefficients(self, W: SpacetimeField, N, forcing, delta: float, linear: bool) -> DegenerateCoefficients:
        c = map_membrane_to_toy(W, self.problem.u0, self.problem.epsilon, self.gamma0, self.gamma_cd, problem=self.problem, N=N)
        if linear:
            c = DegenerateCoefficients(c.grid, c.varrho, c.rho, c.B, None, forcing, c.epsilon, None)
        else:
            c = DegenerateCoefficients(c.grid, c.varrho, c.rho, c.B, None, forcing, c.epsilon, c.coupling)
        if delta > 0:
            c = regularize(c, delta)
        return c

    def linear_start(self, extra: np.ndarray | None = None) -> SpacetimeField:
        """``W^0``: solution of the problem with ``F`` switched off.

        ``extra`` (nodes ``0 .. nt-2``) is added to the forcing; the residual
        of the start is then ``extra - eps^2 Pi F`` exactly.
        """
        zero = self.zeros()
        v, _ = self.system.full_velocity(zero)
        f = self.problem.kappa * self.system.principal(v[:-1])
        if extra is not None:
            f = f + extra
        forcing = SpacetimeField(zero.grid, f, self.dt)
        c = self._coefficients(zero, None, forcing, 0.0, linear=True)
        h0 = np.zeros_like(self.problem.u0)
        return solve_linear(c, h0, h0, self.problem.T, self.dt, cfl=self.cfl)

    def _delta(self, normE: float) -> float:
        if not self.degenerate:
            return 0.0
        return min(self.delta0, normE)

    def _norm(self, f: SpacetimeField, s: float) -> float:
        return spacetime_norm(f, s)

    def step(self, state: IterationState) -> tuple[IterationState, LevelRecord]:
        l = state.level
        t0 = time.perf_counter()
        s_next = self.sched.s_l(l + 1)
        N_cur = self.N(l + 1)
        N_next = self.N(l + 2)
        normE = self._norm(state.E, s_next)
        delta = self._delta(normE)
        forcing = -state.E
        if not np.any(state.E.data):
            h = self.zeros()
        else:
            c = self._coefficients(state.W, N_cur, forcing, delta, linear=False)
            h0 = np.zeros_like(self.problem.u0)
            h = solve_linear(c, h0, h0, self.problem.T, self.dt, cfl=self.cfl)
        W_new = state.W + h
        # residual update from its parts
        sys_ = self.system
        v_old, V_old = sys_.full_velocity(state.W)
        H = cumulative_time_integral(h)
        k = slice(0, self.nt - 1)
        quad = -self.problem.forcing_scale * sys_.R_history(v_old[k], V_old[k], h.data[k], H[k], N_cur)
        parts = {"remainder": float(np.abs(quad).max())}
        E_new = quad
        if delta > 0:
            dc = DegenerateCoefficients(self.problem.grid, delta, self.problem.kappa * np.einsum(
                "ac,bd,cdxy->abxy", EPS, EPS, self.gamma_cd))
            defect = np.stack([spatial_operator(dc, h.data[n], H[n], n * self.dt) for n in range(self.nt - 1)])
            E_new = E_new + defect
            parts["delta_defect"] = float(np.abs(defect).max())
        if N_next != N_cur:
            v_new, V_new = sys_.full_velocity(W_new)
            Fv = sys_.F_history(v_new[k], V_new[k], None)
            window = -self.problem.forcing_scale * (_lp(Fv, self.problem.grid, N_next) - _lp(Fv, self.problem.grid, N_cur))
            E_new = E_new + window
            parts["window"] = float(np.abs(window).max())
        E_field = SpacetimeField(self.problem.grid, E_new, self.dt)
        rec = LevelRecord(
            l=l + 1,
            N_l=self.sched.N_l(l + 1),
            s_l=s_next,
            norm_h=self._norm(h, s_next),
            norm_E=self._norm(E_field, self.sched.s_l(l + 1)),
            delta_l=delta,
            wallclock_ms=0.0,
            parts=parts,
        )
        if self.check_consistency:
            direct, scale = _residual(self.system, W_new, N_next, with_scale=True)
            rec.consistency = float(np.abs(direct - E_new).max() / scale)
        rec.norm_W = self._norm(W_new, self.sched.s_bar)
        rec.wallclock_ms = 1e3 * (time.perf_counter() - t0)
        new_state = IterationState(l + 1, W_new, E_field, state.norm_history + [(rec.norm_h, rec.norm_E)], state.R_ball, state.increments + [h])
        return new_state, rec

    def run(self, W0: "SpacetimeField | PerturbedStart | None" = None) -> tuple[SpacetimeField, ConvergenceReport]:
        sched = self.sched
        report = ConvergenceReport()
        t0 = time.perf_counter()
        extra = None
        if isinstance(W0, PerturbedStart):
            extra = W0.forcing_nodes(self)
            W0 = None
        try:
            W = self.linear_start(extra) if W0 is None else W0
        except SolverDivergence as exc:
            report.status = f"solver failure: {exc}"
            report.failure_level = 0
            return self.zeros(), report
        if W0 is None:
            # the linear start solves the F-free problem with the same stencil,
            # so its residual is the forcing term alone; forming it directly
            # would bury it under cancellation error amplified by 1/dt^2
            v, V = self.system.full_velocity(W)
            k = slice(0, self.nt - 1)
            E0 = -self.problem.forcing_scale * self.system.F_history(v[k], V[k], self.N(1))
            if extra is not None:
                E0 = E0 + extra
            E = SpacetimeField(W.grid, E0, self.dt)
        else:
            E = self.residual(W, self.N(1))
        state = IterationState(0, W, E, R_ball=self.R_ball, increments=[W])
        rec0 = LevelRecord(0, sched.N_l(0), sched.s_l(0), self._norm(W, sched.s_l(0)), self._norm(E, sched.s_l(0)), 0.0,
                           1e3 * (time.perf_counter() - t0), norm_W=self._norm(W, sched.s_bar))
        if self.check_consistency and W0 is None:
            direct, scale = _residual(self.system, W, self.N(1), with_scale=True)
            rec0.consistency = float(np.abs(direct - E.data).max() / scale)
        report.levels.append(rec0)
        self._log(rec0)
        growth = 0
        while True:
            last = report.levels[-1]
            if last.norm_E <= sched.floor_tolerance:
                report.converged = True
                report.status = "converged"
                break
            if last.l >= sched.max_levels:
                report.status = "max_levels"
                break
            try:
                state, rec = self.step(state)
            except SolverDivergence as exc:
                report.status = f"solver failure: {exc}"
                report.failure_level = last.l + 1
                break
            report.levels.append(rec)
            self._log(rec)
            if not np.isfinite(rec.norm_E):
                report.status = "divergence"
                report.failure_level = rec.l
                break
            if rec.norm_W is not None and rec.norm_W >= self.R_ball:
                report.status = "ball exit"
                report.failure_level = rec.l
                break
            growth = growth + 1 if rec.norm_E > last.norm_E else 0
            if growth >= 2:
                report.status = "divergence"
                report.failure_level = rec.l
                break
        self._fit(report)
        self.state = state
        return state.W, report

    def _fit(self, report: ConvergenceReport):
        norms = report.norms_E()
        keep = [i for i, e in enumerate(norms) if e > self.sched.floor_tolerance]
        report.fit_levels = keep
        if len(keep) >= 2:
            fit = fit_double_exponential(norms[keep], np.array(keep))
            report.d_fit = fit["d"]
            report.slope_fit = fit["raw_slope"]
            report.normalized_slope = fit["normalized_slope"]
        pairs = [(norms[i], norms[i + 1]) for i in range(len(norms) - 1) if norms[i + 1] > 0 and norms[i] > 0]
        if pairs:
            report.quadratic_constant = float(max(b / a**2 for a, b in pairs))

    def _log(self, rec: LevelRecord):
        if self.verbose:
            print(
                f"level {rec.l}: N={rec.N_l} s={rec.s_l:.3f} |h|={rec.norm_h:.3e} |E|={rec.norm_E:.3e} "
                f"delta={rec.delta_l:.1e} parts={rec.parts} cons={rec.consistency} ({rec.wallclock_ms:.0f} ms)",
                flush=True,
            )


def _lp(x, grid, N):
    return x if N is None else low_pass(x, grid, N)


def run(problem: MembraneProblem, sched: IterationSchedule, W0: SpacetimeField | None = None, *, dt: float, **kw):
    """Run the iteration; returns ``(W_inf, report)``."""
    return NashMoser(problem, sched, dt, **kw).run(W0)


def uniqueness_check(problem, sched, W0_a, W0_b, *, dt: float, tol: float = 1e-6, **kw) -> dict:
    """Run from two starts and compare the limits and the difference sequence."""
    solver_a = NashMoser(problem, sched, dt, **kw)
    Wa, ra = solver_a.run(W0_a)
    solver_b = NashMoser(problem, sched, dt, **kw)
    Wb, rb = solver_b.run(W0_b)
    diff = Wa - Wb
    num = float(np.sqrt(np.sum(diff.data**2)))
    den = max(float(np.sqrt(np.sum(Wa.data**2))), 1e-300)
    # difference of partial sums level by level
    seq = []
    Sa = Sb = None
    for ha, hb in zip(solver_a.state.increments, solver_b.state.increments):
        Sa = ha if Sa is None else Sa + ha
        Sb = hb if Sb is None else Sb + hb
        seq.append(spacetime_norm(Sa - Sb, sched.s_bar))
    rel = num / den if den > 1e-300 else num
    return {
        "relative_L2": rel,
        "absolute_L2": num,
        "agree": bool(rel <= tol or num <= tol),
        "difference_sequence": seq,
        "report_a": ra,
        "report_b": rb,
        "W_a": Wa,
        "W_b": Wb,
    }


def epsilon_sweep(make_problem: Callable, epsilons, sched, *, dt: float, **kw) -> dict:
    """Run the iteration for each ``epsilon`` (ascending) and locate the threshold.

    ``make_problem(eps)`` builds the problem. ``epsilon_star`` is the largest
    value below the first non-converging one (``None`` if the smallest fails).
    """
    rows = []
    star = None
    broken = False
    for eps in sorted(float(e) for e in epsilons):
        with np.errstate(all="ignore"):
            _, rep = run(make_problem(eps), sched, dt=dt, **kw)
        rows.append({"epsilon": eps, "status": rep.status, "levels": len(rep.levels), "final_E": rep.levels[-1].norm_E})
        if rep.converged and not broken:
            star = eps
        elif not rep.converged:
            broken = True
    return {"epsilon_star": star, "runs": rows, "threshold_found": bool(broken and star is not None)}
