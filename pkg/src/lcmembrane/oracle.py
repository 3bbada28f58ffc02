"""Independent reference solver by the method of lines.

Nothing here goes through the operator assembly of :mod:`membrane_system` or
the padded products of :mod:`grid`. The solver upsamples the data to a finer
grid (twice the resolution by default), takes pointwise products there and
steps with classical RK4. Two models are available:

``"model"``
    ``v_tt = kappa d_a(Gamma^{ab} d_b v) + s F(v, V)`` with ``V' = v``; the
    memory terms are summed into one metric perturbation and a single
    cofactor is applied, unlike the term-by-term slots of the iteration.
``"membrane"``
    The time-differentiated bracket equation for ``(u, v, v_t)`` with
    ``u' = v`` and ``v_tt = {{v,u},u} + {{u,v},u} + {{u,u},v}`` (index sums
    implied), evaluated with nested brackets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .degenerate_wave import CFLViolation
from .grid import Grid2D, SpacetimeField, sobolev_norm
from .membrane_system import MembraneProblem

__all__ = [
    "BlowUp",
    "OracleResult",
    "direct_solve",
    "direct_residual",
    "CompareReport",
    "compare",
    "resample_field",
]

_E = np.array([[0.0, 1.0], [-1.0, 0.0]])


class BlowUp(RuntimeError):
    """Raised on request when the trajectory stops being finite or bounded."""

    def __init__(self, msg: str, time: float):
        super().__init__(msg)
        self.time = time


def resample_field(f: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Trigonometric interpolation of the last two axes onto ``shape``.

    Upsampling zero-pads the spectrum; downsampling truncates it. Nyquist
    modes of the source are dropped so the result stays real.
    """
    f = np.asarray(f, dtype=float)
    n1, n2 = f.shape[-2:]
    m1, m2 = shape
    fh = np.fft.fft2(f, axes=(-2, -1))
    k1 = min(n1, m1) // 2
    k2 = min(n2, m2) // 2
    out = np.zeros(f.shape[:-2] + (m1, m2), dtype=complex)
    out[..., :k1, :k2] = fh[..., :k1, :k2]
    out[..., :k1, m2 - k2 + 1:] = fh[..., :k1, n2 - k2 + 1:]
    out[..., m1 - k1 + 1:, :k2] = fh[..., n1 - k1 + 1:, :k2]
    out[..., m1 - k1 + 1:, m2 - k2 + 1:] = fh[..., n1 - k1 + 1:, n2 - k2 + 1:]
    return np.fft.ifft2(out, axes=(-2, -1)).real * (m1 * m2) / (n1 * n2)


class _Calculus:
    """Spectral derivatives and brackets on one fine grid."""

    def __init__(self, n1, n2, L1, L2, w):
        self.shape = (n1, n2)
        k1 = 2 * np.pi * np.fft.fftfreq(n1, L1 / n1)
        k2 = 2 * np.pi * np.fft.rfftfreq(n2, L2 / n2)
        k1[n1 // 2] = 0.0
        if n2 % 2 == 0:
            k2[-1] = 0.0
        self.ik1 = 1j * k1[:, None]
        self.ik2 = 1j * k2[None, :]
        self.w = w
        self.isw = None if w is None else 1.0 / np.sqrt(w)
        self.cell = (L1 / n1) * (L2 / n2)

    def grad(self, f):
        fh = np.fft.rfft2(f, axes=(-2, -1))
        s = self.shape
        return np.stack(
            [np.fft.irfft2(self.ik1 * fh, s=s, axes=(-2, -1)), np.fft.irfft2(self.ik2 * fh, s=s, axes=(-2, -1))],
            axis=-3,
        )

    def div(self, flux):
        fh = np.fft.rfft2(flux, axes=(-2, -1))
        return np.fft.irfft2(self.ik1 * fh[..., 0, :, :] + self.ik2 * fh[..., 1, :, :], s=self.shape, axes=(-2, -1))

    def bracket_from_grads(self, df, dg):
        out = df[..., 0, :, :] * dg[..., 1, :, :] - df[..., 1, :, :] * dg[..., 0, :, :]
        return out if self.isw is None else out * self.isw

    def bracket(self, f, g):
        return self.bracket_from_grads(self.grad(f), self.grad(g))

    def integrate(self, f):
        vol = 1.0 if self.w is None else np.sqrt(self.w)
        return np.sum(f * vol, axis=(-2, -1)) * self.cell


def _cofactor(S):
    # e^{ac} e^{bd} S_cd for S (..., 2, 2, x, y)
    out = np.empty_like(S)
    out[..., 0, 0, :, :] = S[..., 1, 1, :, :]
    out[..., 1, 1, :, :] = S[..., 0, 0, :, :]
    out[..., 0, 1, :, :] = -S[..., 1, 0, :, :]
    out[..., 1, 0, :, :] = -S[..., 0, 1, :, :]
    return out


def _apply(M, g):
    # (M g)^m_a = M^{ab} g^m_b ; M (2, 2, x, y), g (m, 2, x, y)
    return np.stack([M[0, 0] * g[:, 0] + M[0, 1] * g[:, 1], M[1, 0] * g[:, 0] + M[1, 1] * g[:, 1]], axis=1)


class _ModelRHS:
    def __init__(self, cal: _Calculus, problem: MembraneProblem, u0f):
        self.cal = cal
        self.kappa = problem.kappa
        self.s = problem.forcing_scale
        self.wt = problem.term_weights
        du0 = cal.grad(u0f)  # (m, 2, x, y)
        self.du0 = du0
        gamma0 = np.einsum("mcxy,mdxy->cdxy", du0, du0)
        self.gamma0 = gamma0
        self.cof0 = _cofactor(gamma0)
        self.winv = None if cal.w is None else 1.0 / cal.w
        if cal.isw is None:
            self.beta = None
        else:
            d = cal.grad(cal.isw)
            self.beta = cal.isw * np.stack([-d[1], d[0]])  # w^{-1/2} e^{cd} d_c w^{-1/2}

    def forcing(self, v, V):
        cal, wt = self.cal, self.wt
        dv = cal.grad(v)
        dV = cal.grad(V)
        cross = np.einsum("ncxy,ndxy->cdxy", self.du0, dV)
        # memory part of the metric, each piece with its weight
        dg = wt["T1"] * cross + wt["T2"] * np.swapaxes(cross, 0, 1) + wt["T3"] * np.einsum("ncxy,ndxy->cdxy", dV, dV)
        flux = _apply(_cofactor(dg), dv)
        # w^{-1} {V^m, V^n}-type coupling through e^{ab}
        J = dV[:, None, 0] * dV[None, :, 1] - dV[:, None, 1] * dV[None, :, 0]  # (m, n, x, y)
        if self.winv is not None:
            J = J * self.winv
        Jd = np.einsum("mnxy,nbxy->mbxy", J, dv)
        flux = flux + wt["T4"] * np.stack([Jd[:, 1], -Jd[:, 0]], axis=1)
        out = cal.div(flux)
        if self.beta is not None:
            b = self.beta
            # e^{ab} beta_d gamma0_bd d_a v
            c = np.stack([b[0] * self.gamma0[1, 0] + b[1] * self.gamma0[1, 1], -(b[0] * self.gamma0[0, 0] + b[1] * self.gamma0[0, 1])])
            out = out + wt["T5_linear"] * (c[0] * dv[:, 0] + c[1] * dv[:, 1])
            P = np.einsum("nbxy,ndxy->bdxy", dV, dv)
            q = np.stack([b[0] * P[1, 0] + b[1] * P[1, 1], -(b[0] * P[0, 0] + b[1] * P[0, 1])])
            out = out + wt["T5_cubic"] * 2.0 * (q[0] * dV[:, 0] + q[1] * dV[:, 1])
        return out

    def principal(self, v):
        return self.cal.div(_apply(self.cof0, self.cal.grad(v)))

    def __call__(self, state):
        V, v, p = state
        acc = self.kappa * self.principal(v) + self.s * self.forcing(v, V)
        return np.stack([v, p, acc])

    def speed2(self):
        lam = 0.5 * (self.cof0[0, 0] + self.cof0[1, 1]) + np.sqrt(0.25 * (self.cof0[0, 0] - self.cof0[1, 1]) ** 2 + self.cof0[0, 1] ** 2)
        return self.kappa * float(lam.max())


class _MembraneRHS:
    def __init__(self, cal: _Calculus):
        self.cal = cal

    def __call__(self, state):
        u, v, p = state
        cal = self.cal
        du, dv = cal.grad(u), cal.grad(v)
        Auu = cal.bracket_from_grads(du[:, None], du[None, :])
        Avu = cal.bracket_from_grads(dv[:, None], du[None, :])
        dAuu, dAvu = cal.grad(Auu), cal.grad(Avu)
        # {{v^m,u^n},u^n} + {{u^m,v^n},u^n} + {{u^m,u^n},v^n}, summed over n
        t1 = cal.bracket_from_grads(dAvu, du[None, :]).sum(axis=1)
        t2 = -cal.bracket_from_grads(np.swapaxes(dAvu, 0, 1), du[None, :]).sum(axis=1)
        t3 = cal.bracket_from_grads(dAuu, dv[None, :]).sum(axis=1)
        return np.stack([v, p, t1 + t2 + t3])

    def speed2_of(self, u):
        du = self.cal.grad(u)
        g = np.einsum("mcxy,mdxy->cdxy", du, du)
        lam = 0.5 * (g[0, 0] + g[1, 1]) + np.sqrt(0.25 * (g[0, 0] - g[1, 1]) ** 2 + g[0, 1] ** 2)
        wmin = 1.0 if self.cal.w is None else float(self.cal.w.min())
        return float(lam.max()) / wmin


@dataclass
class OracleResult:
    """Trajectory on the problem grid plus diagnostics.

    Unpacks as ``v, u = result``.
    """

    v: SpacetimeField
    u: SpacetimeField
    mode: str
    constraint: np.ndarray
    hamiltonian: np.ndarray
    energy: np.ndarray
    blown_up: bool = False
    blowup_time: float | None = None
    refine: int = 2
    substeps: int = 1
    details: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.v
        yield self.u

    @property
    def times(self) -> np.ndarray:
        return self.v.times

    def constraint_sup(self) -> float:
        return float(np.max(np.abs(self.constraint)))

    def hamiltonian_drift(self) -> float:
        h = self.hamiltonian
        return float(np.max(np.abs(h - h[0])) / max(abs(h[0]), 1e-300))


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _fine_setup(grid: Grid2D, refine: int):
    if refine < 1 or int(refine) != refine:
        raise ValueError("refine must be a positive integer")
    fs = (grid.n1 * refine, grid.n2 * refine)
    w = None if grid.uniform_w else resample_field(grid.w_values, fs)
    if w is not None and np.any(w <= 0):
        raise ValueError("area density lost positivity on the fine grid")
    return fs, _Calculus(fs[0], fs[1], grid.L1, grid.L2, w)


def direct_solve(
    problem: MembraneProblem,
    dt: float,
    *,
    mode: str = "model",
    refine: int = 2,
    substeps: int = 1,
    cfl: float | None = None,
    scheme: str = "rk4",
    blowup_threshold: float = 1e8,
    raise_on_blowup: bool = False,
    compat_tol: float | None = None,
) -> OracleResult:
    """Integrate the problem on ``[0, T]`` and return samples every ``dt``.

    RK4 runs with step ``dt / substeps`` on a grid ``refine`` times finer;
    stored fields are truncated back to the problem grid. ``cfl`` bounds
    ``omega_max * step`` (RK4 is stable on the imaginary axis up to about
    2.83); it defaults to 2.5 for RK4 and 0.9 for ``scheme="leapfrog"``, the
    second-order explicit midpoint rule (first step by RK4). A non-finite state or one exceeding ``blowup_threshold`` ends the
    run; the partial trajectory is returned with ``blown_up`` set.
    """
    if mode not in ("model", "membrane"):
        raise ValueError(f"unknown mode {mode!r}")
    if scheme not in ("rk4", "leapfrog"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if cfl is None:
        cfl = 2.5 if scheme == "rk4" else 0.9
    if dt <= 0:
        raise ValueError("dt must be positive")
    nt = int(round(problem.T / dt)) + 1
    if abs((nt - 1) * dt - problem.T) > 1e-9 * problem.T:
        raise ValueError("T must be an integer multiple of dt")
    grid = problem.grid
    if compat_tol is not None:
        from .brackets import initial_data_compatibility

        r0, r1 = initial_data_compatibility(problem.u0, problem.v0, problem.v1, grid)
        worst = max(float(np.abs(r0).max()), float(np.abs(r1).max()))
        if worst > compat_tol:
            raise ValueError(f"initial data violate compatibility: residual {worst:.3e}")
    fs, cal = _fine_setup(grid, refine)
    up = lambda f: resample_field(f, fs)  # noqa: E731
    down = lambda f: resample_field(f, grid.shape)  # noqa: E731
    u0f, v0f, v1f = up(problem.u0), up(problem.v0), up(problem.v1)
    h = dt / substeps
    kmax = np.hypot(np.pi * fs[0] / grid.L1, np.pi * fs[1] / grid.L2)
    if mode == "model":
        rhs = _ModelRHS(cal, problem, u0f)
        c2 = rhs.speed2()
        y = np.stack([np.zeros_like(v0f), v0f, v1f])
    else:
        rhs = _MembraneRHS(cal)
        c2 = rhs.speed2_of(u0f)
        y = np.stack([u0f, v0f, v1f])
    omega = np.sqrt(max(c2, 0.0)) * kmax
    if omega * h > cfl:
        raise CFLViolation(f"omega_max*dt = {omega * h:.3f} exceeds {cfl} (omega_max = {omega:.3e})")

    vs = np.empty((nt,) + problem.u0.shape)
    us = np.empty_like(vs)
    cons = np.empty(nt)
    ham = np.empty(nt)
    en = np.empty(nt)

    def record(i, y):
        if mode == "model":
            u = u0f + y[0]
        else:
            u = y[0]
        v = y[1]
        vs[i] = down(v)
        us[i] = down(u)
        du, dv = cal.grad(u), cal.grad(v)
        cons[i] = float(np.abs(cal.bracket_from_grads(dv, du).sum(axis=0)).max())
        A = cal.bracket_from_grads(du[:, None], du[None, :])
        winv = 1.0 if cal.w is None else 1.0 / cal.w
        ham[i] = float(cal.integrate(0.25 * (2.0 * np.sum(v**2, axis=0) * winv + np.sum(A**2, axis=(0, 1)))))
        if mode == "model":
            dens = np.sum(y[2] ** 2, axis=0) + rhs.kappa * np.einsum("abxy,maxy,mbxy->xy", rhs.cof0, dv, dv)
        else:
            dens = np.sum(y[2] ** 2, axis=0)
        en[i] = float(cal.integrate(0.5 * dens))

    record(0, y)
    blown, t_blow = False, None
    last = 0
    y_prev = None
    for n in range(1, nt):
        for _ in range(substeps):
            if scheme == "rk4" or y_prev is None:
                y_prev, y = y, _rk4(rhs, y, h)
            else:
                y_prev, y = y, y_prev + 2.0 * h * rhs(y)
        size = float(np.abs(y).max())
        if not np.isfinite(size) or size > blowup_threshold:
            blown, t_blow = True, n * dt
            break
        record(n, y)
        last = n
    if blown:
        if raise_on_blowup:
            raise BlowUp(f"trajectory blew up at t = {t_blow:.6g}", t_blow)
        k = last + 1
        vs, us, cons, ham, en = vs[:k], us[:k], cons[:k], ham[:k], en[:k]
    v = SpacetimeField(grid, vs, dt)
    u = SpacetimeField(grid, us, dt)
    return OracleResult(v, u, mode, cons, ham, en, blown, t_blow, refine, substeps,
                        details={"omega_max": omega, "fine_shape": fs, "scheme": scheme})


def direct_residual(problem: MembraneProblem, v: SpacetimeField, u: SpacetimeField | None = None, *, mode: str = "model", refine: int = 2) -> np.ndarray:
    """Centered second difference of ``v`` minus the oracle's right-hand side.

    Returned per interior node ``1 .. nt-2``; the values are ``O(dt^2)`` for a
    smooth trajectory. In model mode ``V`` is rebuilt from ``v`` with the
    trapezoid rule (also ``O(dt^2)``).
    """
    fs, cal = _fine_setup(problem.grid, refine)
    up = lambda f: resample_field(f, fs)  # noqa: E731
    d = v.data
    acc = (d[2:] - 2 * d[1:-1] + d[:-2]) / v.dt**2
    out = np.empty_like(acc)
    if mode == "model":
        rhs = _ModelRHS(cal, problem, up(problem.u0))
        V = np.concatenate([np.zeros((1,) + d.shape[1:]), np.cumsum(0.5 * (d[1:] + d[:-1]) * v.dt, axis=0)])
        for i in range(1, v.nt - 1):
            vf = up(d[i])
            a = rhs.kappa * rhs.principal(vf) + rhs.s * rhs.forcing(vf, up(V[i]))
            out[i - 1] = acc[i - 1] - resample_field(a, problem.grid.shape)
    else:
        if u is None:
            raise ValueError("membrane mode needs the u trajectory")
        rhs = _MembraneRHS(cal)
        for i in range(1, v.nt - 1):
            p = np.zeros_like(up(d[i]))
            a = rhs(np.stack([up(u.data[i]), up(d[i]), p]))[2]
            out[i - 1] = acc[i - 1] - resample_field(a, problem.grid.shape)
    return out


# -- comparison ----------------------------------------------------------------


@dataclass
class CompareReport:
    """Per-snapshot and aggregated differences of two histories."""

    times: np.ndarray
    abs_l2: np.ndarray
    rel_l2: np.ndarray
    abs_h1: np.ndarray
    rel_h1: np.ndarray
    abs_sup: np.ndarray
    rel_sup: np.ndarray
    interpolated: bool
    aggregate: dict

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "abs_l2": self.abs_l2.tolist(),
            "rel_l2": self.rel_l2.tolist(),
            "abs_h1": self.abs_h1.tolist(),
            "rel_h1": self.rel_h1.tolist(),
            "abs_sup": self.abs_sup.tolist(),
            "rel_sup": self.rel_sup.tolist(),
            "interpolated": self.interpolated,
            "aggregate": dict(self.aggregate),
        }


_NORMS = ("l2", "h1", "sup")


def compare(a: SpacetimeField, b: SpacetimeField, norm_spec="all") -> CompareReport:
    """Differences ``a - b`` measured against ``b``.

    ``norm_spec`` is ``"all"`` or a subset of ``("l2", "h1", "sup")``; norms
    not requested are reported as NaN. If the time grids differ, ``b`` is
    linearly interpolated onto the times of ``a`` inside the common range and
    the report is flagged ``interpolated``.
    """
    wanted = set(_NORMS if norm_spec == "all" else ([norm_spec] if isinstance(norm_spec, str) else norm_spec))
    bad = wanted - set(_NORMS)
    if bad:
        raise ValueError(f"unknown norms {sorted(bad)}")
    if not a.grid.same_as(b.grid):
        raise ValueError("fields live on different grids")
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError("component counts differ")
    lo, hi = max(a.t0, b.t0), min(a.t_end, b.t_end)
    tol = 1e-9 * max(a.dt, b.dt)
    if hi < lo - tol:
        raise ValueError("time ranges do not overlap")
    same_times = a.nt == b.nt and abs(a.dt - b.dt) <= 1e-12 * a.dt and abs(a.t0 - b.t0) <= tol
    if same_times:
        times, A, B = a.times, a.data, b.data
        interp = False
    else:
        ta = a.times
        keep = (ta >= lo - tol) & (ta <= hi + tol)
        times = ta[keep]
        A = a.data[keep]
        B = np.stack([b.at(float(np.clip(t, b.t0, b.t_end))) for t in times])
        interp = True
    g = a.grid
    D = A - B

    def series(F, kind):
        if kind not in wanted:
            return np.full(len(F), np.nan)
        if kind == "l2":
            return np.array([sobolev_norm(f, g, 0) for f in F])
        if kind == "h1":
            return np.array([sobolev_norm(f, g, 1) for f in F])
        return np.abs(F).reshape(len(F), -1).max(axis=1)

    out = {}
    agg = {}
    for kind in _NORMS:
        d = series(D, kind)
        r = series(B, kind)
        out["abs_" + kind] = d
        with np.errstate(divide="ignore", invalid="ignore"):
            out["rel_" + kind] = np.where(r > 0, d / np.where(r > 0, r, 1.0), np.where(d > 0, np.inf, 0.0))
        if kind in wanted:
            if kind == "sup":
                num, den = float(d.max()), float(r.max())
            else:
                num, den = float(np.sqrt(np.sum(d**2))), float(np.sqrt(np.sum(r**2)))
            agg["abs_" + kind] = num if kind == "sup" else num / np.sqrt(len(d))
            agg["rel_" + kind] = num / den if den > 0 else (0.0 if num == 0 else float("inf"))
            agg["max_abs_" + kind] = float(d.max())
    return CompareReport(times, out["abs_l2"], out["rel_l2"], out["abs_h1"], out["rel_h1"], out["abs_sup"], out["rel_sup"], interp, agg)
