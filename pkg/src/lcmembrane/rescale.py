"""Change of variables between the rescaled unit-time problem and the long-time one.

``rescale_forward`` takes a rescaled history ``v(t)`` on ``[0, T]`` to
``eps^2 v(sqrt(eps) t)`` on ``[0, T / sqrt(eps)]``; ``rescale_backward`` is
its inverse. On uniform grids both maps only rescale the time step, so the
round trip is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .brackets import induced_metric, metric_eigenvalues
from .grid import Grid2D, SpacetimeField, as_bundle, gradient, time_integral
from .membrane_system import TERM_NAMES, MembraneProblem, term_weights

__all__ = [
    "RescaleInterpolationWarning",
    "rescale_forward",
    "rescale_backward",
    "to_W",
    "from_W",
    "reconstruct_u",
    "Factorization",
    "factorization_check",
    "physical_weights",
    "physical_problem",
]

# polynomial degree and number of memory-integral slots of each term
_DEGREE = {"T1": (2, 1), "T2": (2, 1), "T3": (3, 2), "T4": (3, 2), "T5_linear": (1, 0), "T5_cubic": (3, 2)}


class RescaleInterpolationWarning(UserWarning):
    """Emitted when a history had to be resampled in time."""


def _resample(f: SpacetimeField, dt: float) -> SpacetimeField:
    span = f.t_end - f.t0
    n = int(np.floor(span / dt + 1e-9)) + 1
    data = np.stack([f.at(f.t0 + i * dt) for i in range(n)])
    return SpacetimeField(f.grid, data, dt, f.t0)


def rescale_forward(v: SpacetimeField, epsilon: float, dt: float | None = None) -> SpacetimeField:
    """``v(t) -> eps^2 v(sqrt(eps) t)``; the time step grows by ``1/sqrt(eps)``."""
    _check(v, epsilon)
    r = np.sqrt(epsilon)
    out = SpacetimeField(v.grid, epsilon**2 * v.data, v.dt / r, v.t0 / r)
    if dt is not None and abs(dt - out.dt) > 1e-12 * out.dt:
        warnings.warn("time grid resampled by linear interpolation", RescaleInterpolationWarning, stacklevel=2)
        out = _resample(out, dt)
    return out


def rescale_backward(V: SpacetimeField, epsilon: float, dt: float | None = None) -> SpacetimeField:
    """Inverse of :func:`rescale_forward`."""
    _check(V, epsilon)
    r = np.sqrt(epsilon)
    out = SpacetimeField(V.grid, V.data / epsilon**2, V.dt * r, V.t0 * r)
    if dt is not None and abs(dt - out.dt) > 1e-12 * out.dt:
        warnings.warn("time grid resampled by linear interpolation", RescaleInterpolationWarning, stacklevel=2)
        out = _resample(out, dt)
    return out


def _check(v: SpacetimeField, epsilon: float):
    if v.nt == 0:
        raise ValueError("empty history")
    if not 0 < epsilon <= 1:
        raise ValueError("epsilon must lie in (0, 1]")


def to_W(v: SpacetimeField, v0, v1) -> SpacetimeField:
    """``W = v - v0 - v1 t``."""
    v0 = as_bundle(v0, v.grid)
    v1 = as_bundle(v1, v.grid)
    t = (v.times - v.t0)[:, None, None, None]
    return v.with_data(v.data - v0 - v1 * t)


def from_W(W: SpacetimeField, v0, v1) -> SpacetimeField:
    """Inverse of :func:`to_W`."""
    v0 = as_bundle(v0, W.grid)
    v1 = as_bundle(v1, W.grid)
    t = (W.times - W.t0)[:, None, None, None]
    return W.with_data(W.data + v0 + v1 * t)


def reconstruct_u(u0, v: SpacetimeField, t: float) -> np.ndarray:
    """``u(t) = u0 + int_0^t v`` by the trapezoid rule."""
    u0 = as_bundle(u0, v.grid)
    if t < v.t0 - 1e-12 or t > v.t_end + 1e-9 * max(1.0, v.t_end):
        raise ValueError(f"t={t} outside the stored history")
    return u0 + time_integral(v, t)


@dataclass
class Factorization:
    gamma0: np.ndarray
    gamma_cd: np.ndarray
    c0: float
    bounds: dict
    c2: float
    heuristic: bool


def factorization_check(u0, grid: Grid2D, gamma0=None, lambda_ref: float = 1.0) -> Factorization:
    """Split ``gamma(u0) = gamma0 * gamma_cd`` and measure the constants.

    Without a supplied ``gamma0`` the heuristic ``min(1, lambda_min / lambda_ref)``
    is used (``lambda_min`` the smaller metric eigenvalue). Where ``gamma0``
    vanishes, ``gamma_cd`` is set to the identity. Reports the smallest ``c0``
    in ``|d gamma0| <= c0 gamma0``, eigenvalue bounds of ``gamma_cd`` and of its
    derivatives, and ``c2`` in ``|d_a gamma(u0)| <= c2 gamma0``.
    """
    u0 = as_bundle(u0, grid)
    full = induced_metric(u0, grid)
    heuristic = gamma0 is None
    if heuristic:
        lam_min = metric_eigenvalues(full)[0]
        g0 = np.clip(lam_min / lambda_ref, 0.0, 1.0)
    else:
        g0 = np.broadcast_to(np.asarray(gamma0, dtype=float), grid.shape).copy()
    scale = max(1.0, float(np.abs(full).max()))
    tiny = 1e-13 * scale
    pos = g0 > tiny
    eye = np.eye(2)[:, :, None, None] * np.ones(grid.shape)
    gam = np.where(pos, full / np.where(pos, g0, 1.0), eye)
    dg0 = gradient(g0, grid)
    mag = np.sqrt(np.sum(dg0**2, axis=0))
    c0 = _ratio(mag, g0, tiny)
    ev = metric_eigenvalues(gam)
    dgam = gradient(gam, grid)
    dev = np.stack([metric_eigenvalues(dgam[a]) for a in range(2)])
    bounds = {
        "gamma1": float(ev[0].min()),
        "gamma2": float(ev[1].max()),
        "gamma3": float(dev[:, 0].min()),
        "gamma4": float(dev[:, 1].max()),
    }
    dfull = gradient(full, grid)
    opn = np.max(np.stack([np.abs(metric_eigenvalues(dfull[a])).max(axis=0) for a in range(2)]), axis=0)
    c2 = _ratio(opn, g0, tiny)
    return Factorization(g0, gam, c0, bounds, c2, heuristic)


def _ratio(num, den, tiny) -> float:
    pos = den > tiny
    if np.any(num[~pos] > 1e3 * tiny):
        return float("inf")
    if not np.any(pos):
        return 0.0
    return float((num[pos] / den[pos]).max())


def physical_weights(epsilon: float) -> dict[str, float]:
    """Term weights of the long-time system whose rescaling is the unit-time one.

    A term of degree ``p`` with ``q`` memory slots picks up
    ``eps^(5 - 2p + q/2)`` under ``V(t) = eps^2 v(sqrt(eps) t)``.
    """
    base = term_weights(epsilon)
    out = {}
    for name in TERM_NAMES:
        p, q = _DEGREE[name]
        out[name] = base[name] * epsilon ** (5 - 2 * p + q / 2)
    return out


def physical_problem(problem: MembraneProblem) -> MembraneProblem:
    """The long-time problem on ``[0, T / sqrt(eps)]`` matching ``problem``."""
    eps = problem.epsilon
    return MembraneProblem(
        problem.grid,
        problem.u0,
        eps**2 * problem.v0,
        eps**2.5 * problem.v1,
        eps,
        problem.T / np.sqrt(eps),
        name=(problem.name + "-physical") if problem.name else "physical",
        weights=physical_weights(eps),
        principal_scale=1.0,
    )
