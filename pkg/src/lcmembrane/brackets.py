"""Poisson-bracket algebra on the torus and the light-cone membrane force.

The bracket is ``{f, g} = w^{-1/2} eps^{ab} d_a f d_b g``. Products are
evaluated on the 3/2-padded grid, so the bracket of two band-limited fields
is exact up to the final mode truncation.
"""

from __future__ import annotations

import numpy as np

from .grid import EPSILON_SYMBOL, Grid2D, gradient

__all__ = [
    "poisson_bracket",
    "jacobi_residual",
    "induced_metric",
    "induced_metric_from_gradients",
    "metric_eigenvalues",
    "bracket_matrix",
    "membrane_rhs",
    "membrane_rhs_local",
    "constraint_residual",
    "initial_data_compatibility",
    "compatible_v1",
    "reduced_hamiltonian",
]


def _padded_inv_sqrt_w(grid: Grid2D):
    if grid.uniform_w:
        return None
    return grid.to_padded(1.0 / grid.sqrt_w)


def poisson_bracket(f: np.ndarray, g: np.ndarray, grid: Grid2D) -> np.ndarray:
    """``{f, g}``; ``f`` and ``g`` broadcast against each other."""
    df = grid.to_padded(gradient(f, grid))
    dg = grid.to_padded(gradient(g, grid))
    out = df[0] * dg[1] - df[1] * dg[0]
    iw = _padded_inv_sqrt_w(grid)
    if iw is not None:
        out = out * iw
    return grid.from_padded(out)


def jacobi_residual(f, g, h, grid: Grid2D) -> np.ndarray:
    """Cyclic sum ``{{f,g},h} + {{g,h},f} + {{h,f},g}``."""
    pb = lambda a, b: poisson_bracket(a, b, grid)  # noqa: E731
    return pb(pb(f, g), h) + pb(pb(g, h), f) + pb(pb(h, f), g)


def induced_metric_from_gradients(du: np.ndarray, grid: Grid2D) -> np.ndarray:
    """``gamma_cd = sum_m d_c u^m d_d u^m`` from supplied gradients ``du[m, c]``.

    Returns an array of shape ``(2, 2, n1, n2)``.
    """
    dp = grid.to_padded(du)
    gam = np.einsum("mcxy,mdxy->cdxy", dp, dp)
    return grid.from_padded(gam)


def induced_metric(u: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Induced metric of a component bundle ``u`` of shape ``(m, n1, n2)``."""
    du = np.stack([gradient(um, grid) for um in np.atleast_3d(u).reshape(-1, *grid.shape)])
    return induced_metric_from_gradients(du, grid)


def metric_eigenvalues(gamma: np.ndarray) -> np.ndarray:
    """Pointwise eigenvalues (ascending) of a symmetric 2x2 field, shape ``(2, n1, n2)``."""
    a, b, c = gamma[0, 0], 0.5 * (gamma[0, 1] + gamma[1, 0]), gamma[1, 1]
    mean = 0.5 * (a + c)
    rad = np.sqrt((0.5 * (a - c)) ** 2 + b**2)
    return np.stack([mean - rad, mean + rad])


def bracket_matrix(u: np.ndarray, grid: Grid2D) -> np.ndarray:
    """All pairwise brackets ``A[m, n] = {u^m, u^n}``, antisymmetric by construction."""
    m = u.shape[0]
    A = np.zeros((m, m) + grid.shape)
    for i in range(m):
        for j in range(i + 1, m):
            A[i, j] = poisson_bracket(u[i], u[j], grid)
            A[j, i] = -A[i, j]
    return A


def membrane_rhs(u: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Light-cone force ``{{u^m, u^n}, u_n}`` by nested brackets."""
    A = bracket_matrix(u, grid)
    m = u.shape[0]
    out = np.zeros_like(u, dtype=float)
    for i in range(m):
        for j in range(m):
            if i != j:
                out[i] += poisson_bracket(A[i, j], u[j], grid)
    return out


def membrane_rhs_local(u: np.ndarray, grid: Grid2D) -> np.ndarray:
    """The same force from its local-coordinate expansion.

    Principal part ``w^{-1}(eps^{ac}eps^{bd} gamma_cd delta_mn
    - eps^{ac}eps^{bd} d_c u_m d_d u_n) d_a d_b u^n`` plus the lower-order term
    ``w^{-1/2} d_a(w^{-1/2}) eps^{ab} eps^{cd} gamma_bd d_c u^m`` that appears
    when ``w`` is not constant. Products are taken pointwise on the grid.
    """
    eps = EPSILON_SYMBOL
    du = np.stack([gradient(um, grid) for um in u])  # (m, a, x, y)
    ddu = np.stack([np.stack([gradient(du[n, a], grid) for a in range(2)]) for n in range(len(u))])
    gam = np.einsum("mcxy,mdxy->cdxy", du, du)
    gup = np.einsum("ac,bd,cdxy->abxy", eps, eps, gam)
    winv = 1.0 / grid.w_values
    first = np.einsum("abxy,mabxy->mxy", gup, ddu)
    second = np.einsum("ac,bd,mcxy,ndxy,nabxy->mxy", eps, eps, du, du, ddu)
    out = winv * (first - second)
    if not grid.uniform_w:
        isw = 1.0 / grid.sqrt_w
        d_isw = gradient(isw, grid)
        coef = np.einsum("ab,cd,axy,bdxy->cxy", eps, eps, d_isw, gam) * isw
        out = out + np.einsum("cxy,mcxy->mxy", coef, du)
    return out


def constraint_residual(v: np.ndarray, u: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Area-preserving constraint ``sum_m {v^m, u^m}``."""
    if v.shape != u.shape:
        raise ValueError("v and u bundles must match")
    return np.sum(poisson_bracket(v, u, grid), axis=0)


def compatible_v1(u0: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Second-derivative data consistent with the bracket equation at ``t = 0``."""
    return membrane_rhs(u0, grid)


def initial_data_compatibility(u0, v0, v1, grid: Grid2D):
    """Residuals of the two initial-data conditions.

    Returns ``(sum_m {v0^m, u0^m}, v1 - {{u0, u0}, u0})`` as a scalar field and a
    bundle.
    """
    return constraint_residual(v0, u0, grid), v1 - membrane_rhs(u0, grid)


def reduced_hamiltonian(u: np.ndarray, p: np.ndarray, grid: Grid2D) -> float:
    """``int sqrt(w)/4 (2 p.p / w + {u^m,u^n}{u_m,u_n})`` with the gauge term dropped."""
    if u.shape != p.shape:
        raise ValueError("u and p bundles must match")
    A = bracket_matrix(u, grid)
    dens = 2.0 * np.sum(p**2, axis=0) / grid.w_values + np.sum(A**2, axis=(0, 1))
    return float(grid.integrate(0.25 * dens))
