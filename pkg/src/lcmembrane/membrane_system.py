"""The time-differentiated membrane system and its rescaled nonlinearity.

The rescaled unknown satisfies

    v_tt - eps^{-1} d_a(Gamma^{ab} d_b v) = eps^2 F(v),
    Gamma^{ab} = e^{ac} e^{bd} gamma(u0)_cd,

with ``F`` a sum of multilinear terms in ``v`` and its memory integral
``V = int_0^t v``. Each term is coded once as a multilinear function of its
slots; the nonlinearity, its Frechet derivative and the Taylor remainder are
the slot substitutions ``(v, v, v)``, "exactly one slot h" and "at least two
slots h". Products are de-aliased on the 3/2-padded grid, so every term is
exactly multilinear on the discrete level.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .brackets import initial_data_compatibility, induced_metric
from .grid import (
    EPSILON_SYMBOL,
    Grid2D,
    SpacetimeField,
    as_bundle,
    cumulative_time_integral,
    gradient,
    low_pass,
)

__all__ = [
    "TERM_NAMES",
    "term_weights",
    "MembraneProblem",
    "MembraneSystem",
    "Slot",
    "modified_rhs",
    "nonlinear_F",
    "frechet_derivative",
    "remainder_R",
]

EPS = EPSILON_SYMBOL

# name -> slot kinds; "m" reads the memory integral, "v" the value itself
_TERM_SLOTS = {
    "T1": ("m", "v"),
    "T2": ("m", "v"),
    "T3": ("m", "m", "v"),
    "T4": ("m", "m", "v"),
    "T5_linear": ("v",),
    "T5_cubic": ("m", "m", "v"),
}
TERM_NAMES = tuple(_TERM_SLOTS)


def term_weights(epsilon: float) -> dict[str, float]:
    """Coefficients of the terms of ``F`` on the rescaled clock."""
    return {
        "T1": 1.0,
        "T2": 1.0,
        "T3": epsilon,
        "T4": -2.0 * epsilon,
        "T5_linear": -epsilon,
        "T5_cubic": -epsilon,
    }


@dataclass(frozen=True, eq=False)
class MembraneProblem:
    """Initial data and scales for the rescaled membrane problem.

    ``u0`` is the initial embedding, ``v0``/``v1`` the initial velocity and
    acceleration of ``v = d_t u``. When ``compat_tol`` is given, the data must
    satisfy both initial-data compatibility conditions to that tolerance.
    """

    grid: Grid2D
    u0: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    epsilon: float
    T: float
    compat_tol: float | None = None
    name: str = ""
    weights: dict | None = field(default=None, repr=False)
    principal_scale: float | None = None

    def __post_init__(self):
        for key in ("u0", "v0", "v1"):
            object.__setattr__(self, key, as_bundle(getattr(self, key), self.grid))
        if not (self.u0.shape == self.v0.shape == self.v1.shape):
            raise ValueError("u0, v0, v1 must have the same number of components")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.T <= 0:
            raise ValueError("T must be positive")
        if self.compat_tol is not None:
            r0, r1 = initial_data_compatibility(self.u0, self.v0, self.v1, self.grid)
            worst = max(np.abs(r0).max(), np.abs(r1).max())
            if worst > self.compat_tol:
                raise ValueError(f"initial data violate compatibility: residual {worst:.3e}")

    @property
    def num_components(self) -> int:
        return self.u0.shape[0]

    @property
    def term_weights(self) -> dict[str, float]:
        return dict(self.weights) if self.weights is not None else term_weights(self.epsilon)

    @property
    def kappa(self) -> float:
        """Coefficient of the principal part (``1/epsilon`` on the rescaled clock)."""
        return 1.0 / self.epsilon if self.principal_scale is None else self.principal_scale

    @property
    def forcing_scale(self) -> float:
        """Overall factor in front of ``F`` (``epsilon**2`` on the rescaled clock)."""
        return self.epsilon**2 if self.weights is None else 1.0

    def base_velocity(self, t):
        """The affine part ``v0 + v1 t`` (broadcasts over an array of times)."""
        t = np.asarray(t, dtype=float)
        return self.v0 + self.v1 * t[..., None, None, None]

    def base_integral(self, t):
        t = np.asarray(t, dtype=float)[..., None, None, None]
        return self.v0 * t + 0.5 * self.v1 * t**2


@dataclass
class Slot:
    """Padded gradients of a value and of its memory integral."""

    grad: np.ndarray  # (..., m, 2, X, Y)
    mem_grad: np.ndarray

    def pick(self, kind: str) -> np.ndarray:
        return self.mem_grad if kind == "m" else self.grad


class MembraneSystem:
    """Operator assembly for one problem; caches everything derived from ``u0``."""

    def __init__(self, problem: MembraneProblem, smoothing: int | None = None):
        self.problem = problem
        self.grid = problem.grid
        self.smoothing = smoothing

    # -- cached coefficient data -------------------------------------------

    @cached_property
    def gamma0(self) -> np.ndarray:
        """``gamma(u0)_cd``, shape ``(2, 2, n1, n2)``."""
        return induced_metric(self.problem.u0, self.grid)

    @cached_property
    def gamma0_up(self) -> np.ndarray:
        """``e^{ac} e^{bd} gamma(u0)_cd`` (the cofactor matrix)."""
        return np.einsum("ac,bd,cdxy->abxy", EPS, EPS, self.gamma0)

    @cached_property
    def _p_du0(self):
        return self.grid.to_padded(np.stack([gradient(u, self.grid) for u in self.problem.u0]))

    @cached_property
    def _p_gamma0_up(self):
        return self.grid.to_padded(self.gamma0_up)

    @cached_property
    def _p_gamma0(self):
        return self.grid.to_padded(self.gamma0)

    @cached_property
    def _p_winv(self):
        return None if self.grid.uniform_w else self.grid.to_padded(1.0 / self.grid.w_values)

    @cached_property
    def beta(self):
        """``w^{-1/2} e^{cd} d_c(w^{-1/2})``; ``None`` when ``w`` is constant."""
        if self.grid.uniform_w:
            return None
        isw = 1.0 / self.grid.sqrt_w
        return isw * np.einsum("cd,cxy->dxy", EPS, gradient(isw, self.grid))

    @cached_property
    def _p_beta(self):
        return None if self.beta is None else self.grid.to_padded(self.beta)

    # -- primitives ----------------------------------------------------------

    def _grad_bundle(self, x: np.ndarray) -> np.ndarray:
        # (..., m, n1, n2) -> (..., m, 2, n1, n2)
        return np.moveaxis(gradient(x, self.grid), 0, -3)

    def slot(self, value: np.ndarray, integral: np.ndarray) -> Slot:
        g = self.grid
        return Slot(g.padded_gradient(value), g.padded_gradient(integral))

    def _div(self, flux_padded: np.ndarray) -> np.ndarray:
        # flux (..., m, a, X, Y) on the padded grid -> sum_a d_a flux_a on the grid
        return self.grid.padded_divergence(flux_padded)

    def principal(self, x: np.ndarray) -> np.ndarray:
        """``d_a(Gamma^{ab} d_b x)`` for a bundle (or stack of bundles)."""
        gx = self.grid.padded_gradient(x)
        flux = np.einsum("abxy,...mbxy->...maxy", self._p_gamma0_up, gx)
        return self._div(flux)

    def smooth(self, x: np.ndarray, N: int | None) -> np.ndarray:
        return x if N is None else low_pass(x, self.grid, N)

    # -- multilinear terms -------------------------------------------------
    # Each raw term returns ``(flux, value)`` on the padded grid, one of them
    # None. Fluxes of several terms are summed before a single divergence.

    def _raw(self, name: str, slots) -> tuple:
        kinds = _TERM_SLOTS[name]
        if len(slots) != len(kinds):
            raise ValueError(f"{name} takes {len(kinds)} slots")
        args = [s.pick(k) for s, k in zip(slots, kinds)]
        return getattr(self, "_" + name)(*args)

    def _finish(self, flux, value, shape) -> np.ndarray:
        out = None
        if flux is not None:
            out = self._div(flux)
        if value is not None:
            v = self.grid.from_padded(value)
            out = v if out is None else out + v
        return np.zeros(shape + self.grid.shape) if out is None else out

    def _accumulate(self, items, shape) -> np.ndarray:
        flux = value = None
        for w, (f, v) in items:
            if f is not None:
                flux = w * f if flux is None else flux + w * f
            if v is not None:
                value = w * v if value is None else value + w * v
        return self._finish(flux, value, shape)

    def term(self, name: str, *slots: Slot) -> np.ndarray:
        """Evaluate one term with its slots filled by the given arguments."""
        f, v = self._raw(name, slots)
        return self._finish(f, v, slots[0].grad.shape[:-3])

    @staticmethod
    def _cof_flux(S, B):
        # e^{ac} e^{bd} S_cd B^m_b with S (..., c, d, X, Y), B (..., m, b, X, Y)
        S = S[..., None, :, :, :, :]
        f0 = S[..., 1, 1, :, :] * B[..., 0, :, :] - S[..., 1, 0, :, :] * B[..., 1, :, :]
        f1 = S[..., 0, 0, :, :] * B[..., 1, :, :] - S[..., 0, 1, :, :] * B[..., 0, :, :]
        return np.stack([f0, f1], axis=-3)

    @staticmethod
    def _gram(A, B):
        # sum_n A^n_c B^n_d -> (..., c, d, X, Y)
        return np.sum(A[..., :, None, :, :] * B[..., None, :, :, :], axis=-5)

    def _T1(self, A, B):
        return self._cof_flux(self._gram(self._p_du0, A), B), None

    def _T2(self, A, B):
        return self._cof_flux(self._gram(A, self._p_du0), B), None

    def _T3(self, A, B, C):
        return self._cof_flux(self._gram(A, B), C), None

    def _T4(self, A, B, C):
        # e^{ab} e^{cd} w^{-1} d_c A^m (sum_n d_d B^n d_b C^n)
        P = self._gram(B, C)[..., None, :, :, :, :]  # (..., 1, d, b, X, Y)
        q0 = A[..., 0, :, :] * P[..., 1, 0, :, :] - A[..., 1, :, :] * P[..., 0, 0, :, :]
        q1 = A[..., 0, :, :] * P[..., 1, 1, :, :] - A[..., 1, :, :] * P[..., 0, 1, :, :]
        flux = np.stack([q1, -q0], axis=-3)
        if self._p_winv is not None:
            flux = flux * self._p_winv
        return flux, None

    def _T5_linear(self, A):
        if self._p_beta is None:
            return None, None
        coef = np.einsum("ab,dxy,bdxy->axy", EPS, self._p_beta, self._p_gamma0)
        return None, np.einsum("axy,...maxy->...mxy", coef, A)

    def _T5_cubic(self, A, B, C):
        if self._p_beta is None:
            return None, None
        P = np.einsum("...nbxy,...ndxy->...bdxy", B, C)
        return None, 2.0 * np.einsum("ab,dxy,...maxy,...bdxy->...mxy", EPS, self._p_beta, A, P)

    # -- F, dF, R ------------------------------------------------------------

    def _weights(self):
        return self.problem.term_weights

    def _F_items(self, base):
        for name, w in self._weights().items():
            yield name, w, [base] * len(_TERM_SLOTS[name])

    def _dF_items(self, base, h):
        for name, w in self._weights().items():
            n = len(_TERM_SLOTS[name])
            for i in range(n):
                slots = [base] * n
                slots[i] = h
                yield f"{name}[{''.join('h' if j == i else 'W' for j in range(n))}]", w, slots

    def _R_items(self, base, h):
        for name, w in self._weights().items():
            n = len(_TERM_SLOTS[name])
            for pattern in itertools.product("Wh", repeat=n):
                if pattern.count("h") >= 2:
                    yield f"{name}[{''.join(pattern)}]", w, [h if p == "h" else base for p in pattern]

    def _terms(self, items) -> dict[str, np.ndarray]:
        return {key: w * self.term(key.split("[")[0], *slots) for key, w, slots in items}

    def _sum(self, items, base) -> np.ndarray:
        raw = ((w, self._raw(key.split("[")[0], slots)) for key, w, slots in items)
        return self._accumulate(raw, base.grad.shape[:-3])

    def F_terms(self, base: Slot) -> dict[str, np.ndarray]:
        """Weighted terms of ``F`` at one base state."""
        return self._terms(self._F_items(base))

    def F(self, base: Slot) -> np.ndarray:
        return self._sum(self._F_items(base), base)

    def dF_terms(self, base: Slot, h: Slot) -> dict[str, np.ndarray]:
        """Weighted terms of the Frechet derivative, keyed ``name[pattern]``."""
        return self._terms(self._dF_items(base, h))

    def dF(self, base: Slot, h: Slot) -> np.ndarray:
        return self._sum(self._dF_items(base, h), base)

    def R_terms(self, base: Slot, h: Slot) -> dict[str, np.ndarray]:
        """Weighted remainder terms: every slot pattern with at least two ``h``."""
        return self._terms(self._R_items(base, h))

    def R(self, base: Slot, h: Slot) -> np.ndarray:
        return self._sum(self._R_items(base, h), base)

    # -- history-level evaluation -----------------------------------------

    def _history_chunks(self, nt: int, chunk: int = 48):
        for s in range(0, nt, chunk):
            yield slice(s, min(nt, s + chunk))

    def F_history(self, values: np.ndarray, integrals: np.ndarray, N: int | None = None) -> np.ndarray:
        """``Pi_N F`` at every time level of a history."""
        out = np.empty_like(values)
        for sl in self._history_chunks(values.shape[0]):
            out[sl] = self.smooth(self.F(self.slot(values[sl], integrals[sl])), N)
        return out

    def R_history(self, base_v, base_V, h, H, N: int | None = None) -> np.ndarray:
        out = np.empty_like(h)
        for sl in self._history_chunks(h.shape[0]):
            r = self.R(self.slot(base_v[sl], base_V[sl]), self.slot(h[sl], H[sl]))
            out[sl] = self.smooth(r, N)
        return out

    def full_velocity(self, W: SpacetimeField):
        """``v = W + v0 + v1 t`` and its memory integral at every snapshot."""
        t = W.times
        v = W.data + self.problem.base_velocity(t)
        V = cumulative_time_integral(W) + self.problem.base_integral(t)
        return v, V

    # -- the (unrescaled) modified system ----------------------------------

    def modified_rhs(self, v: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Right side of ``d_tt v = ...`` for ``u = u0 + V``, in divergence form."""
        g = self.grid
        du0 = self._p_du0
        dv = g.padded_gradient(v)
        dV = g.padded_gradient(V)
        # gamma(u) split into the u0 part, the two cross terms and gamma(int v)
        gam = (
            self._p_gamma0
            + np.einsum("ncxy,ndxy->cdxy", du0, dV)
            + np.einsum("ndxy,ncxy->cdxy", du0, dV)
            + np.einsum("ncxy,ndxy->cdxy", dV, dV)
        )
        du = du0 + dV
        gup = np.einsum("ac,bd,cdxy->abxy", EPS, EPS, gam)
        flux1 = np.einsum("abxy,mbxy->maxy", gup, dv)
        P = np.einsum("ndxy,nbxy->dbxy", du, dv)
        flux2 = 2.0 * np.einsum("ab,cd,mcxy,dbxy->maxy", EPS, EPS, du, P)
        if self._p_winv is not None:
            flux1 = flux1 * self._p_winv
            flux2 = flux2 * self._p_winv
        out = self._div(flux1 + flux2)
        if self._p_beta is not None:
            b = self._p_beta
            lo = np.einsum("ab,dxy,bdxy,maxy->mxy", EPS, b, gam, dv)
            lo = lo + 2.0 * np.einsum("ab,dxy,maxy,bdxy->mxy", EPS, b, du, P)
            out = out - g.from_padded(lo)
        return out


def _system_for(W_hist: SpacetimeField, u0, epsilon) -> MembraneSystem:
    zero = np.zeros_like(np.asarray(u0, dtype=float))
    prob = MembraneProblem(W_hist.grid, u0, zero, zero, epsilon, max(W_hist.t_end, W_hist.dt))
    return MembraneSystem(prob)


def _sample(hist: SpacetimeField, t: float):
    i = hist.index_of(t)
    return hist.data[i], cumulative_time_integral(hist)[i]


def modified_rhs(u0, v_hist: SpacetimeField, t: float) -> np.ndarray:
    """Right side of the time-differentiated membrane system at time ``t``."""
    if t > v_hist.t_end + 1e-12:
        raise ValueError("history does not cover t")
    sys = _system_for(v_hist, u0, 0.5)
    v, V = _sample(v_hist, t)
    return sys.modified_rhs(v, V)


def nonlinear_F(W_hist: SpacetimeField, u0, epsilon: float, t: float) -> np.ndarray:
    """``F`` evaluated on the history ``W_hist`` at time ``t``."""
    sys = _system_for(W_hist, u0, epsilon)
    return sys.F(sys.slot(*_sample(W_hist, t)))


def frechet_derivative(W_hist, h_hist, u0, epsilon, t) -> np.ndarray:
    """Directional derivative of ``F`` at ``W_hist`` along ``h_hist``."""
    _match(W_hist, h_hist)
    sys = _system_for(W_hist, u0, epsilon)
    return sys.dF(sys.slot(*_sample(W_hist, t)), sys.slot(*_sample(h_hist, t)))


def remainder_R(W_hist, h_hist, u0, epsilon, t) -> np.ndarray:
    """``F(W + h) - F(W) - dF(W) h`` from its explicit term list."""
    _match(W_hist, h_hist)
    sys = _system_for(W_hist, u0, epsilon)
    return sys.R(sys.slot(*_sample(W_hist, t)), sys.slot(*_sample(h_hist, t)))


def _match(a: SpacetimeField, b: SpacetimeField):
    if a.data.shape != b.data.shape or abs(a.dt - b.dt) > 1e-14 or not a.grid.same_as(b.grid):
        raise ValueError("histories do not match")
