"""Discrete flat 2-torus, spectral calculus, Sobolev norms and smoothing.

Fields are plain ``numpy`` arrays whose last two axes are the grid axes
``(n1, n2)``. A single scalar function is an ``(n1, n2)`` array, a bundle of
transverse components is ``(m, n1, n2)``, and a time history is stored by
:class:`SpacetimeField` as ``(nt, m, n1, n2)``. All spectral operators act on
the last two axes and broadcast over anything in front.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as _sfft

__all__ = [
    "EPSILON_SYMBOL",
    "Grid2D",
    "SpacetimeField",
    "as_field",
    "as_bundle",
    "partial_derivative",
    "gradient",
    "sobolev_norm",
    "spacetime_norm",
    "low_pass",
    "time_integral",
    "cumulative_time_integral",
]

# epsilon^{ab} with epsilon^{12} = +1
EPSILON_SYMBOL = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform periodic grid on ``[0, L1) x [0, L2)``.

    Parameters
    ----------
    n1, n2 : int
        Points per axis; powers of two.
    L1, L2 : float
        Periods. Defaults give the ``2*pi`` torus.
    w : array_like or None
        Positive area density so that ``sqrt(w)`` is the volume form.
        ``None`` means ``w == 1``.
    """

    n1: int
    n2: int
    L1: float = 2 * np.pi
    L2: float = 2 * np.pi
    w: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for n in (self.n1, self.n2):
            if not _is_pow2(int(n)):
                raise ValueError(f"grid sizes must be powers of two, got {n}")
        if self.L1 <= 0 or self.L2 <= 0:
            raise ValueError("periods must be positive")
        if self.w is not None:
            w = np.asarray(self.w, dtype=float)
            if w.shape != (self.n1, self.n2):
                raise ValueError(f"w has shape {w.shape}, expected {(self.n1, self.n2)}")
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("w must be finite and strictly positive")
            object.__setattr__(self, "w", w)

    @classmethod
    def square(cls, n: int, L: float = 2 * np.pi, w=None) -> "Grid2D":
        return cls(n, n, L, L, w)

    def same_as(self, other: "Grid2D") -> bool:
        if self is other:
            return True
        if (self.n1, self.n2, self.L1, self.L2) != (other.n1, other.n2, other.L1, other.L2):
            return False
        return np.array_equal(self.w_values, other.w_values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def uniform_w(self) -> bool:
        return self.w is None

    @cached_property
    def w_values(self) -> np.ndarray:
        return np.ones(self.shape) if self.w is None else self.w

    @cached_property
    def sqrt_w(self) -> np.ndarray:
        return np.sqrt(self.w_values)

    @property
    def dx1(self) -> float:
        return self.L1 / self.n1

    @property
    def dx2(self) -> float:
        return self.L2 / self.n2

    @property
    def cell_area(self) -> float:
        return self.dx1 * self.dx2

    @property
    def area(self) -> float:
        return self.L1 * self.L2

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x1 = np.arange(self.n1) * self.dx1
        x2 = np.arange(self.n2) * self.dx2
        return np.meshgrid(x1, x2, indexing="ij")

    @cached_property
    def mode_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer Fourier indices broadcast to ``(n1, n2)``."""
        m1 = np.fft.fftfreq(self.n1, 1.0 / self.n1)
        m2 = np.fft.fftfreq(self.n2, 1.0 / self.n2)
        return np.meshgrid(m1, m2, indexing="ij")

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical wavenumbers ``2*pi*m/L`` broadcast to ``(n1, n2)``."""
        m1, m2 = self.mode_index
        return 2 * np.pi * m1 / self.L1, 2 * np.pi * m2 / self.L2

    @cached_property
    def _deriv_symbols(self) -> tuple[np.ndarray, np.ndarray]:
        # Nyquist modes are dropped for odd derivatives so results stay real.
        k1, k2 = self.wavenumbers
        k1 = np.where(np.abs(self.mode_index[0]) == self.n1 // 2, 0.0, k1)
        k2 = np.where(np.abs(self.mode_index[1]) == self.n2 // 2, 0.0, k2)
        return 1j * k1, 1j * k2

    @cached_property
    def k_squared(self) -> np.ndarray:
        k1, k2 = self.wavenumbers
        return k1**2 + k2**2

    @cached_property
    def mode_maxnorm(self) -> np.ndarray:
        m1, m2 = self.mode_index
        return np.maximum(np.abs(m1), np.abs(m2))

    @property
    def nyquist(self) -> int:
        return min(self.n1, self.n2) // 2

    # -- transforms -------------------------------------------------------

    def fft(self, f: np.ndarray) -> np.ndarray:
        return np.fft.fft2(f, axes=(-2, -1))

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        return np.fft.ifft2(fh, axes=(-2, -1)).real

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Spectrally exact quadrature of ``f * sqrt(w)`` over the torus."""
        return np.sum(f * self.sqrt_w, axis=(-2, -1)) * self.cell_area

    # -- de-aliasing ------------------------------------------------------

    @cached_property
    def padded_shape(self) -> tuple[int, int]:
        return (3 * self.n1 // 2, 3 * self.n2 // 2)

    # Padding works on half spectra (real transforms). Nyquist rows and
    # columns are discarded so every interpolant is real.

    def _embed(self, fh: np.ndarray) -> np.ndarray:
        M1, M2 = self.padded_shape
        h1, h2 = self.n1 // 2, self.n2 // 2
        out = np.zeros(fh.shape[:-2] + (M1, M2 // 2 + 1), dtype=complex)
        out[..., :h1, :h2] = fh[..., :h1, :h2]
        out[..., M1 - h1 + 1:, :h2] = fh[..., h1 + 1:, :h2]
        return out

    def _truncate(self, fph: np.ndarray) -> np.ndarray:
        M1 = self.padded_shape[0]
        h1, h2 = self.n1 // 2, self.n2 // 2
        out = np.zeros(fph.shape[:-2] + (self.n1, self.n2 // 2 + 1), dtype=complex)
        out[..., :h1, :h2] = fph[..., :h1, :h2]
        out[..., h1 + 1:, :h2] = fph[..., M1 - h1 + 1:, :h2]
        return out

    @cached_property
    def _pad_scale(self) -> float:
        M1, M2 = self.padded_shape
        return (M1 * M2) / (self.n1 * self.n2)

    @cached_property
    def _half_deriv_symbols(self) -> tuple[np.ndarray, np.ndarray]:
        k = self.n2 // 2 + 1
        s1, s2 = self._deriv_symbols
        return s1[:, :k], s2[:, :k]

    @cached_property
    def _padded_deriv_symbols(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(self._embed(s) for s in self._half_deriv_symbols)

    def _to_grid(self, fh: np.ndarray) -> np.ndarray:
        return _sfft.irfft2(fh, s=self.shape, axes=(-2, -1))

    def _to_pad(self, fh: np.ndarray) -> np.ndarray:
        return _sfft.irfft2(fh, s=self.padded_shape, axes=(-2, -1)) * self._pad_scale

    def to_padded(self, f: np.ndarray) -> np.ndarray:
        """Spectral interpolation onto the 3/2-padded grid."""
        return self._to_pad(self._embed(_sfft.rfft2(f, axes=(-2, -1))))

    def from_padded(self, fp: np.ndarray) -> np.ndarray:
        """Project a padded-grid function back onto the grid (mode truncation)."""
        return self._to_grid(self._truncate(_sfft.rfft2(fp, axes=(-2, -1)))) / self._pad_scale

    def padded_gradient(self, f: np.ndarray) -> np.ndarray:
        """Gradient of ``f`` sampled on the padded grid; derivative axis goes
        just before the two spatial axes: ``(..., 2, M1, M2)``."""
        fh = self._embed(_sfft.rfft2(f, axes=(-2, -1)))
        s1, s2 = self._padded_deriv_symbols
        return self._to_pad(np.stack([s1 * fh, s2 * fh], axis=-3))

    def padded_divergence(self, flux: np.ndarray) -> np.ndarray:
        """``d_a (truncation of flux_a)`` for a padded flux ``(..., 2, M1, M2)``."""
        fh = self._truncate(_sfft.rfft2(flux, axes=(-2, -1)))
        s1, s2 = self._half_deriv_symbols
        return self._to_grid(s1 * fh[..., 0, :, :] + s2 * fh[..., 1, :, :]) / self._pad_scale

    def product(self, *factors: np.ndarray) -> np.ndarray:
        """De-aliased pointwise product of grid functions."""
        acc = self.to_padded(factors[0])
        for f in factors[1:]:
            acc = acc * self.to_padded(f)
        return self.from_padded(acc)

    @cached_property
    def padded_sqrt_w(self) -> np.ndarray:
        return self.to_padded(self.sqrt_w)


def as_field(values, grid: Grid2D) -> np.ndarray:
    """Validate external data as a scalar field on ``grid``."""
    arr = np.array(values, dtype=float)
    if arr.shape != grid.shape:
        raise ValueError(f"field shape {arr.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field contains NaN or Inf")
    return arr


def as_bundle(values, grid: Grid2D) -> np.ndarray:
    """Validate external data as an ``(m, n1, n2)`` component bundle."""
    arr = np.array(values, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != grid.shape:
        raise ValueError(f"bundle shape {arr.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("bundle contains NaN or Inf")
    return arr


@dataclass(frozen=True, eq=False)
class SpacetimeField:
    """Uniformly sampled time history of a component bundle.

    ``data`` has shape ``(nt, m, n1, n2)``; snapshot ``i`` sits at
    ``t0 + i*dt``.
    """

    grid: Grid2D
    data: np.ndarray
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 3:
            data = data[:, None]
        if data.ndim != 4 or data.shape[2:] != self.grid.shape:
            raise ValueError(f"history shape {data.shape} incompatible with grid {self.grid.shape}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_function(cls, grid, func, T, dt, t0=0.0):
        """Sample ``func(t) -> bundle`` on ``t0, t0+dt, ..., t0+T``."""
        nt = int(round(T / dt)) + 1
        ts = t0 + dt * np.arange(nt)
        return cls(grid, np.stack([np.asarray(func(t), dtype=float).reshape(-1, *grid.shape) for t in ts]), dt, t0)

    @classmethod
    def zeros(cls, grid, num_components, nt, dt, t0=0.0):
        return cls(grid, np.zeros((nt, num_components) + grid.shape), dt, t0)

    @property
    def nt(self) -> int:
        return self.data.shape[0]

    @property
    def num_components(self) -> int:
        return self.data.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * (self.nt - 1)

    def with_data(self, data) -> "SpacetimeField":
        return SpacetimeField(self.grid, data, self.dt, self.t0)

    def __add__(self, other):
        if isinstance(other, SpacetimeField):
            _check_compatible(self, other)
            return self.with_data(self.data + other.data)
        return self.with_data(self.data + other)

    def __sub__(self, other):
        if isinstance(other, SpacetimeField):
            _check_compatible(self, other)
            return self.with_data(self.data - other.data)
        return self.with_data(self.data - other)

    def __mul__(self, scalar):
        return self.with_data(self.data * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_data(-self.data)

    def index_of(self, t: float) -> int:
        """Snapshot index of time ``t``; ``t`` must sit on the time grid."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-8 * max(1.0, abs(x)) or i < 0 or i >= self.nt:
            raise ValueError(f"t={t} is not a stored snapshot time in [{self.t0}, {self.t_end}]")
        return i

    def at(self, t: float) -> np.ndarray:
        """Bundle at time ``t`` (linear interpolation between snapshots)."""
        x = (t - self.t0) / self.dt
        tol = 1e-9 * max(1.0, abs(x))
        if x < -tol or x > self.nt - 1 + tol:
            raise ValueError(f"t={t} outside stored history [{self.t0}, {self.t_end}]")
        x = min(max(x, 0.0), self.nt - 1.0)
        i = int(np.floor(x))
        if i >= self.nt - 1 or abs(x - round(x)) < tol:
            return self.data[int(round(x))]
        a = x - i
        return (1 - a) * self.data[i] + a * self.data[i + 1]

    def time_derivative(self, order: int = 1) -> np.ndarray:
        """Centered differences, second-order one-sided at the ends."""
        if order == 0:
            return self.data
        u, dt = self.data, self.dt
        if order == 1:
            if self.nt < 3:
                raise ValueError("need at least 3 snapshots for a time derivative")
            return np.gradient(u, dt, axis=0, edge_order=2)
        if order == 2:
            if self.nt < 4:
                raise ValueError("need at least 4 snapshots for a second time derivative")
            out = np.empty_like(u)
            out[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dt**2
            out[0] = (2 * u[0] - 5 * u[1] + 4 * u[2] - u[3]) / dt**2
            out[-1] = (2 * u[-1] - 5 * u[-2] + 4 * u[-3] - u[-4]) / dt**2
            return out
        raise ValueError("only orders 0, 1, 2 are supported")

    def truncated(self, T: float) -> "SpacetimeField":
        """History restricted to ``[t0, t0 + T]``."""
        i = self.index_of(self.t0 + T)
        return self.with_data(self.data[: i + 1])


def _check_compatible(a: SpacetimeField, b: SpacetimeField):
    if a.data.shape != b.data.shape or abs(a.dt - b.dt) > 1e-14 * a.dt or abs(a.t0 - b.t0) > 1e-14:
        raise ValueError("spacetime fields have mismatched histories")
    if not a.grid.same_as(b.grid):
        raise ValueError("spacetime fields live on different grids")


# -- spectral calculus -----------------------------------------------------


def partial_derivative(f: np.ndarray, grid: Grid2D, axis: int) -> np.ndarray:
    """Spectral ``d/dx^axis`` for ``axis`` in ``{1, 2}``."""
    if axis not in (1, 2):
        raise ValueError("axis must be 1 or 2")
    sym = grid._deriv_symbols[axis - 1]
    return grid.ifft(sym * grid.fft(f))


def gradient(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Both first derivatives stacked on a new leading axis of length 2."""
    fh = grid.fft(f)
    s1, s2 = grid._deriv_symbols
    return np.stack([grid.ifft(s1 * fh), grid.ifft(s2 * fh)])


def _weighted_spectrum(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    if not grid.uniform_w:
        f = f * grid.sqrt_w**0.5
    return np.abs(grid.fft(f)) ** 2


def sobolev_norm(f: np.ndarray, grid: Grid2D, s: float) -> float:
    """``||f||_{H^s}`` via the Fourier weight ``(1 + |k|^2)^s``.

    For a bundle the squared component norms are summed. With ``s = 0`` this
    is the ``sqrt(w)``-weighted L2 norm.
    """
    if s < 0:
        raise ValueError("Sobolev index must be nonnegative")
    return float(np.sqrt(np.sum(sobolev_norm_sq(f, grid, s))))


def sobolev_norm_sq(f: np.ndarray, grid: Grid2D, s: float) -> np.ndarray:
    """Squared ``H^s`` norm over the last two axes (no summation over the rest)."""
    spec = _weighted_spectrum(f, grid)
    weight = (1.0 + grid.k_squared) ** s
    return np.sum(spec * weight, axis=(-2, -1)) * grid.area / (grid.n1 * grid.n2) ** 2


def spacetime_norm_profile(u: SpacetimeField, l: float) -> np.ndarray:
    """``||u(t)||_l`` at every snapshot (time derivatives up to order 2)."""
    total = np.zeros(u.nt)
    for i in range(3):
        ui = u.time_derivative(i)
        total += np.sum(sobolev_norm_sq(ui, u.grid, max(l - i, 0.0)), axis=1)
    return np.sqrt(total)


def spacetime_norm(u: SpacetimeField, l: float, T: float | None = None) -> float:
    """``|||u|||_{l,T} = sup_{[0,T]} (sum_i ||d_t^i u||^2_{H^{l-i}})^{1/2}``."""
    if l < 0:
        raise ValueError("index must be nonnegative")
    if T is not None:
        if T > u.t_end - u.t0 + 1e-9 * max(1.0, T):
            raise ValueError(f"T={T} exceeds the stored history")
        u = u.truncated(min(T, u.t_end - u.t0))
    return float(np.max(spacetime_norm_profile(u, l)))


def low_pass(f: np.ndarray, grid: Grid2D, N: int) -> np.ndarray:
    """Sharp Fourier cutoff keeping integer modes with ``|k|_inf <= N``."""
    if N < 1:
        raise ValueError("cutoff must be >= 1")
    if N >= max(grid.n1, grid.n2) // 2:
        return np.array(f, dtype=float, copy=True)
    mask = grid.mode_maxnorm <= N
    return grid.ifft(grid.fft(f) * mask)


def cumulative_time_integral(u: SpacetimeField) -> np.ndarray:
    """Trapezoidal ``int_{t0}^{t_i} u`` for every snapshot ``i``."""
    out = np.zeros_like(u.data)
    if u.nt > 1:
        out[1:] = np.cumsum(0.5 * u.dt * (u.data[1:] + u.data[:-1]), axis=0)
    return out


def time_integral(u: SpacetimeField, t: float) -> np.ndarray:
    """Trapezoidal ``int_{t0}^{t} u`` at a stored snapshot time ``t``."""
    if t < u.t0 - 1e-12 or t > u.t_end + 1e-9 * max(1.0, abs(u.t_end)):
        raise ValueError(f"t={t} outside stored history")
    i = u.index_of(t)
    if i == 0:
        return np.zeros(u.data.shape[1:])
    d = u.data[: i + 1]
    return u.dt * (0.5 * d[0] + d[1:-1].sum(axis=0) + 0.5 * d[-1])
