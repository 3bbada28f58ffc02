"""Named problem configurations and the INI format that describes them.

Every preset ships as ``configs/<name>.ini`` inside the package. A config
file has the sections ``problem``, ``data``, ``factorization``, ``schedule``,
``solver`` and ``toy``; see the README for the key list. Linear-only
configurations set ``toy_only = true`` and need just ``problem`` and ``toy``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .brackets import membrane_rhs
from .degenerate_wave import DegenerateCoefficients, map_membrane_to_toy
from .grid import Grid2D, SpacetimeField
from .membrane_system import MembraneProblem
from .nash_moser import IterationSchedule, schedule

__all__ = ["ConfigError", "Preset", "PRESET_NAMES", "load_preset", "load_config", "poisson_kernel", "clifford"]

PRESET_NAMES = ("nondegenerate-small", "nondegenerate-stiff", "degenerate-zero", "degenerate-tiny", "relaxed-levi")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def poisson_kernel(x: np.ndarray, r: float) -> np.ndarray:
    """``(1 - r^2) / (1 - 2 r cos x + r^2)``: Fourier coefficients ``r^|k|``."""
    return (1 - r * r) / (1 - 2 * r * np.cos(x) + r * r)


def clifford(grid: Grid2D) -> np.ndarray:
    """``(sin x1, cos x1, sin x2, cos x2)`` on the 2-pi torus (flat metric = identity)."""
    x1, x2 = grid.coords
    s1, s2 = 2 * np.pi / grid.L1, 2 * np.pi / grid.L2
    return np.stack([np.sin(s1 * x1), np.cos(s1 * x1), np.sin(s2 * x2), np.cos(s2 * x2)])


_DEFAULTS = {
    "problem": {"grid": "32", "epsilon": "1e-3", "T": "0.5", "dt": "1e-3", "toy_only": "false"},
    "data": {"u0": "clifford", "u0_scale": "1.0", "v0_amplitude": "1.0", "v0_radius": "0.1", "v0_modulation": "0.0", "v1": "compatible"},
    "factorization": {"gamma0": "heuristic"},
    "schedule": {"s_bar": "2.5", "s": "4.0", "s0": "2.0", "k": "5", "d": "0.5", "max_levels": "6", "floor_tolerance": "1e-10"},
    "solver": {"delta0": "1e-2", "cfl": "1.0", "smoothing": "true"},
    "toy": {"varrho": "membrane", "forcing_amplitude": "1.0", "dt": "1e-3"},
}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_dict(_DEFAULTS)
    return cp


@dataclass
class Preset:
    """A parsed configuration with builders for every solver input."""

    name: str
    config: configparser.ConfigParser = field(repr=False)
    source: str = ""

    # -- typed access ---------------------------------------------------------

    def _get(self, section, key, conv=str):
        try:
            raw = self.config.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError) as exc:
            raise ConfigError(f"missing [{section}] {key}") from exc
        try:
            if conv is bool:
                return self.config.getboolean(section, key)
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    @property
    def toy_only(self) -> bool:
        return self._get("problem", "toy_only", bool)

    @property
    def n(self) -> int:
        return self._get("problem", "grid", int)

    @property
    def epsilon(self) -> float:
        return self._get("problem", "epsilon", float)

    @property
    def T(self) -> float:
        return self._get("problem", "T", float)

    @property
    def dt(self) -> float:
        return self._get("problem", "dt", float)

    def override(self, **kw) -> "Preset":
        """Copy with ``[problem]`` (``grid``, ``epsilon``, ``T``, ``dt``) or
        ``[solver]`` (``delta0``) values replaced; ``None`` entries are ignored."""
        cp = _parser()
        cp.read_dict({s: dict(self.config.items(s)) for s in self.config.sections()})
        for key, val in kw.items():
            if val is None:
                continue
            section = "solver" if key == "delta0" else "problem"
            cp.set(section, key, repr(val) if isinstance(val, float) else str(val))
        out = Preset(self.name, cp, self.source)
        out.validate()
        return out

    def validate(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise ConfigError("grid must be a power of two >= 4")
        if not 0 < self.epsilon < 1:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.T <= 0 or self.dt <= 0:
            raise ConfigError("T and dt must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ConfigError("T must be an integer multiple of dt")
        if self.toy_only:
            if self._get("toy", "varrho") not in ("sin2_half", "one"):
                raise ConfigError("toy-only presets need varrho = sin2_half | one")
            return
        if self._get("data", "u0") not in ("clifford", "constant"):
            raise ConfigError("[data] u0 must be clifford | constant")
        if self._get("data", "v1") not in ("compatible", "zero"):
            raise ConfigError("[data] v1 must be compatible | zero")
        r = self._get("data", "v0_radius", float)
        if not 0 <= r < 1:
            raise ConfigError("[data] v0_radius must lie in [0, 1)")
        g0 = self._get("factorization", "gamma0")
        if g0 != "heuristic":
            try:
                val = float(g0)
            except ValueError as exc:
                raise ConfigError("[factorization] gamma0 must be a number or 'heuristic'") from exc
            if not 0 <= val <= 1:
                raise ConfigError("[factorization] gamma0 must lie in [0, 1]")
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- builders -------------------------------------------------------------

    def grid(self) -> Grid2D:
        return Grid2D.square(self.n)

    def _data(self, grid: Grid2D):
        x1, x2 = grid.coords
        scale = self._get("data", "u0_scale", float)
        kind = self._get("data", "u0")
        if kind == "clifford":
            u0 = scale * clifford(grid)
            direction = clifford(grid)
        else:
            u0 = scale * np.stack([np.ones(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape), np.zeros(grid.shape)])
            direction = clifford(grid)
        a = self._get("data", "v0_amplitude", float)
        r = self._get("data", "v0_radius", float)
        mod = self._get("data", "v0_modulation", float)
        # scalar multiples of the unit Clifford direction keep sum {v0, u0} = 0
        profile = poisson_kernel(x1, r) * (1.0 + mod * np.sin(x2))
        v0 = a * profile * direction
        v1 = membrane_rhs(u0, grid) if self._get("data", "v1") == "compatible" else np.zeros_like(u0)
        return u0, v0, v1

    def problem(self, compat_tol: float | None = 1e-8) -> MembraneProblem:
        if self.toy_only:
            raise ConfigError(f"preset {self.name} defines a linear problem only")
        g = self.grid()
        u0, v0, v1 = self._data(g)
        return MembraneProblem(g, u0, v0, v1, self.epsilon, self.T, compat_tol=compat_tol, name=self.name)

    def factorization(self):
        """``(gamma0, gamma_cd)``; ``gamma_cd = gamma(u0) / gamma0`` or the identity where ``gamma0 = 0``."""
        from .rescale import factorization_check

        g = self.grid()
        u0, _, _ = self._data(g)
        spec = self._get("factorization", "gamma0")
        fc = factorization_check(u0, g, None if spec == "heuristic" else float(spec))
        return fc.gamma0, fc.gamma_cd

    def schedule(self, levels: int | None = None) -> IterationSchedule:
        get = lambda k, c=float: self._get("schedule", k, c)  # noqa: E731
        return schedule(
            get("s_bar"), get("s"), get("s0"), get("k", int), get("d"),
            levels if levels is not None else get("max_levels", int), get("floor_tolerance"),
        )

    @property
    def delta0(self) -> float:
        return self._get("solver", "delta0", float)

    @property
    def cfl(self) -> float:
        return self._get("solver", "cfl", float)

    @property
    def smoothing(self) -> bool:
        return self._get("solver", "smoothing", bool)

    def nash_moser_kwargs(self) -> dict:
        g0, gcd = self.factorization()
        return {"gamma0": g0, "gamma_cd": gcd, "delta0": self.delta0, "cfl": self.cfl, "smoothing": self.smoothing}

    # -- linear model problem -------------------------------------------------

    @property
    def toy_dt(self) -> float:
        return self._get("toy", "dt", float)

    def toy_forcing(self, grid: Grid2D, T: float, dt: float, m: int = 4) -> SpacetimeField:
        amp = self._get("toy", "forcing_amplitude", float)
        x1, x2 = grid.coords
        prof = np.cos(x1 + 2 * x2) + 0.5 * np.sin(2 * x1 - x2)
        comps = np.stack([prof * np.cos(j * x1) if j else prof for j in range(m)])
        return SpacetimeField.from_function(grid, lambda t: amp * np.sin(3 * t + 0.5) * comps, T, dt)

    def toy_problem(self, delta: float = 0.0, dt: float | None = None):
        """``(coefficients, h0, h1, T, dt)`` of the linear degenerate problem.

        Membrane presets use the principal and first-order parts of the
        linearization at ``W = 0`` (the coupling to ``dF`` is omitted, it is
        small of order ``eps^2``); ``delta > 0`` adds ``delta`` to ``varrho``.
        ``dt`` replaces the configured toy step (the forcing is sampled on it).
        """
        g = self.grid()
        T, dt = self.T, (self.toy_dt if dt is None else dt)
        x1, x2 = g.coords
        if self.toy_only:
            kind = self._get("toy", "varrho")
            varrho = np.sin(x1 / 2) ** 2 if kind == "sin2_half" else np.ones(g.shape)
            rho = np.eye(2)[:, :, None, None] * np.ones(g.shape)
            # conservative form d(varrho d h): B = -d(varrho) (only |d varrho| <= sqrt(varrho))
            B = -np.stack([0.5 * np.sin(x1), np.zeros(g.shape)])
            c = DegenerateCoefficients(g, varrho, rho, B, None, self.toy_forcing(g, T, dt, 1), 0.0, None, levi_relaxed=True)
            h0 = (0.1 * np.cos(x2) * np.sin(x1))[None]
        else:
            prob = self.problem()
            g0, gcd = self.factorization()
            W = SpacetimeField.zeros(g, prob.num_components, 3, dt)
            full = map_membrane_to_toy(W, prob.u0, prob.epsilon, g0, gcd, problem=prob)
            c = DegenerateCoefficients(g, full.varrho, full.rho, full.B, None, self.toy_forcing(g, T, dt), full.epsilon, None)
            h0 = 0.1 * np.stack([np.cos(x2) * np.sin(x1), np.sin(x1 + x2), np.cos(2 * x1), np.sin(x2)])
        if delta > 0:
            c = DegenerateCoefficients(c.grid, c.varrho + delta, c.rho, c.B, c.f_mem, c.g, c.epsilon, c.coupling, c.levi_relaxed)
        return c, h0, np.zeros_like(h0), T, dt


def load_config(path) -> Preset:
    """Parse an INI file; unknown keys are rejected."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return _from_text(p.read_text(), str(p))


def _from_text(text: str, source: str) -> Preset:
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for section in cp.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown section [{section}] in {source}")
        extra = set(cp[section]) - set(_DEFAULTS[section]) - {"name"}
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)} in [{section}] of {source}")
    name = cp.get("problem", "name", fallback=Path(source).stem)
    pre = Preset(name, cp, source)
    pre.validate()
    return pre


def load_preset(name: str) -> Preset:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    text = resources.files("lcmembrane").joinpath("configs", f"{name}.ini").read_text()
    return _from_text(text, f"{name}.ini")
