import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import band_limited
from lcmembrane.brackets import membrane_rhs
from lcmembrane.grid import Grid2D, SpacetimeField
from lcmembrane.membrane_system import (
    MembraneProblem,
    MembraneSystem,
    frechet_derivative,
    modified_rhs,
    nonlinear_F,
    remainder_R,
    term_weights,
)
from lcmembrane.oracle import _fine_setup, _ModelRHS, resample_field
from lcmembrane.presets import clifford


def _weighted_grid(n):
    x1, x2 = Grid2D.square(n).coords
    return Grid2D.square(n, w=(1.0 + 0.25 * np.sin(x1) * np.cos(x2)) ** 2)


def _system(grid, eps=1e-2, u0=None):
    u0 = clifford(grid) if u0 is None else u0
    z = np.zeros_like(u0)
    return MembraneSystem(MembraneProblem(grid, u0, z, z, eps, 1.0))


def _state(grid, rng, m=4, amp=0.3):
    return band_limited(grid, 4, rng, m=m) * amp, band_limited(grid, 4, rng, m=m) * amp


def test_problem_validation(grid32):
    c = clifford(grid32)
    with pytest.raises(ValueError):
        MembraneProblem(grid32, c, c, c, 1.5, 1.0)
    with pytest.raises(ValueError):
        MembraneProblem(grid32, c, c, c, 0.1, -1.0)
    with pytest.raises(ValueError):
        MembraneProblem(grid32, c, c[:2], c, 0.1, 1.0)
    x1, _ = grid32.coords
    bad_v0 = np.stack([np.sin(2 * x1)] * 4)
    with pytest.raises(ValueError):
        MembraneProblem(grid32, c, bad_v0, membrane_rhs(c, grid32), 0.1, 1.0, compat_tol=1e-8)
    MembraneProblem(grid32, c, np.cos(x1) * c, membrane_rhs(c, grid32), 0.1, 1.0, compat_tol=1e-8)


def test_default_weights():
    w = term_weights(0.01)
    assert w == pytest.approx({"T1": 1, "T2": 1, "T3": 0.01, "T4": -0.02, "T5_linear": -0.01, "T5_cubic": -0.01})


def test_F_vanishes_at_zero(grid32):
    S = _system(_weighted_grid(32))
    z = np.zeros((4,) + grid32.shape)
    assert np.max(np.abs(S.F(S.slot(z, z)))) == 0.0


def test_dF_zero_direction_and_zero_base(rng):
    g = _weighted_grid(32)
    S = _system(g)
    v, V = _state(g, rng)
    z = np.zeros_like(v)
    assert np.max(np.abs(S.dF(S.slot(v, V), S.slot(z, z)))) == 0.0
    terms = S.dF_terms(S.slot(z, z), S.slot(v, V))
    alive = {k for k, t in terms.items() if np.max(np.abs(t)) > 0}
    assert alive == {"T5_linear[h]"}


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), weighted=st.booleans())
def test_taylor_identity(seed, weighted):
    g = _weighted_grid(16) if weighted else Grid2D.square(16)
    S = _system(g)
    r = np.random.default_rng(seed)
    (v, V), (h, H) = _state(g, r), _state(g, r)
    base, dirn = S.slot(v, V), S.slot(h, H)
    lhs = S.F(S.slot(v + h, V + H)) - S.F(base)
    rhs = S.dF(base, dirn) + S.R(base, dirn)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(lhs))


def test_dF_linear_in_direction(grid32, rng):
    S = _system(grid32)
    base = S.slot(*_state(grid32, rng))
    (a, A), (b, B) = _state(grid32, rng), _state(grid32, rng)
    lhs = S.dF(base, S.slot(2.5 * a + b, 2.5 * A + B))
    rhs = 2.5 * S.dF(base, S.slot(a, A)) + S.dF(base, S.slot(b, B))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(lhs))


def test_central_difference_slope(grid32, rng):
    S = _system(grid32)
    (v, V), (h, H) = _state(grid32, rng), _state(grid32, rng)
    base = S.slot(v, V)
    exact = S.dF(base, S.slot(h, H))
    taus = np.array([4e-2, 2e-2, 1e-2, 5e-3])
    errs = []
    for t in taus:
        cd = (S.F(S.slot(v + t * h, V + t * H)) - S.F(S.slot(v - t * h, V - t * H))) / (2 * t)
        errs.append(np.max(np.abs(cd - exact)))
    slope = np.polyfit(np.log(taus), np.log(errs), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.1)


def test_term_homogeneity(grid32, rng):
    g = _weighted_grid(32)
    S = _system(g)
    v, V = _state(g, rng)
    taus = np.array([0.5, 0.25, 0.125])
    norms = {k: [] for k in S.F_terms(S.slot(v, V))}
    for t in taus:
        for k, val in S.F_terms(S.slot(t * v, t * V)).items():
            norms[k].append(np.max(np.abs(val)))
    expected = {"T1": 2, "T2": 2, "T3": 3, "T4": 3, "T5_linear": 1, "T5_cubic": 3}
    for k, e in expected.items():
        slope = np.polyfit(np.log(taus), np.log(norms[k]), 1)[0]
        assert slope == pytest.approx(e, abs=1e-8), k


def test_epsilon_weighted_terms_vanish_linearly(rng):
    g = _weighted_grid(32)
    x = _state(g, rng)
    eps = np.array([1e-2, 1e-3, 1e-4])
    mags = []
    for e in eps:
        S = _system(g, eps=e)
        terms = S.F_terms(S.slot(*x))
        mags.append(np.max(np.abs(sum(terms[k] for k in ("T3", "T4", "T5_linear", "T5_cubic")))))
    slope = np.polyfit(np.log(eps), np.log(mags), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.05)


@pytest.mark.parametrize("weighted", [False, True])
def test_F_against_independent_oracle(weighted, rng):
    g = _weighted_grid(32) if weighted else Grid2D.square(32)
    x1, x2 = g.coords
    u0 = clifford(g) + 0.1 * np.stack([np.cos(x2), np.sin(x1 + x2), np.cos(2 * x1), np.sin(x1)])
    p = MembraneProblem(g, u0, np.zeros_like(u0), np.zeros_like(u0), 0.3, 0.5)
    S = MembraneSystem(p)
    v, V = _state(g, rng)
    ours = p.kappa * S.principal(v) + p.forcing_scale * S.F(S.slot(v, V))
    fs, cal = _fine_setup(g, 2)
    r = _ModelRHS(cal, p, resample_field(u0, fs))
    vf, Vf = resample_field(v, fs), resample_field(V, fs)
    theirs = resample_field(r.kappa * r.principal(vf) + r.s * r.forcing(vf, Vf), g.shape)
    assert np.max(np.abs(ours - theirs)) <= 1e-8 * np.max(np.abs(ours))


@pytest.mark.parametrize("weighted", [False, True])
def test_modified_rhs_is_time_derivative_of_force(weighted):
    g = _weighted_grid(32) if weighted else Grid2D.square(32)
    x1, x2 = g.coords
    c = clifford(g)
    S = _system(g, u0=c)
    v0 = 0.3 * np.cos(x1 + 2 * x2) * c
    t, d = 0.4, 1e-4
    fd = (membrane_rhs(c + (t + d) * v0, g) - membrane_rhs(c + (t - d) * v0, g)) / (2 * d)
    assert np.max(np.abs(fd - S.modified_rhs(v0, t * v0))) <= 1e-6 * np.max(np.abs(fd))


def test_modified_rhs_manufactured_history(grid32):
    g = grid32
    x1, _ = g.coords
    c = clifford(g)
    e1 = np.zeros_like(c)
    e1[0] = np.sin(x1)
    T, dt = 0.5, 1e-3
    hist = SpacetimeField.from_function(g, lambda t: t * e1, T, dt)
    # u = c + t^2/2 e1, so d_t of the force is its directional derivative along t e1
    t, d = T, 1e-4
    u = lambda s: c + 0.5 * s**2 * e1  # noqa: E731
    fd = (membrane_rhs(u(t + d), g) - membrane_rhs(u(t - d), g)) / (2 * d)
    got = modified_rhs(c, hist, t)
    assert np.max(np.abs(got - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))
    zero = SpacetimeField.zeros(g, 4, 5, 0.1)
    assert np.max(np.abs(modified_rhs(c, zero, 0.2))) == 0.0
    with pytest.raises(ValueError):
        modified_rhs(c, zero, 1.0)


def test_history_level_wrappers(grid32, rng):
    g = grid32
    c = clifford(g)
    a, b = band_limited(g, 3, rng, m=4) * 0.2, band_limited(g, 3, rng, m=4) * 0.2
    W = SpacetimeField.from_function(g, lambda t: np.sin(t) * a, 0.2, 0.01)
    h = SpacetimeField.from_function(g, lambda t: t * b, 0.2, 0.01)
    Wh = W + h
    F0 = nonlinear_F(W, c, 0.05, 0.2)
    lhs = nonlinear_F(Wh, c, 0.05, 0.2) - F0
    rhs = frechet_derivative(W, h, c, 0.05, 0.2) + remainder_R(W, h, c, 0.05, 0.2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(lhs))
    z = SpacetimeField.zeros(g, 4, W.nt, W.dt)
    assert np.max(np.abs(nonlinear_F(z, c, 0.05, 0.1))) == 0.0
    assert np.max(np.abs(remainder_R(W, z, c, 0.05, 0.1))) == 0.0
    with pytest.raises(ValueError):
        frechet_derivative(W, SpacetimeField.zeros(g, 4, 3, W.dt), c, 0.05, 0.0)
