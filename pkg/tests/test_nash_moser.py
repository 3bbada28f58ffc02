import json

import numpy as np
import pytest

from conftest import band_limited
from lcmembrane.cli import seeded_profile
from lcmembrane.grid import SpacetimeField, low_pass, sobolev_norm
from lcmembrane.membrane_system import MembraneProblem, MembraneSystem
from lcmembrane.nash_moser import (
    IterationState,
    NashMoser,
    _residual,
    PerturbedStart,
    approx_operator,
    epsilon_sweep,
    fit_double_exponential,
    run,
    schedule,
    uniqueness_check,
)
from lcmembrane.presets import clifford, load_preset


def _small(eps=1e-2, amp=None):
    pre = load_preset("nondegenerate-small").override(grid=16, T=0.1, dt=2e-3, epsilon=eps)
    if amp is not None:
        pre.config["data"]["v0_amplitude"] = str(amp)
    return pre


@pytest.fixture(scope="module")
def small_run():
    pre = _small()
    solver = NashMoser(pre.problem(), pre.schedule(6), pre.dt, **pre.nash_moser_kwargs())
    W, rep = solver.run()
    return pre, solver, W, rep


def test_schedule_worked_example():
    sch = schedule(2, 4, 1, 6)
    assert sch.s_l(1) == 3.0
    assert sch.s_l(2) == 2.5
    assert sch.alpha_l(2) == 0.5
    assert sch.N_l(3) == 8
    vals = [sch.s_l(l) for l in range(40)]
    assert all(a > b for a, b in zip(vals, vals[1:30]))
    assert vals[-1] == pytest.approx(2.0, abs=1e-9)
    assert [row["N_l"] for row in sch.table] == [2**l for l in range(sch.max_levels + 2)]


@pytest.mark.parametrize(
    "args,kw",
    [((4, 2, 1, 6), {}), ((2, 4, 3, 6), {}), ((2, 6, 1, 6), {}), ((2, 4, 1, 6), {"d": 1.5}), ((2, 4, 1, 6), {"max_levels": 0})],
)
def test_schedule_rejects_bad_chain(args, kw):
    with pytest.raises(ValueError):
        schedule(*args, **kw)
    with pytest.raises(ValueError):
        schedule(2, 4, 1, 6).alpha_l(0)


def _history_problem(grid, T=0.02, dt=1e-3):
    c = clifford(grid)
    z = np.zeros_like(c)
    return MembraneProblem(grid, c, z, z, 1e-2, T)


def test_approx_operator_basics(grid32, rng):
    prob = _history_problem(grid32)
    nt = 21
    z = SpacetimeField.zeros(grid32, 4, nt, 1e-3)
    assert np.max(np.abs(approx_operator(z, prob, 2).data)) == 0.0
    f = band_limited(grid32, 10, rng, m=4)
    W = SpacetimeField.from_function(grid32, lambda t: (t / 0.02) ** 2 * f, 0.02, 1e-3)
    full = approx_operator(W, prob, None).data
    assert np.array_equal(approx_operator(W, prob, 16).data, full)
    bad = SpacetimeField.from_function(grid32, lambda t: f, 0.02, 1e-3)
    with pytest.raises(ValueError):
        approx_operator(bad, prob, 2)
    with pytest.raises(ValueError):
        approx_operator(SpacetimeField.zeros(grid32, 3, nt, 1e-3), prob, 2)


def test_approx_operator_window_estimate(grid32, rng):
    prob = _history_problem(grid32)
    S = MembraneSystem(prob)
    f = band_limited(grid32, 15, rng, m=4, decay=0.3)
    W = SpacetimeField.from_function(grid32, lambda t: (t / 0.02) ** 2 * f, 0.02, 1e-3)
    full = approx_operator(W, prob, None, S).data[-1]
    v, V = S.full_velocity(W)
    F = prob.forcing_scale * S.F(S.slot(v[-2], V[-2]))
    for s1, s2 in ((0.0, 2.0), (1.0, 3.0)):
        ratios = []
        for N in (1, 2, 4, 8):
            diff = approx_operator(W, prob, N, S).data[-1] - full
            ratios.append(sobolev_norm(diff, grid32, s1) / (N ** (s1 - s2) * sobolev_norm(F, grid32, s2)))
        assert max(ratios) <= 1.0 + 1e-12  # C = 1 for the sharp cutoff
        # the difference is exactly the discarded window of F
        assert np.allclose(approx_operator(W, prob, 4, S).data[-1] - full, F - low_pass(F, grid32, 4), atol=1e-9 * np.abs(full).max())


def test_small_run_converges(small_run):
    pre, solver, W, rep = small_run
    assert rep.converged and rep.status == "converged"
    assert rep.levels[-1].norm_E <= pre.schedule(6).floor_tolerance
    for rec in rep.levels:
        assert rec.consistency is None or rec.consistency <= 1e-10
    # telescoping
    total = sum(h.data for h in solver.state.increments)
    assert np.max(np.abs(W.data - total)) <= 1e-15 * np.max(np.abs(W.data))
    # increment bound with the run's own constant
    ratios = [b.norm_h / a.norm_E for a, b in zip(rep.levels, rep.levels[1:]) if a.norm_E > 0]
    assert all(np.isfinite(ratios)) and max(ratios) < 1e3
    assert rep.quadratic_constant is not None and np.isfinite(rep.quadratic_constant)
    d = json.loads(rep.to_json())
    assert {"levels", "converged", "d_fit", "slope_fit"} <= set(d)
    assert {"l", "N_l", "s_l", "norm_h", "norm_E", "delta_l", "wallclock_ms"} <= set(d["levels"][0])


def test_zero_residual_step_is_trivial(small_run):
    pre, solver, W, _ = small_run
    zeroE = SpacetimeField.zeros(W.grid, 4, W.nt - 1, W.dt)
    st, rec = solver.step(IterationState(0, W, zeroE, increments=[W]))
    assert np.max(np.abs(st.increments[-1].data)) == 0.0
    assert np.array_equal(st.W.data, W.data)


def test_nonlinear_terms_off_converges_immediately():
    pre = _small()
    p = pre.problem()
    weights = {k: 0.0 for k in p.term_weights}
    lin = MembraneProblem(p.grid, p.u0, p.v0, p.v1, p.epsilon, p.T, weights=weights, principal_scale=p.kappa)
    _, rep = run(lin, pre.schedule(6), dt=pre.dt, **pre.nash_moser_kwargs())
    assert rep.converged and len(rep.levels) <= 2
    assert rep.levels[-1].norm_E == 0.0


def test_start_at_fixed_cutoff_solution(small_run):
    pre, _, W_ref, _ = small_run

    class FixedCutoff(NashMoser):
        def N(self, l):
            return 2

    prob = pre.problem()
    kw = pre.nash_moser_kwargs()
    W_star, rep = FixedCutoff(prob, pre.schedule(6), pre.dt, **kw).run()
    assert rep.converged
    base = NashMoser(prob, pre.schedule(6), pre.dt, **kw)
    E_star, scale = _residual(base.system, W_star, base.N(1), with_scale=True)
    # pointwise residual of the exact start is at roundoff of the cancelling
    # terms; the triple norm amplifies that roundoff by 1/dt^2 and is not asserted
    assert np.max(np.abs(E_star)) <= 1e-10 * scale
    W2, rep2 = base.run(W_star)
    assert rep2.converged
    assert np.max(np.abs(W2.data - W_ref.data)) <= 1e-8 * np.max(np.abs(W_ref.data))


def test_smoothing_off_agrees(small_run):
    pre, _, W, _ = small_run
    kw = dict(pre.nash_moser_kwargs(), smoothing=False)
    W2, rep = run(pre.problem(), pre.schedule(6), dt=pre.dt, **kw)
    assert rep.converged
    assert np.max(np.abs(W2.data - W.data)) <= 1e-6 * np.max(np.abs(W.data))


def test_uniqueness_identical_and_perturbed(small_run):
    pre, _, _, _ = small_run
    prob, sch, kw = pre.problem(), pre.schedule(6), pre.nash_moser_kwargs()
    same = uniqueness_check(prob, sch, None, None, dt=pre.dt, **kw)
    assert same["absolute_L2"] == 0.0 and same["agree"]
    prof = seeded_profile(prob.grid, 4, 7)
    pert = PerturbedStart(prof, amplitude=1e-3 * prob.kappa)
    diff = uniqueness_check(prob, sch, None, pert, dt=pre.dt, **kw)
    assert diff["agree"] and diff["relative_L2"] <= 1e-6
    assert diff["difference_sequence"][0] > diff["difference_sequence"][-1]


def test_epsilon_threshold_exists():
    pre = _small(amp=1e3)
    out = epsilon_sweep(lambda e: pre.override(epsilon=e).problem(), [1e-2, 0.5], pre.schedule(6), dt=pre.dt, **pre.nash_moser_kwargs())
    assert out["threshold_found"]
    assert out["epsilon_star"] == 1e-2
    assert out["runs"][-1]["status"] == "divergence"


def test_ball_exit_is_reported():
    pre = _small()
    _, rep = run(pre.problem(), pre.schedule(6), dt=pre.dt, R_ball=1e-12, **pre.nash_moser_kwargs())
    assert rep.status == "ball exit" and not rep.converged


def test_fit_double_exponential_recovers_parameters():
    l = np.arange(5)
    e = 3.0 * 0.2 ** (2.0**l)
    fit = fit_double_exponential(e)
    assert fit["d"] == pytest.approx(0.2, rel=1e-10)
    assert fit["K"] == pytest.approx(3.0, rel=1e-10)
    assert fit["normalized_slope"] == pytest.approx(np.log(2), rel=1e-10)
    assert np.isfinite(fit["raw_slope"])
    assert np.isnan(fit_double_exponential([2.0, 0.5])["raw_slope"])
    assert np.isnan(fit_double_exponential([1.0])["d"])
