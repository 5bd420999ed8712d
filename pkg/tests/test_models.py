"""Model family construction, validation, and simulation tests."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import abchmm as a


def _const_spec(q, means, sds, init=None):
    q = np.asarray(q, dtype=float)
    S = q.shape[0]
    em = a.GaussianPerState(
        lambda t, m=np.asarray(means, float): m,
        lambda t, s=np.asarray(sds, float): s,
    )
    init = np.full(S, 1.0 / S) if init is None else np.asarray(init, float)
    return a.HmmSpec(S, lambda t, q=q: q, em, init, a.ParamSpace([-1.0], [1.0]), a.Lebesgue1D())


def test_param_space_rejects_empty_box():
    with pytest.raises(ValueError, match="empty parameter box"):
        a.ParamSpace([1.0], [1.0])
    with pytest.raises(ValueError, match="empty parameter box"):
        a.ParamSpace([0.0, 2.0], [1.0, 1.0])


def test_param_space_require_names_violated_bound():
    space = a.ParamSpace([0.0, -1.0], [1.0, 1.0])
    with pytest.raises(ValueError, match=r"theta\[1\]"):
        space.require([0.5, 3.0])


def test_validate_constant_two_state_passes():
    spec = _const_spec([[0.7, 0.3], [0.4, 0.6]], [0.0, 1.0], [1.0, 1.0])
    report = a.validate_spec(spec, grid_points=4)
    assert report.passed and not report.failures


def test_validate_flags_bad_row_sum():
    spec = _const_spec([[0.8, 0.3], [0.4, 0.6]], [0.0, 1.0], [1.0, 1.0])
    report = a.validate_spec(spec, grid_points=3)
    assert not report.passed
    assert any("row 0 sums to 1.1" in f for f in report.failures)


def test_validate_dyadic_truncated_masses():
    spec = a.dyadic_mixture(truncation=20)
    # truncation leaves a 4^-20 tail out of each component
    assert a.validate_spec(spec, grid_points=5, mass_atol=1e-11).passed
    assert not a.validate_spec(spec, grid_points=5, mass_atol=1e-14).passed


def test_dyadic_masses_sum_to_one_minus_tail():
    K = 20
    spec = a.dyadic_mixture(truncation=K)
    total = spec.emission.masses(np.array([0.5]))[0].sum()
    assert abs(total - (1.0 - 4.0 ** (-K))) < 1e-15


def test_simulate_deterministic():
    spec = a.two_state_gaussian()
    t1 = a.simulate(spec, [0.3, 0.8], 50, 123)
    t2 = a.simulate(spec, [0.3, 0.8], 50, 123)
    assert np.array_equal(t1.hidden, t2.hidden)
    assert np.array_equal(t1.observed, t2.observed)
    assert t1.observed.size == t1.hidden.size - 1


def test_simulate_rejects_theta_outside_box():
    spec = a.gaussian_scale()
    with pytest.raises(ValueError, match=r"theta\[0\]"):
        a.simulate(spec, [5.0], 10, 0)


def test_simulate_sampler_mean_clt():
    # single state N(theta, 1): empirical mean of many short runs tracks theta
    spec = a.gaussian_location()
    theta = 0.7
    draws = np.concatenate(
        [a.simulate(spec, [theta], 3, seed).observed for seed in range(2000)]
    )
    se = 1.0 / np.sqrt(draws.size)
    assert abs(draws.mean() - theta) < 3 * se


def test_simulate_absorbing_chain_stays_put():
    em = a.GaussianPerState(lambda t: np.array([0.0, 5.0]), lambda t: np.array([1.0, 1.0]))
    spec = a.HmmSpec(
        2,
        lambda t: np.array([[1.0, 0.0], [0.4, 0.6]]),
        em,
        np.array([1.0, 0.0]),
        a.ParamSpace([0.0], [1.0]),
        a.Lebesgue1D(),
    )
    traj = a.simulate(spec, [0.5], 200, 7)
    assert np.all(traj.hidden == 0)


def test_simulate_dyadic_theta_one_uses_only_coarse_atoms():
    spec = a.dyadic_mixture(lower=0.25, upper=1.0)
    traj = a.simulate(spec, [1.0], 500, 11)
    ks = np.round(-np.log(traj.observed) / np.log(4.0))
    assert_allclose(traj.observed, 4.0 ** (-ks), rtol=0, atol=1e-15)


def test_chain_occupancy_matches_stationary():
    spec = a.two_state_switch()
    traj = a.simulate(spec, [0.2], 100000, 5)
    occ = (traj.hidden[1:] == 1).mean()
    assert abs(occ - 0.5) < 0.01  # symmetric switch chain is uniform


def test_marginal_ks_band_single_state():
    # empirical CDF of simulated observations vs analytic emission CDF
    spec = a.gaussian_scale()
    theta = np.array([1.3])
    obs = np.sort(a.simulate(spec, theta, 100000, 17).observed)
    grid_cdf = spec.emission.cdf(theta, 0, obs)
    n = obs.size
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    ks = max(np.max(np.abs(emp_hi - grid_cdf)), np.max(np.abs(emp_lo - grid_cdf)))
    assert ks < 1.63 / np.sqrt(n)  # 99% band


def test_marginal_ks_band_dyadic():
    spec = a.dyadic_mixture()
    theta = np.array([0.5])
    obs = np.sort(a.simulate(spec, theta, 100000, 19).observed)
    cdf = spec.emission.cdf(theta, 0, obs)
    n = obs.size
    emp_hi = np.arange(1, n + 1) / n
    emp_lo = np.arange(0, n) / n
    ks = max(np.max(np.abs(emp_hi - cdf)), np.max(np.abs(emp_lo - cdf)))
    assert ks < 1.63 / np.sqrt(n)  # conservative for discrete laws


def test_emission_density_values():
    spec = a.gaussian_location()
    assert abs(a.emission_density(spec, [0.0], 0, 0.0) - 0.3989423) < 1e-6
    dy = a.dyadic_mixture()
    assert a.emission_density(dy, [0.5], 0, 1.0) == pytest.approx(0.375, abs=1e-15)
    assert a.emission_density(dy, [0.5], 0, 0.3) == 0.0


def test_transition_matrix_builder_and_errors():
    spec = a.two_state_gaussian()
    q = a.transition_matrix(spec, [0.25, 1.0])
    assert_allclose(q, [[0.75, 0.25], [0.25, 0.75]])
    bad = _const_spec([[0.8, 0.3], [0.4, 0.6]], [0.0, 1.0], [1.0, 1.0])
    with pytest.raises(ValueError, match="row 0"):
        bad.transition_matrix([0.0])


def test_transition_lipschitz_probe():
    spec = a.two_state_gaussian()
    theta = np.array([0.4, 1.0])
    delta = 1e-6
    q0 = spec.transition_builder(theta)
    q1 = spec.transition_builder(theta + np.array([delta, 0.0]))
    L = np.max(np.abs(q1 - q0)) / delta
    assert L < 2.0  # finite Lipschitz constant in theta


@pytest.mark.parametrize("family", ["gaussian_location", "gaussian_scale", "dyadic", "two_state_gaussian"])
def test_emission_score_matches_log_density_differences(family):
    spec = a.make_spec(family)
    rng = np.random.default_rng(3)
    space = spec.theta_space
    for _ in range(10):
        theta = space.lower + rng.random(space.dim) * (space.upper - space.lower)
        theta = 0.9 * theta + 0.05 * (space.lower + space.upper)  # keep interior
        x = int(rng.integers(spec.n_states))
        y = spec.emission.sample(theta, x, rng)
        sc = spec.emission.score(theta, x, y)
        for c in range(space.dim):
            h = 1e-5 * max(1.0, abs(theta[c]))
            tp, tm = theta.copy(), theta.copy()
            tp[c] += h
            tm[c] -= h
            fd = (spec.emission.log_density(tp, x, y) - spec.emission.log_density(tm, x, y)) / (2 * h)
            assert sc[c] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_make_spec_unknown_family():
    with pytest.raises(ValueError, match="unknown family"):
        a.make_spec("no_such_family")
