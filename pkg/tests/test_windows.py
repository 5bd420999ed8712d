"""Windowed emission densities, ball measures, and the noise channel."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

import abchmm as a
from abchmm.quadrature import adaptive_simpson


def _phi(u):
    return math.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def test_adaptive_simpson_known_integrals():
    assert adaptive_simpson(lambda u: u * u, 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-12)
    assert adaptive_simpson(math.sin, 0.0, math.pi) == pytest.approx(2.0, abs=1e-10)
    assert adaptive_simpson(lambda u: 1.0, 2.0, 2.0) == 0.0


def test_window_density_gaussian_matches_quadrature_oracle():
    spec = a.gaussian_location()
    w = spec.windowed(0.1)
    got = a.window_density(w, [0.0], 0, 0.0)
    oracle = adaptive_simpson(_phi, -0.1, 0.1) / 0.2
    assert got == pytest.approx(oracle, abs=1e-10)
    assert got == pytest.approx(0.398278, abs=1e-6)


def test_window_density_uniform_ball_inside_support():
    em = a.UniformInterval(lambda t, x: (0.0, 1.0))
    spec = a.HmmSpec(1, lambda t: np.array([[1.0]]), em, np.array([1.0]),
                     a.ParamSpace([0.0], [1.0]), a.Lebesgue1D())
    w = spec.windowed(0.2)
    assert a.window_density(w, [0.5], 0, 0.5) == pytest.approx(1.0, abs=1e-12)


def test_window_density_dyadic_examples():
    spec = a.dyadic_mixture()
    w = spec.windowed(1.0 / 8.0)
    # ball [3/8, 5/8] holds only the atom 1/2
    assert a.window_density(w, [0.5], 0, 0.5) == pytest.approx(0.375, abs=1e-15)
    assert a.window_density_grad(w, [0.5], 0, 0.5)[0] == pytest.approx(-0.75, abs=1e-15)


def test_window_zero_epsilon_delegates_exactly():
    spec = a.gaussian_scale()
    w = spec.windowed(0.0)
    theta = np.array([1.7])
    ys = np.array([-0.5, 0.0, 2.2])
    assert_allclose(w.density(theta, 0, ys), spec.emission.density(theta, 0, ys), rtol=0)
    g = spec.emission.density(theta, 0, ys)[:, None] * spec.emission.score(theta, 0, ys)
    assert_allclose(w.grad(theta, 0, ys), g, rtol=0)


def test_window_grad_odd_symmetry_location():
    # location family at the centre: the gradient integrand is odd over the ball
    spec = a.gaussian_location()
    w = spec.windowed(0.1)
    assert abs(w.grad(np.array([0.0]), 0, 0.0)[0]) < 1e-12


def test_ball_measure_lebesgue_and_counting():
    assert a.ball_measure(a.Lebesgue1D(), 3.0, 0.1).mass == pytest.approx(0.2, abs=0)
    atoms = a.dyadic_mixture().dominating_measure
    assert a.ball_measure(atoms, 1.0, 0.25).mass == 1.0  # [0.75, 1.25] -> {1}
    assert a.ball_measure(atoms, 1.0, 0.6).mass == 2.0   # [0.4, 1.6] -> {1/2, 1}
    with pytest.raises(ValueError):
        a.ball_measure(a.Lebesgue1D(), 0.0, 0.0)


def test_empty_ball_is_an_error_not_zero():
    spec = a.dyadic_mixture()
    w = spec.windowed(1e-3)
    with pytest.raises(a.ZeroBallError, match="zero ball measure"):
        a.window_density(w, [0.5], 0, 0.3)
    # off-atom but nonempty ball is a legitimate density value
    assert a.window_density(w, [0.5], 0, 0.5 + 5e-4) > 0.0


def test_perturb_sample_moments_and_support():
    ys = a.perturb_sample(0.0, 0.5, 12345, size=100000)
    se_mean = 3 * (0.5 / np.sqrt(3)) / np.sqrt(ys.size)
    assert abs(ys.mean()) < se_mean
    assert abs(ys.var() - 0.25 / 3) < 0.05 * (0.25 / 3)
    assert np.all(np.abs(ys) <= 0.5)
    assert a.perturb_sample(1.25, 0.0, 7) == 1.25


def test_perturb_sample_deterministic():
    assert a.perturb_sample(0.3, 0.2, 99) == a.perturb_sample(0.3, 0.2, 99)


def test_window_normalisation_dyadic():
    # integral of g_eps against the smoothed dominating measure is the total mass
    K = 20
    spec = a.dyadic_mixture(truncation=K)
    eps = 0.3
    w = spec.windowed(eps)
    theta = np.array([0.5])
    atoms = spec.emission.atoms
    edges = np.unique(np.concatenate([atoms - eps, atoms + eps]))
    mids = 0.5 * (edges[:-1] + edges[1:])
    counts = np.asarray(w.ball_mass(mids))
    keep = counts > 0
    dens = w.density(theta, 0, mids[keep])
    total = np.sum(dens * counts[keep] / (2 * eps) * np.diff(edges)[keep])
    assert total == pytest.approx(1.0 - 4.0 ** (-K), abs=1e-8)


def test_window_normalisation_uniform_base():
    em = a.UniformInterval(lambda t, x: (0.0, 1.0))
    spec = a.HmmSpec(1, lambda t: np.array([[1.0]]), em, np.array([1.0]),
                     a.ParamSpace([0.0], [1.0]), a.Lebesgue1D())
    eps = 0.15
    w = spec.windowed(eps)
    total = adaptive_simpson(lambda y: float(w.density(np.array([0.5]), 0, y)),
                             -eps, 1.0 + eps, abs_tol=1e-10)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_window_converges_to_base_as_eps_shrinks():
    spec = a.gaussian_location()
    theta = np.array([0.0])
    ys = np.arange(-2.0, 2.5, 1.0)
    base = spec.emission.density(theta, 0, ys)
    gaps = []
    for eps in (0.4, 0.2, 0.1, 0.05, 0.01):
        w = spec.windowed(eps)
        gaps.append(np.max(np.abs(np.asarray(w.density(theta, 0, ys)) - base)))
    assert gaps[-1] <= 1e-4            # eps = 0.01
    assert all(b < c for b, c in zip(gaps[1:], gaps[:-1]))  # monotone along eps


def test_window_equals_ball_probability_over_width():
    # for Lebesgue nu: density * 2 eps equals the CDF increment of the base law
    spec = a.gaussian_scale()
    theta = np.array([0.8])
    eps = 0.23
    w = spec.windowed(eps)
    ys = np.array([-1.7, -0.4, 0.0, 0.9, 2.4])
    prob = spec.emission.cdf(theta, 0, ys + eps) - spec.emission.cdf(theta, 0, ys - eps)
    assert_allclose(np.asarray(w.density(theta, 0, ys)) * 2 * eps, prob, atol=1e-8, rtol=0)


@pytest.mark.parametrize("family,theta", [
    ("gaussian_location", [0.4]),
    ("gaussian_scale", [1.2]),
    ("two_state_gaussian", [0.3, 0.9]),
    ("dyadic", [0.6]),
])
def test_window_grad_matches_theta_differences(family, theta):
    spec = a.make_spec(family)
    eps = 0.25 if family == "dyadic" else 0.17
    w = spec.windowed(eps)
    theta = np.array(theta, dtype=float)
    rng = np.random.default_rng(8)
    ys = np.asarray([spec.emission.sample(theta, int(rng.integers(spec.n_states)), rng) for _ in range(5)])
    for x in range(spec.n_states):
        grad = np.asarray(w.grad(theta, x, ys))
        for c in range(theta.size):
            h = 1e-6 * max(1.0, abs(theta[c]))
            tp, tm = theta.copy(), theta.copy()
            tp[c] += h
            tm[c] -= h
            fd = (np.asarray(w.density(tp, x, ys)) - np.asarray(w.density(tm, x, ys))) / (2 * h)
            assert_allclose(grad[:, c], fd, rtol=1e-5, atol=1e-9)


def test_window_hess_matches_grad_differences():
    spec = a.gaussian_scale()
    theta = np.array([0.9])
    w = spec.windowed(0.3)
    ys = np.array([-1.0, 0.2, 1.5])
    hess = np.asarray(w.hess(theta, 0, ys))[:, 0, 0]
    h = 1e-5
    fd = (np.asarray(w.grad(theta + h, 0, ys)) - np.asarray(w.grad(theta - h, 0, ys)))[:, 0] / (2 * h)
    assert_allclose(hess, fd, rtol=1e-4, atol=1e-8)
