"""Parameterised HMM families with a finite hidden state space.

A model is described by an :class:`HmmSpec`: a transition-matrix builder
``theta -> Q``, an emission family ``g_theta(y | x)`` over scalar
observations, an initial distribution over hidden states, a compact box of
admissible parameter vectors and a dominating measure for the emission
densities (Lebesgue on the line, or counting measure on a fixed atom list).

Three emission families are built in:

* :class:`GaussianPerState` -- per-state normal emissions whose mean and
  standard deviation are functions of theta,
* :class:`DiscreteAtoms` -- purely atomic emissions on a fixed sorted atom
  list with theta-dependent masses (used by the dyadic mixture family),
* :class:`UniformInterval` -- uniform emissions on theta-dependent intervals.

Everything in this module is a pure function of its inputs plus an explicit
seed, so simulation is reproducible bit for bit and safe to fan out across
workers with distinct seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "ParamSpace",
    "HmmSpec",
    "Trajectory",
    "GaussianPerState",
    "DiscreteAtoms",
    "UniformInterval",
    "Lebesgue1D",
    "CountingAtoms",
    "ValidationReport",
    "ParamBoundsError",
    "validate_spec",
    "simulate",
    "emission_density",
    "transition_matrix",
    "gaussian_location",
    "gaussian_scale",
    "dyadic_mixture",
    "two_state_gaussian",
    "two_state_switch",
    "make_spec",
    "FAMILIES",
]

_SQRT2PI = np.sqrt(2.0 * np.pi)


class ParamBoundsError(ValueError):
    """Parameter vector outside the admissible box."""


# ---------------------------------------------------------------------------
# parameter space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpace:
    """Compact box of admissible parameter vectors.

    ``lower[i] < upper[i]`` is required for every coordinate; a degenerate or
    empty box is rejected at construction time.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("parameter bounds must be finite")
        if not np.all(lo < hi):
            bad = int(np.argmin(hi - lo))
            raise ValueError(
                f"empty parameter box: lower[{bad}]={lo[bad]} >= upper[{bad}]={hi[bad]}"
            )
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, theta, atol: float = 0.0) -> bool:
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        if t.shape != self.lower.shape:
            return False
        return bool(np.all(t >= self.lower - atol) and np.all(t <= self.upper + atol))

    def require(self, theta) -> np.ndarray:
        """Return theta as an array, raising with the violated bound if outside."""
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        if t.shape != self.lower.shape:
            raise ParamBoundsError(
                f"theta has dimension {t.shape[0]}, expected {self.dim}"
            )
        for i in range(self.dim):
            if not (self.lower[i] <= t[i] <= self.upper[i]):
                raise ParamBoundsError(
                    f"theta[{i}]={t[i]} outside [{self.lower[i]}, {self.upper[i]}]"
                )
        return t

    def clip(self, theta) -> np.ndarray:
        return np.clip(np.atleast_1d(np.asarray(theta, dtype=float)), self.lower, self.upper)

    def grid(self, points_per_dim: int) -> np.ndarray:
        """Cartesian grid over the box, rows in lexicographic order, shape (N, d)."""
        axes = [np.linspace(self.lower[i], self.upper[i], points_per_dim) for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


# ---------------------------------------------------------------------------
# dominating measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lebesgue1D:
    """Lebesgue measure on the real line."""

    kind: str = field(default="lebesgue", init=False)


@dataclass(frozen=True)
class CountingAtoms:
    """Counting measure on a fixed, strictly increasing atom list."""

    atoms: np.ndarray
    kind: str = field(default="counting", init=False)

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("atom list must be a nonempty 1-d array")
        if not np.all(np.diff(a) > 0):
            raise ValueError("atom list must be strictly increasing (no duplicates)")
        object.__setattr__(self, "atoms", a)


MeasureDescriptor = Union[Lebesgue1D, CountingAtoms]


# ---------------------------------------------------------------------------
# finite-difference helpers shared by the emission families
# ---------------------------------------------------------------------------


def _fd_jacobian(fn, theta, h_scale=1e-6):
    """Central-difference Jacobian of a vector-valued fn(theta), shape (*out, d)."""
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    cols = []
    for c in range(d):
        h = h_scale * max(1.0, abs(theta[c]))
        tp, tm = theta.copy(), theta.copy()
        tp[c] += h
        tm[c] -= h
        cols.append((np.asarray(fn(tp), dtype=float) - np.asarray(fn(tm), dtype=float)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def _fd_hessian(fn, theta, h_scale=1e-4):
    """Central-difference Hessian of a vector-valued fn(theta), shape (*out, d, d)."""
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    f0 = np.asarray(fn(theta), dtype=float)
    out = np.zeros(f0.shape + (d, d))
    hs = [h_scale * max(1.0, abs(theta[c])) for c in range(d)]
    for i in range(d):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += hs[i]
        tm[i] -= hs[i]
        out[..., i, i] = (np.asarray(fn(tp)) - 2.0 * f0 + np.asarray(fn(tm))) / hs[i] ** 2
    for i in range(d):
        for j in range(i + 1, d):
            tpp, tpm, tmp, tmm = (theta.copy() for _ in range(4))
            tpp[i] += hs[i]; tpp[j] += hs[j]
            tpm[i] += hs[i]; tpm[j] -= hs[j]
            tmp[i] -= hs[i]; tmp[j] += hs[j]
            tmm[i] -= hs[i]; tmm[j] -= hs[j]
            mixed = (np.asarray(fn(tpp)) - np.asarray(fn(tpm)) - np.asarray(fn(tmp)) + np.asarray(fn(tmm))) / (
                4.0 * hs[i] * hs[j]
            )
            out[..., i, j] = mixed
            out[..., j, i] = mixed
    return out


# ---------------------------------------------------------------------------
# emission families
# ---------------------------------------------------------------------------


class GaussianPerState:
    """Normal emissions per hidden state: Y | X=x ~ N(mean(theta)[x], sd(theta)[x]^2).

    ``mean_fn``/``sd_fn`` map theta to per-state arrays.  The derivative
    callbacks are optional; when absent they are filled in by central finite
    differences of the moment functions, which keeps the analytic score and
    Hessian formulas below usable for any smooth parametrisation.
    """

    kind = "gaussian_per_state"

    def __init__(self, mean_fn, sd_fn, dmean_fn=None, dsd_fn=None, d2mean_fn=None, d2sd_fn=None):
        self.mean_fn = mean_fn
        self.sd_fn = sd_fn
        self.dmean_fn = dmean_fn
        self.dsd_fn = dsd_fn
        self.d2mean_fn = d2mean_fn
        self.d2sd_fn = d2sd_fn

    # -- moments and their theta-derivatives ------------------------------

    def moments(self, theta):
        m = np.atleast_1d(np.asarray(self.mean_fn(theta), dtype=float))
        s = np.atleast_1d(np.asarray(self.sd_fn(theta), dtype=float))
        return m, s

    def dmoments(self, theta):
        dm = (
            np.asarray(self.dmean_fn(theta), dtype=float)
            if self.dmean_fn is not None
            else _fd_jacobian(lambda t: np.atleast_1d(self.mean_fn(t)), theta)
        )
        ds = (
            np.asarray(self.dsd_fn(theta), dtype=float)
            if self.dsd_fn is not None
            else _fd_jacobian(lambda t: np.atleast_1d(self.sd_fn(t)), theta)
        )
        return np.atleast_2d(dm), np.atleast_2d(ds)

    def d2moments(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        d = theta.shape[0]
        if self.d2mean_fn is not None:
            d2m = np.asarray(self.d2mean_fn(theta), dtype=float)
        else:
            d2m = _fd_hessian(lambda t: np.atleast_1d(self.mean_fn(t)), theta)
        if self.d2sd_fn is not None:
            d2s = np.asarray(self.d2sd_fn(theta), dtype=float)
        else:
            d2s = _fd_hessian(lambda t: np.atleast_1d(self.sd_fn(t)), theta)
        return d2m.reshape(-1, d, d), d2s.reshape(-1, d, d)

    # -- densities ---------------------------------------------------------

    def density(self, theta, x, y):
        m, s = self.moments(theta)
        t = (np.asarray(y, dtype=float) - m[x]) / s[x]
        return np.exp(-0.5 * t * t) / (_SQRT2PI * s[x])

    def log_density(self, theta, x, y):
        m, s = self.moments(theta)
        t = (np.asarray(y, dtype=float) - m[x]) / s[x]
        return -0.5 * t * t - np.log(_SQRT2PI * s[x])

    def cdf(self, theta, x, y):
        from scipy.special import ndtr

        m, s = self.moments(theta)
        return ndtr((np.asarray(y, dtype=float) - m[x]) / s[x])

    def score(self, theta, x, y):
        """Gradient of log density w.r.t. theta, shape y.shape + (d,)."""
        m, s = self.moments(theta)
        dm, ds = self.dmoments(theta)
        t = (np.asarray(y, dtype=float) - m[x]) / s[x]
        t = np.asarray(t)
        out = dm[x] * (t / s[x])[..., None] + ds[x] * ((t * t - 1.0) / s[x])[..., None]
        return out

    def log_hess(self, theta, x, y):
        """Hessian of log density w.r.t. theta, shape y.shape + (d, d)."""
        m, s = self.moments(theta)
        dm, ds = self.dmoments(theta)
        d2m, d2s = self.d2moments(theta)
        sx = s[x]
        t = np.asarray((np.asarray(y, dtype=float) - m[x]) / sx)
        mm = np.einsum("i,j->ij", dm[x], dm[x])
        msym = np.einsum("i,j->ij", dm[x], ds[x]) + np.einsum("i,j->ij", ds[x], dm[x])
        ss = np.einsum("i,j->ij", ds[x], ds[x])
        t1 = t[..., None, None]
        t2 = (t * t)[..., None, None]
        out = (
            d2m[x] * t1 / sx
            - mm / sx**2
            - msym * t1 / sx**2
            + d2s[x] * (t2 - 1.0) / sx
            + ss * (1.0 - 3.0 * t2) / sx**2
        )
        return out

    def sample(self, theta, x, rng, size=None):
        m, s = self.moments(theta)
        return m[x] + s[x] * rng.standard_normal(size)

    def support(self, theta):
        m, s = self.moments(theta)
        pad = 12.0 * float(np.max(s))
        return float(np.min(m)) - pad, float(np.max(m)) + pad


class DiscreteAtoms:
    """Atomic emissions on a fixed sorted atom list with theta-dependent masses.

    ``mass_fn(theta)`` returns an (n_states, n_atoms) array.  Masses need not
    sum exactly to one when the atom list is a truncation of an infinite
    support; the declared ``mass_tol`` carries the truncated tail so that
    validation can distinguish truncation from a genuinely broken family.
    """

    kind = "discrete_atoms"

    def __init__(self, atoms, mass_fn, dmass_fn=None, d2mass_fn=None, mass_tol=1e-12):
        a = np.asarray(atoms, dtype=float)
        if not np.all(np.diff(a) > 0):
            raise ValueError("atoms must be strictly increasing")
        self.atoms = a
        self.mass_fn = mass_fn
        self.dmass_fn = dmass_fn
        self.d2mass_fn = d2mass_fn
        self.mass_tol = float(mass_tol)

    def masses(self, theta):
        return np.asarray(self.mass_fn(theta), dtype=float)

    def dmasses(self, theta):
        if self.dmass_fn is not None:
            return np.asarray(self.dmass_fn(theta), dtype=float)
        return _fd_jacobian(self.mass_fn, theta)

    def d2masses(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.d2mass_fn is not None:
            return np.asarray(self.d2mass_fn(theta), dtype=float)
        return _fd_hessian(self.mass_fn, theta)

    def _atom_index(self, y):
        """Index of each y in the atom list, -1 where y is not an atom (exact match)."""
        y = np.asarray(y, dtype=float)
        idx = np.searchsorted(self.atoms, y)
        idx = np.clip(idx, 0, self.atoms.size - 1)
        hit = self.atoms[idx] == y
        return np.where(hit, idx, -1)

    def density(self, theta, x, y):
        m = self.masses(theta)[x]
        idx = self._atom_index(y)
        out = np.where(idx >= 0, m[np.clip(idx, 0, None)], 0.0)
        return out if out.ndim else float(out)

    def log_density(self, theta, x, y):
        with np.errstate(divide="ignore"):
            return np.log(self.density(theta, x, y))

    def cdf(self, theta, x, y):
        m = self.masses(theta)[x]
        cum = np.cumsum(m)
        idx = np.searchsorted(self.atoms, np.asarray(y, dtype=float), side="right")
        return np.where(idx > 0, cum[np.clip(idx - 1, 0, None)], 0.0)

    def score(self, theta, x, y):
        m = self.masses(theta)[x]
        dm = self.dmasses(theta)[x]
        idx = self._atom_index(y)
        safe = np.clip(idx, 0, None)
        out = dm[safe] / m[safe][..., None]
        return np.where((idx >= 0)[..., None], out, np.nan)

    def log_hess(self, theta, x, y):
        m = self.masses(theta)[x]
        dm = self.dmasses(theta)[x]
        d2m = self.d2masses(theta)[x]
        idx = self._atom_index(y)
        safe = np.clip(idx, 0, None)
        r = dm[safe] / m[safe][..., None]
        out = d2m[safe] / m[safe][..., None, None] - r[..., :, None] * r[..., None, :]
        return out

    def sample(self, theta, x, rng, size=None):
        m = self.masses(theta)[x]
        p = m / m.sum()  # renormalise the truncated tail for sampling only
        return rng.choice(self.atoms, size=size, p=p)

    def support(self, theta):
        return float(self.atoms[0]), float(self.atoms[-1])


class UniformInterval:
    """Uniform emissions on theta-dependent intervals [a(theta, x), b(theta, x)]."""

    kind = "uniform_interval"

    def __init__(self, bounds_fn):
        self.bounds_fn = bounds_fn

    def density(self, theta, x, y):
        a, b = self.bounds_fn(theta, x)
        y = np.asarray(y, dtype=float)
        inside = (y >= a) & (y <= b)
        return np.where(inside, 1.0 / (b - a), 0.0)

    def log_density(self, theta, x, y):
        with np.errstate(divide="ignore"):
            return np.log(self.density(theta, x, y))

    def cdf(self, theta, x, y):
        a, b = self.bounds_fn(theta, x)
        return np.clip((np.asarray(y, dtype=float) - a) / (b - a), 0.0, 1.0)

    def _dlength(self, theta, x):
        def length(t):
            a, b = self.bounds_fn(t, x)
            return np.array([b - a])

        return _fd_jacobian(length, theta)[0], _fd_hessian(length, theta)[0]

    def score(self, theta, x, y):
        # log g = -log(b - a) inside the support, independent of y there
        a, b = self.bounds_fn(theta, x)
        dL, _ = self._dlength(theta, x)
        y = np.asarray(y, dtype=float)
        inside = (y >= a) & (y <= b)
        out = np.broadcast_to(-dL / (b - a), y.shape + dL.shape).copy()
        out[~inside] = np.nan
        return out

    def log_hess(self, theta, x, y):
        a, b = self.bounds_fn(theta, x)
        L = b - a
        dL, d2L = self._dlength(theta, x)
        h = -d2L / L + np.outer(dL, dL) / L**2
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(h, y.shape + h.shape).copy()

    def sample(self, theta, x, rng, size=None):
        a, b = self.bounds_fn(theta, x)
        return rng.uniform(a, b, size=size)

    def support(self, theta):
        a, b = self.bounds_fn(theta, 0)
        return float(a), float(b)


EmissionFamily = Union[GaussianPerState, DiscreteAtoms, UniformInterval]


# ---------------------------------------------------------------------------
# the model spec and its operations
# ---------------------------------------------------------------------------


@dataclass
class HmmSpec:
    """A parameterised HMM family over a finite hidden state space."""

    n_states: int
    transition_builder: Callable[[np.ndarray], np.ndarray]
    emission: EmissionFamily
    initial_dist: np.ndarray
    theta_space: ParamSpace
    dominating_measure: MeasureDescriptor
    transition_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None  # (S, S, d)
    transition_hess: Optional[Callable[[np.ndarray], np.ndarray]] = None  # (S, S, d, d)
    family: Optional[str] = None
    family_params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)

    @property
    def single_state(self) -> bool:
        return self.n_states == 1

    def transition_matrix(self, theta) -> np.ndarray:
        theta = self.theta_space.require(theta)
        q = np.asarray(self.transition_builder(theta), dtype=float)
        if q.shape != (self.n_states, self.n_states):
            raise ValueError(f"transition builder returned shape {q.shape}, expected "
                             f"({self.n_states}, {self.n_states})")
        for i in range(self.n_states):
            if not np.isclose(q[i].sum(), 1.0, atol=1e-10) or np.any(q[i] < -1e-15):
                raise ValueError(f"transition row {i} is not a probability vector: {q[i]}")
        return q

    def transition_jacobian(self, theta) -> np.ndarray:
        if self.transition_grad is not None:
            return np.asarray(self.transition_grad(np.atleast_1d(np.asarray(theta, float))), dtype=float)
        return _fd_jacobian(self.transition_builder, np.atleast_1d(np.asarray(theta, float)))

    def transition_hessian(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, float))
        if self.transition_hess is not None:
            return np.asarray(self.transition_hess(theta), dtype=float)
        return _fd_hessian(self.transition_builder, theta)

    def windowed(self, epsilon: float, quadrature=None):
        from .windows import WindowedEmission

        if quadrature is None:
            return WindowedEmission(self.emission, epsilon, self.dominating_measure)
        return WindowedEmission(self.emission, epsilon, self.dominating_measure, quadrature)


@dataclass
class Trajectory:
    """One simulated path: hidden x_{0:n} and observations y_{1:n}."""

    hidden: np.ndarray
    observed: np.ndarray
    theta_used: np.ndarray
    seed: int


@dataclass
class ValidationReport:
    passed: bool
    failures: list
    n_checks: int

    def __bool__(self):
        return self.passed


def validate_spec(spec: HmmSpec, grid_points: int = 5, mass_atol: float = None) -> ValidationReport:
    """Check the spec's probabilistic invariants on a theta grid.

    Verifies, at each grid point: transition rows are stochastic to 1e-12,
    all entries nonnegative and finite; atomic emission masses sum to one
    within ``mass_atol`` (default: the family's declared truncation tolerance);
    and the initial distribution is a probability vector.  Returns a report
    listing every offending theta together with the row or state involved.
    """
    failures = []
    checks = 0
    init = spec.initial_dist
    checks += 1
    if init.shape != (spec.n_states,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
        failures.append(f"initial_dist is not a probability vector: {init}")

    if mass_atol is None:
        # declared truncation tail plus rounding slack for the summation itself
        mass_atol = getattr(spec.emission, "mass_tol", 1e-12) + 1e-12

    for theta in spec.theta_space.grid(grid_points):
        q = np.asarray(spec.transition_builder(theta), dtype=float)
        checks += 1
        if q.shape != (spec.n_states, spec.n_states):
            failures.append(f"theta={theta}: transition shape {q.shape}")
            continue
        if not np.all(np.isfinite(q)):
            failures.append(f"theta={theta}: non-finite transition entries")
        for i in range(spec.n_states):
            if abs(q[i].sum() - 1.0) > 1e-12:
                failures.append(f"theta={theta}: row {i} sums to {q[i].sum():.12g}")
            if np.any(q[i] < 0):
                failures.append(f"theta={theta}: row {i} has negative entries")
        if isinstance(spec.emission, DiscreteAtoms):
            m = spec.emission.masses(theta)
            checks += 1
            if not np.all(np.isfinite(m)):
                failures.append(f"theta={theta}: non-finite emission masses")
            if np.any(m < 0):
                failures.append(f"theta={theta}: negative emission mass")
            for x in range(spec.n_states):
                gap = abs(m[x].sum() - 1.0)
                if gap > mass_atol:
                    failures.append(
                        f"theta={theta}: state {x} emission masses sum to 1-{gap:.3g}"
                    )
    return ValidationReport(passed=not failures, failures=failures, n_checks=checks)


def transition_matrix(spec: HmmSpec, theta) -> np.ndarray:
    return spec.transition_matrix(theta)


def emission_density(spec: HmmSpec, theta, x: int, y):
    if not 0 <= x < spec.n_states:
        raise ValueError(f"state index {x} out of range for {spec.n_states} states")
    return spec.emission.density(np.atleast_1d(np.asarray(theta, float)), x, y)


def simulate(spec: HmmSpec, theta, n: int, seed: int) -> Trajectory:
    """Draw x_0 from the initial distribution, then alternate q and g for n steps.

    Deterministic given (spec, theta, n, seed); theta outside the box raises
    with the violated bound.  The hidden chain is drawn first (inverse-CDF on
    pre-drawn uniforms), then observations are filled in vectorised per state
    in state order, which keeps long single-state simulations cheap without
    giving up bit-exact reproducibility.
    """
    theta = spec.theta_space.require(theta)
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    hidden = np.zeros(n + 1, dtype=np.int64)
    if spec.n_states > 1:
        q = spec.transition_matrix(theta)
        cum_q = np.cumsum(q, axis=1)
        cum_init = np.cumsum(spec.initial_dist)
        u = rng.random(n + 1)
        x = min(int(np.searchsorted(cum_init, u[0], side="right")), spec.n_states - 1)
        hidden[0] = x
        for k in range(1, n + 1):
            x = min(int(np.searchsorted(cum_q[x], u[k], side="right")), spec.n_states - 1)
            hidden[k] = x
    observed = np.empty(n, dtype=float)
    states = hidden[1:]
    for s in range(spec.n_states):
        sel = states == s
        cnt = int(sel.sum())
        if cnt:
            observed[sel] = spec.emission.sample(theta, s, rng, size=cnt)
    return Trajectory(hidden=hidden, observed=observed, theta_used=theta, seed=int(seed))


def simulate_batch(spec: HmmSpec, theta, n: int, n_paths: int, rng) -> np.ndarray:
    """Vectorised observation paths, shape (n_paths, n).  Feeds the Monte Carlo
    estimators; uses its own draw order, so it does not reproduce `simulate`."""
    theta = spec.theta_space.require(theta)
    q = spec.transition_matrix(theta)
    cum_q = np.cumsum(q, axis=1)
    cum_init = np.cumsum(spec.initial_dist)
    x = np.searchsorted(cum_init, rng.random(n_paths), side="right")
    x = np.minimum(x, spec.n_states - 1)
    ys = np.empty((n_paths, n), dtype=float)
    for k in range(n):
        u = rng.random(n_paths)
        x = (u[:, None] > cum_q[x]).sum(axis=1)
        x = np.minimum(x, spec.n_states - 1)
        if spec.single_state:
            ys[:, k] = spec.emission.sample(theta, 0, rng, size=n_paths)
        else:
            for s in np.unique(x):
                sel = x == s
                ys[sel, k] = spec.emission.sample(theta, int(s), rng, size=int(sel.sum()))
    return ys


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------


def gaussian_location(sigma: float = 1.0, lower: float = -3.0, upper: float = 3.0) -> HmmSpec:
    """Single-state N(theta, sigma^2) observations, i.e. an i.i.d. location family."""
    sig = float(sigma)
    emission = GaussianPerState(
        mean_fn=lambda t: np.array([t[0]]),
        sd_fn=lambda t: np.array([sig]),
        dmean_fn=lambda t: np.array([[1.0]]),
        dsd_fn=lambda t: np.array([[0.0]]),
        d2mean_fn=lambda t: np.zeros((1, 1, 1)),
        d2sd_fn=lambda t: np.zeros((1, 1, 1)),
    )
    return HmmSpec(
        n_states=1,
        transition_builder=lambda t: np.array([[1.0]]),
        emission=emission,
        initial_dist=np.array([1.0]),
        theta_space=ParamSpace(np.array([lower]), np.array([upper])),
        dominating_measure=Lebesgue1D(),
        transition_grad=lambda t: np.zeros((1, 1, 1)),
        transition_hess=lambda t: np.zeros((1, 1, 1, 1)),
        family="gaussian_location",
        family_params={"sigma": sig, "lower": lower, "upper": upper},
    )


def gaussian_scale(lower: float = 0.3, upper: float = 3.0) -> HmmSpec:
    """Single-state N(0, theta) observations; theta is the variance."""
    emission = GaussianPerState(
        mean_fn=lambda t: np.array([0.0]),
        sd_fn=lambda t: np.array([np.sqrt(t[0])]),
        dmean_fn=lambda t: np.array([[0.0]]),
        dsd_fn=lambda t: np.array([[0.5 / np.sqrt(t[0])]]),
        d2mean_fn=lambda t: np.zeros((1, 1, 1)),
        d2sd_fn=lambda t: np.array([[[-0.25 * t[0] ** -1.5]]]),
    )
    return HmmSpec(
        n_states=1,
        transition_builder=lambda t: np.array([[1.0]]),
        emission=emission,
        initial_dist=np.array([1.0]),
        theta_space=ParamSpace(np.array([lower]), np.array([upper])),
        dominating_measure=Lebesgue1D(),
        transition_grad=lambda t: np.zeros((1, 1, 1)),
        transition_hess=lambda t: np.zeros((1, 1, 1, 1)),
        family="gaussian_scale",
        family_params={"lower": lower, "upper": upper},
    )


def _dyadic_atoms_masses(truncation: int):
    # atom 2^-(2k)   = 4^-k     carries mass  theta   * 3/4^(k+1)
    # atom 2^-(2k+1) = 4^-k / 2 carries mass (1-theta)* 3/4^(k+1)
    # all values are exact in binary floating point for truncation <= 25
    js = np.arange(2 * truncation - 1, -1, -1)  # descending j gives ascending atoms 2^-j
    atoms = 2.0 ** (-js.astype(float))
    ks = js // 2
    weights = 3.0 * 4.0 ** (-(ks + 1.0))
    is_coarse = (js % 2) == 0
    return atoms, weights, is_coarse


def dyadic_mixture(truncation: int = 20, lower: float = 0.25, upper: float = 0.75) -> HmmSpec:
    """I.i.d. mixture of two interleaved dyadic atom distributions.

    Component one lives on atoms 4^-k with mass 3/4^(k+1); component two on
    atoms 4^-k/2 with the same masses; theta is the weight on component one.
    The atom list is truncated at index ``truncation`` (K), leaving a tail of
    exactly 4^-K out of each component, which is declared as the family's
    mass tolerance rather than folded back into the probabilities.
    """
    K = int(truncation)
    atoms, w, is_coarse = _dyadic_atoms_masses(K)
    sign = np.where(is_coarse, 1.0, -1.0)

    def mass_fn(theta):
        th = theta[0]
        return (np.where(is_coarse, th, 1.0 - th) * w)[None, :]

    def dmass_fn(theta):
        return (sign * w)[None, :, None]

    def d2mass_fn(theta):
        return np.zeros((1, atoms.size, 1, 1))

    emission = DiscreteAtoms(atoms, mass_fn, dmass_fn, d2mass_fn, mass_tol=4.0 ** (-K))
    return HmmSpec(
        n_states=1,
        transition_builder=lambda t: np.array([[1.0]]),
        emission=emission,
        initial_dist=np.array([1.0]),
        theta_space=ParamSpace(np.array([lower]), np.array([upper])),
        dominating_measure=CountingAtoms(atoms),
        transition_grad=lambda t: np.zeros((1, 1, 1)),
        transition_hess=lambda t: np.zeros((1, 1, 1, 1)),
        family="dyadic",
        family_params={"truncation": K, "lower": lower, "upper": upper},
    )


def two_state_gaussian(sds=(1.0, 0.7)) -> HmmSpec:
    """Two-state chain with theta = (switch probability a, mean separation m).

    Transitions [[1-a, a], [a, 1-a]]; emissions N(-m, sds[0]) in state 0 and
    N(+m, sds[1]) in state 1, so both the kernel and the emissions carry
    theta-dependence (useful for exercising score/information identities).
    """
    s0, s1 = float(sds[0]), float(sds[1])
    emission = GaussianPerState(
        mean_fn=lambda t: np.array([-t[1], t[1]]),
        sd_fn=lambda t: np.array([s0, s1]),
        dmean_fn=lambda t: np.array([[0.0, -1.0], [0.0, 1.0]]),
        dsd_fn=lambda t: np.zeros((2, 2)),
        d2mean_fn=lambda t: np.zeros((2, 2, 2)),
        d2sd_fn=lambda t: np.zeros((2, 2, 2)),
    )

    def q_builder(t):
        a = t[0]
        return np.array([[1.0 - a, a], [a, 1.0 - a]])

    def q_grad(t):
        g = np.zeros((2, 2, 2))
        g[:, :, 0] = np.array([[-1.0, 1.0], [1.0, -1.0]])
        return g

    return HmmSpec(
        n_states=2,
        transition_builder=q_builder,
        emission=emission,
        initial_dist=np.array([0.5, 0.5]),
        theta_space=ParamSpace(np.array([0.05, 0.1]), np.array([0.95, 3.0])),
        dominating_measure=Lebesgue1D(),
        transition_grad=q_grad,
        transition_hess=lambda t: np.zeros((2, 2, 2, 2)),
        family="two_state_gaussian",
        family_params={"sds": (s0, s1)},
    )


def two_state_switch(means=(-1.0, 1.0), sds=(1.0, 1.0)) -> HmmSpec:
    """Two-state chain with a single parameter: the symmetric switch probability."""
    m0, m1 = float(means[0]), float(means[1])
    s0, s1 = float(sds[0]), float(sds[1])
    emission = GaussianPerState(
        mean_fn=lambda t: np.array([m0, m1]),
        sd_fn=lambda t: np.array([s0, s1]),
        dmean_fn=lambda t: np.zeros((2, 1)),
        dsd_fn=lambda t: np.zeros((2, 1)),
        d2mean_fn=lambda t: np.zeros((2, 1, 1)),
        d2sd_fn=lambda t: np.zeros((2, 1, 1)),
    )

    def q_builder(t):
        a = t[0]
        return np.array([[1.0 - a, a], [a, 1.0 - a]])

    def q_grad(t):
        g = np.zeros((2, 2, 1))
        g[:, :, 0] = np.array([[-1.0, 1.0], [1.0, -1.0]])
        return g

    return HmmSpec(
        n_states=2,
        transition_builder=q_builder,
        emission=emission,
        initial_dist=np.array([0.5, 0.5]),
        theta_space=ParamSpace(np.array([0.05]), np.array([0.95])),
        dominating_measure=Lebesgue1D(),
        transition_grad=q_grad,
        transition_hess=lambda t: np.zeros((2, 2, 1, 1)),
        family="two_state_switch",
        family_params={"means": (m0, m1), "sds": (s0, s1)},
    )


FAMILIES = {
    "gaussian_location": gaussian_location,
    "gaussian_scale": gaussian_scale,
    "dyadic": dyadic_mixture,
    "two_state_gaussian": two_state_gaussian,
    "two_state_switch": two_state_switch,
}


def make_spec(family: str, **params) -> HmmSpec:
    """Construct a built-in family by name; unknown names raise with the options."""
    try:
        ctor = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None
    return ctor(**params)
