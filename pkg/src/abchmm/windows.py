"""Windowed (tolerance-smoothed) emission densities and ball measures.

For tolerance ``epsilon > 0`` the windowed emission density is the average of
the base emission density over the closed interval ``[y - eps, y + eps]``
with respect to the dominating measure:

    g_eps(y | x) = (1 / nu(B_eps(y))) * integral over B_eps(y) of g(. | x) dnu

which is exactly the conditional density of the noise-perturbed observation
``Y + eps * Z`` (Z uniform on [-1, 1]) taken with respect to the similarly
smoothed dominating measure.  ``epsilon == 0`` delegates to the base family
everywhere, so the raw model is the zero-tolerance special case.

Evaluation strategy per base family:

* Gaussian bases use closed forms: the window integral is a CDF difference,
  and theta-gradients/Hessians reduce to truncated Gaussian moment integrals
  computed by a stable two-term recursion.
* Atomic bases sum the (finitely many) atom masses inside the ball exactly.
* Anything else integrates the density by adaptive Simpson (or a CDF
  difference when the base exposes one) and differentiates the window in
  theta by central differences, which also covers supports that move with
  theta.

Under counting measure a ball containing no atoms has ``nu(B) == 0`` and the
window density is undefined (0/0); that is a :class:`ZeroBallError` here, not
a zero, because silently returning 0 would corrupt likelihoods downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .models import (
    CountingAtoms,
    DiscreteAtoms,
    GaussianPerState,
    Lebesgue1D,
    MeasureDescriptor,
)
from .quadrature import adaptive_simpson

__all__ = [
    "QuadratureConfig",
    "BallMeasure",
    "WindowedEmission",
    "ZeroBallError",
    "ball_measure",
    "window_density",
    "window_density_grad",
    "perturb_sample",
]

_SQRT2PI = np.sqrt(2.0 * np.pi)


class ZeroBallError(ValueError):
    """Ball of positive radius contains no atoms of the counting measure."""


@dataclass(frozen=True)
class QuadratureConfig:
    method: str = "adaptive_simpson"
    abs_tol: float = 1e-10
    max_depth: int = 40


@dataclass(frozen=True)
class BallMeasure:
    center: float
    radius: float
    mass: float


def ball_measure(measure: MeasureDescriptor, y: float, epsilon: float) -> BallMeasure:
    """nu(B_eps(y)): interval length 2*eps under Lebesgue, atom count under counting."""
    if epsilon <= 0:
        raise ValueError("ball_measure requires epsilon > 0")
    if isinstance(measure, Lebesgue1D):
        mass = 2.0 * epsilon
    elif isinstance(measure, CountingAtoms):
        lo = np.searchsorted(measure.atoms, y - epsilon, side="left")
        hi = np.searchsorted(measure.atoms, y + epsilon, side="right")
        mass = float(hi - lo)
    else:
        raise TypeError(f"unsupported measure {measure!r}")
    return BallMeasure(center=float(y), radius=float(epsilon), mass=mass)


def perturb_sample(y, epsilon: float, seed: int, size=None):
    """Observation noise channel: y + eps * U with U uniform on [-1, 1].

    Deterministic given the seed; eps == 0 returns y unchanged (the rng is
    still advanced identically so call patterns stay seed-stable).
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=size)
    return y + epsilon * u


def _window_i0(m, s, a, b):
    """int_a^b phi_{m,s}(u) du via the numerically favourable tail of ndtr."""
    alpha = (a - m) / s
    beta = (b - m) / s
    mid_positive = (alpha + beta) > 0
    return np.where(mid_positive, ndtr(-alpha) - ndtr(-beta), ndtr(beta) - ndtr(alpha))


def _truncated_normal_moments(m, s, a, b):
    """Integrals I_p = int_a^b (u-m)^p phi_{m,s}(u) du for p = 0..4.

    Uses I_p = s^2 [ (p-1) I_{p-2} + (a-m)^{p-1} pdf(a) - (b-m)^{p-1} pdf(b) ]
    with the symmetric-tail form of I_0 for accuracy far from the mean.
    """
    alpha = (a - m) / s
    beta = (b - m) / s
    i0 = _window_i0(m, s, a, b)
    pdf_a = np.exp(-0.5 * alpha * alpha) / (_SQRT2PI * s)
    pdf_b = np.exp(-0.5 * beta * beta) / (_SQRT2PI * s)
    ta, tb = a - m, b - m
    s2 = s * s
    i1 = s2 * (pdf_a - pdf_b)
    i2 = s2 * (i0 + ta * pdf_a - tb * pdf_b)
    i3 = s2 * (2.0 * i1 + ta**2 * pdf_a - tb**2 * pdf_b)
    i4 = s2 * (3.0 * i2 + ta**3 * pdf_a - tb**3 * pdf_b)
    return i0, i1, i2, i3, i4


@dataclass
class WindowedEmission:
    """Emission family smoothed over eps-balls of the dominating measure."""

    base: object
    epsilon: float
    measure: MeasureDescriptor
    quadrature: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if isinstance(self.measure, CountingAtoms) and not isinstance(self.base, DiscreteAtoms):
            raise TypeError("counting measure requires an atomic emission family")

    # -- ball bookkeeping ---------------------------------------------------

    def ball_mass(self, y):
        """nu(B_eps(y)) for scalar or array y (requires epsilon > 0)."""
        if isinstance(self.measure, Lebesgue1D):
            return np.broadcast_to(2.0 * self.epsilon, np.shape(y)).astype(float) if np.ndim(y) else 2.0 * self.epsilon
        atoms = self.measure.atoms
        y = np.asarray(y, dtype=float)
        lo = np.searchsorted(atoms, y - self.epsilon, side="left")
        hi = np.searchsorted(atoms, y + self.epsilon, side="right")
        return (hi - lo).astype(float)

    def _atom_window(self, theta, x, y, order):
        """Ball sums of masses and their theta-derivatives for atomic bases."""
        atoms = self.base.atoms
        y = np.asarray(y, dtype=float)
        lo = np.searchsorted(atoms, y - self.epsilon, side="left")
        hi = np.searchsorted(atoms, y + self.epsilon, side="right")
        count = hi - lo
        if np.any(count == 0):
            bad = np.asarray(y)[count == 0]
            raise ZeroBallError(
                f"zero ball measure: no atoms within {self.epsilon} of y={bad.ravel()[0]}"
            )
        sums = []
        levels = [self.base.masses(theta)[x]]
        if order >= 1:
            levels.append(self.base.dmasses(theta)[x])
        if order >= 2:
            levels.append(self.base.d2masses(theta)[x])
        for lv in levels:
            cum = np.concatenate([np.zeros((1,) + lv.shape[1:]), np.cumsum(lv, axis=0)])
            sums.append(cum[hi] - cum[lo])
        return count, sums

    # -- density and theta-derivatives ---------------------------------------

    def density(self, theta, x, y):
        if self.epsilon == 0.0:
            return self.base.density(theta, x, y)
        if isinstance(self.base, DiscreteAtoms):
            count, (w,) = self._atom_window(theta, x, y, order=0)
            return w / count
        width = 2.0 * self.epsilon
        if isinstance(self.base, GaussianPerState):
            m, s = self.base.moments(theta)
            y = np.asarray(y, dtype=float)
            return _window_i0(m[x], s[x], y - self.epsilon, y + self.epsilon) / width
        if hasattr(self.base, "cdf"):
            y = np.asarray(y, dtype=float)
            return (self.base.cdf(theta, x, y + self.epsilon) - self.base.cdf(theta, x, y - self.epsilon)) / width
        q = self.quadrature

        def one(yv):
            return adaptive_simpson(
                lambda u: float(self.base.density(theta, x, u)),
                yv - self.epsilon,
                yv + self.epsilon,
                q.abs_tol,
                q.max_depth,
            ) / width

        if np.ndim(y) == 0:
            return one(float(y))
        return np.array([one(float(v)) for v in np.asarray(y, dtype=float)])

    def grad(self, theta, x, y):
        """Gradient in theta of the windowed density, shape y.shape + (d,)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.epsilon == 0.0:
            g = np.asarray(self.base.density(theta, x, y))
            return g[..., None] * self.base.score(theta, x, y)
        if isinstance(self.base, DiscreteAtoms):
            count, (_, dw) = self._atom_window(theta, x, y, order=1)
            return dw / np.asarray(count, dtype=float)[..., None]
        if isinstance(self.base, GaussianPerState):
            m, s = self.base.moments(theta)
            dm, ds = self.base.dmoments(theta)
            y = np.asarray(y, dtype=float)
            i0, i1, i2, _, _ = _truncated_normal_moments(m[x], s[x], y - self.epsilon, y + self.epsilon)
            sx = s[x]
            out = np.asarray(i1 / sx**2)[..., None] * dm[x] + np.asarray(i2 / sx**3 - i0 / sx)[..., None] * ds[x]
            return out / (2.0 * self.epsilon)
        return self._fd_grad(theta, x, y)

    def hess(self, theta, x, y):
        """Hessian in theta of the windowed density, shape y.shape + (d, d)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if self.epsilon == 0.0:
            g = np.asarray(self.base.density(theta, x, y))
            sc = self.base.score(theta, x, y)
            outer = sc[..., :, None] * sc[..., None, :]
            return g[..., None, None] * (self.base.log_hess(theta, x, y) + outer)
        if isinstance(self.base, DiscreteAtoms):
            count, (_, _, d2w) = self._atom_window(theta, x, y, order=2)
            return d2w / np.asarray(count, dtype=float)[..., None, None]
        if isinstance(self.base, GaussianPerState):
            m, s = self.base.moments(theta)
            dm, ds = self.base.dmoments(theta)
            d2m, d2s = self.base.d2moments(theta)
            sx = s[x]
            y = np.asarray(y, dtype=float)
            i0, i1, i2, i3, i4 = _truncated_normal_moments(m[x], sx, y - self.epsilon, y + self.epsilon)
            mm = np.outer(dm[x], dm[x])
            msym = np.outer(dm[x], ds[x]) + np.outer(ds[x], dm[x])
            ss = np.outer(ds[x], ds[x])
            c_mm = np.asarray(i2 / sx**4 - i0 / sx**2)[..., None, None]
            c_ms = np.asarray(i3 / sx**5 - 3.0 * i1 / sx**3)[..., None, None]
            c_ss = np.asarray(i4 / sx**6 - 5.0 * i2 / sx**4 + 2.0 * i0 / sx**2)[..., None, None]
            c_d2m = np.asarray(i1 / sx**2)[..., None, None]
            c_d2s = np.asarray(i2 / sx**3 - i0 / sx)[..., None, None]
            out = c_mm * mm + c_ms * msym + c_ss * ss + c_d2m * d2m[x] + c_d2s * d2s[x]
            return out / (2.0 * self.epsilon)
        return self._fd_hess(theta, x, y)

    def _fd_grad(self, theta, x, y, h_scale=1e-6):
        d = theta.shape[0]
        cols = []
        for c in range(d):
            h = h_scale * max(1.0, abs(theta[c]))
            tp, tm = theta.copy(), theta.copy()
            tp[c] += h
            tm[c] -= h
            cols.append((np.asarray(self.density(tp, x, y)) - np.asarray(self.density(tm, x, y))) / (2 * h))
        return np.stack(cols, axis=-1)

    def _fd_hess(self, theta, x, y, h_scale=1e-4):
        d = theta.shape[0]
        cols = []
        for c in range(d):
            h = h_scale * max(1.0, abs(theta[c]))
            tp, tm = theta.copy(), theta.copy()
            tp[c] += h
            tm[c] -= h
            cols.append((np.asarray(self.grad(tp, x, y)) - np.asarray(self.grad(tm, x, y))) / (2 * h))
        return np.stack(cols, axis=-1)

    # -- log-domain helpers used by the inference recursions -----------------

    def dlog(self, theta, x, y):
        g = np.asarray(self.density(theta, x, y))
        return self.grad(theta, x, y) / g[..., None]

    def d2log(self, theta, x, y):
        g = np.asarray(self.density(theta, x, y))
        dl = self.grad(theta, x, y) / g[..., None]
        return self.hess(theta, x, y) / g[..., None, None] - dl[..., :, None] * dl[..., None, :]

    def support(self, theta):
        lo, hi = self.base.support(theta)
        return lo - self.epsilon, hi + self.epsilon


def window_density(w: WindowedEmission, theta, x: int, y):
    """Windowed emission density g_eps(y | x)."""
    return w.density(np.atleast_1d(np.asarray(theta, dtype=float)), x, y)


def window_density_grad(w: WindowedEmission, theta, x: int, y):
    """Gradient in theta of the windowed emission density."""
    return w.grad(np.atleast_1d(np.asarray(theta, dtype=float)), x, y)
