"""Adaptive Simpson integration for smooth 1-d integrands.

Window integrals and pseudo-true-parameter expectations are all smooth
one-dimensional integrals, so a small adaptive Simpson rule with Richardson
extrapolation is cheap and accurate; nothing here keeps global state.
"""

from __future__ import annotations


def adaptive_simpson(f, a: float, b: float, abs_tol: float = 1e-10, max_depth: int = 40) -> float:
    """Integrate f over [a, b] to absolute tolerance abs_tol."""
    if a == b:
        return 0.0
    if a > b:
        return -adaptive_simpson(f, b, a, abs_tol, max_depth)
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_rec(f, a, b, fa, fm, fb, whole, abs_tol, max_depth)


def _simpson_rec(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = (left + right - whole) / 15.0
    if depth <= 0 or abs(err) <= tol:
        return left + right + err
    return _simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + _simpson_rec(
        f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1
    )
