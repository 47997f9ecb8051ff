"""Shared numerical plumbing: finite-difference weights, Lagrange
interpolation, deterministic reductions, worker-count control, errors."""
from __future__ import annotations

import os
from fractions import Fraction
from functools import lru_cache

import numpy as np


# === errors ===

class FoliationError(Exception):
    """Base class for structured errors raised by this package."""


class StencilRangeError(FoliationError):
    """A centered stencil would leave the stored history or grid."""


class SliceCoverageError(FoliationError):
    """A hyperboloidal slice is not fully covered by the stored levels."""

    def __init__(self, msg, needed=None, available=None):
        super().__init__(msg)
        self.needed = needed
        self.available = available


class StabilityError(FoliationError):
    """Blow-up, CFL violation or hyperbolicity loss during evolution.

    Carries a structured report (kind, t, step, location, value).
    """

    def __init__(self, detail, report=None):
        report = dict(report or {})
        bits = [detail]
        if report:
            bits.append("(" + ", ".join(f"{k}={v:.6g}" if isinstance(v, float)
                                        else f"{k}={v}"
                                        for k, v in report.items()) + ")")
        super().__init__(" ".join(bits))
        self.report = report


class ConfigError(FoliationError):
    """Config parse/validation failure with line and field context."""

    def __init__(self, msg, line=None, field=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + msg)
        self.line = line
        self.field = field


# === finite-difference weights ===

def _exact_solve(A, b):
    # Gaussian elimination over Fractions; stencil systems are tiny.
    n = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for col in range(n):
        piv = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        inv = Fraction(1, 1) / M[col][col]
        M[col] = [x * inv for x in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [x - f * y for x, y in zip(M[r], M[col])]
    return [M[i][n] for i in range(n)]


@lru_cache(maxsize=None)
def fd_weights(order: int, offsets: tuple) -> np.ndarray:
    """Exact finite-difference weights for d^order/dx^order on integer
    `offsets` at unit spacing.  Divide by h**order for spacing h.

    Solves the Vandermonde moment system in rational arithmetic, so the
    returned float weights are correctly rounded.
    """
    n = len(offsets)
    if order >= n:
        raise StencilRangeError(
            f"{n}-point stencil cannot produce derivative order {order}")
    A = [[Fraction(p) ** j for p in offsets] for j in range(n)]
    b = [Fraction(0)] * n
    fact = 1
    for k in range(2, order + 1):
        fact *= k
    b[order] = Fraction(fact)
    w = _exact_solve(A, b)
    return np.array([float(x) for x in w])


def central_offsets(order: int) -> tuple:
    """Symmetric offsets giving second-order accuracy for `order`."""
    if order == 0:
        return (0,)
    q = (order + 1) // 2
    return tuple(range(-q, q + 1))


def central_weights(order: int) -> np.ndarray:
    return fd_weights(order, central_offsets(order))


# === Lagrange interpolation on uniform nodes ===

@lru_cache(maxsize=None)
def _basis_coeffs(offsets: tuple) -> np.ndarray:
    """Polynomial coefficients (ascending) of each Lagrange basis
    function on the given nodes, exact rationals rounded to float."""
    n = len(offsets)
    C = np.zeros((n, n))
    for k in range(n):
        poly = [Fraction(1)]
        denom = Fraction(1)
        for j in range(n):
            if j == k:
                continue
            # multiply poly by (x - offsets[j])
            new = [Fraction(0)] * (len(poly) + 1)
            for d, c in enumerate(poly):
                new[d] -= c * offsets[j]
                new[d + 1] += c
            poly = new
            denom *= Fraction(offsets[k] - offsets[j])
        for d, c in enumerate(poly):
            C[k, d] = float(c / denom)
    return C


# node pattern relative to the base index; query offset lies in [0, 1)
INTERP_OFFSETS = {4: (-1, 0, 1, 2), 6: (-2, -1, 0, 1, 2, 3),
                  10: tuple(range(-4, 6))}


def lagrange_weights(frac, npts: int = 6, deriv: int = 0) -> np.ndarray:
    """Interpolation (or interpolant-derivative) weights on `npts`
    uniform nodes for query offsets `frac` relative to the base node.

    Centered use keeps frac in [0, 1); any position covered by the
    window is valid, which is what one-sided windows at a boundary use.
    Returns shape (len(frac), npts); multiply by h**-deriv for spacing h.
    """
    offs = INTERP_OFFSETS[npts]
    C = _basis_coeffs(offs)
    if deriv:
        D = np.zeros_like(C)
        for d in range(deriv, npts):
            fall = 1.0
            for j in range(deriv):
                fall *= d - j
            D[:, d - deriv] = C[:, d] * fall
        C = D
    frac = np.asarray(frac, dtype=float)
    powers = frac[..., None] ** np.arange(npts)
    return powers @ C.T


# === smooth cutoffs ===

def smoothstep(x):
    """C^2 ramp: 0 for x<=0, 1 for x>=1, quintic in between."""
    y = np.clip(x, 0.0, 1.0)
    return y * y * y * (y * (6.0 * y - 15.0) + 10.0)


def smoothstep_d(x):
    """Derivative of :func:`smoothstep` with respect to x."""
    y = np.clip(x, 0.0, 1.0)
    return 30.0 * y * y * (y - 1.0) * (y - 1.0)


# === reductions ===

def reduce_sum(values, mode: str = "sequential") -> float:
    """Sum with a reproducible reduction order.

    'sequential' runs strictly left to right; 'tree' uses pairwise
    summation.  The two may differ by O(1e-16) relative rounding.
    """
    a = np.asarray(values, dtype=float).ravel()
    if a.size == 0:
        return 0.0
    if mode == "sequential":
        return float(np.cumsum(a)[-1])
    if mode == "tree":
        return float(np.sum(a))
    raise ValueError(f"unknown reduction mode {mode!r}")


def trapezoid_weights(x) -> np.ndarray:
    """Trapezoid quadrature weights for (possibly nonuniform) nodes."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return np.zeros_like(x)
    w = np.zeros_like(x)
    d = np.diff(x)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def worker_count() -> int:
    """Worker cap for data-parallel loops; HFOIL_THREADS overrides."""
    env = os.environ.get("HFOIL_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as e:
            raise ConfigError(f"HFOIL_THREADS must be an integer, got {env!r}") from e
        return max(1, n)
    return max(1, min(4, os.cpu_count() or 1))
