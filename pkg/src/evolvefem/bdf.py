"""Backward differentiation formulas and their stability certificates.

Coefficients come from the generating polynomials

    delta(zeta) = sum_{l=1}^p (1 - zeta)^l / l,
    gamma(zeta) = (1 - (1 - zeta)^p) / zeta,

computed in exact rational arithmetic and emitted as doubles.  The stability
helpers check the classical criteria: the root condition on delta, positivity
of Re delta(zeta)/(1 - eta zeta) on the unit disk for a multiplier eta, and
the existence of a positive definite matrix G turning the multiplied form
into a telescoping inequality.
"""

from __future__ import annotations

from fractions import Fraction
from math import comb

import numpy as np

from .errors import ConfigError

#: multipliers eta(p) for which Re delta(zeta)/(1 - eta zeta) > 0 on the unit
#: disk, for p = 1..5 (no admissible multiplier exists for p >= 6)
MULTIPLIER_TABLE = {1: 0.0, 2: 0.0, 3: 0.0836, 4: 0.2878, 5: 0.8160}

#: sampling grid of the open unit disk used by multiplier_check
_RADII = np.linspace(0.01, 0.999, 100)
_ANGLES = np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)


def bdf_delta_fractions(p: int) -> list[Fraction]:
    """Coefficients of delta(zeta) in ascending powers, as exact rationals."""
    if p < 1:
        raise ConfigError(f"BDF order must be >= 1, got {p}")
    coeffs = [Fraction(0)] * (p + 1)
    for l in range(1, p + 1):
        for m in range(l + 1):
            coeffs[m] += Fraction(comb(l, m) * (-1) ** m, l)
    return coeffs


def bdf_gamma_fractions(p: int) -> list[Fraction]:
    """Coefficients of gamma(zeta) in ascending powers, as exact rationals."""
    if p < 1:
        raise ConfigError(f"BDF order must be >= 1, got {p}")
    # 1 - (1 - zeta)^p = -sum_{m>=1} C(p, m) (-zeta)^m; dividing by zeta
    # shifts the exponents down by one
    return [Fraction(comb(p, m + 1) * (-1) ** m) for m in range(p)]


def bdf_delta(p: int) -> np.ndarray:
    """delta coefficients (delta_0, ..., delta_p) as doubles."""
    return np.array([float(c) for c in bdf_delta_fractions(p)])


def bdf_gamma(p: int) -> np.ndarray:
    """gamma coefficients (gamma_0, ..., gamma_{p-1}) as doubles."""
    return np.array([float(c) for c in bdf_gamma_fractions(p)])


def extrapolate(history, gamma: np.ndarray | None = None):
    """Combine the p most recent states, newest first, with the gamma weights.

    ``history[j]`` holds the state at time t_{n-1-j}; the result approximates
    the state at t_n to order p.
    """
    history = list(history)
    if not history:
        raise ValueError("extrapolation needs at least one past state")
    if gamma is None:
        gamma = bdf_gamma(len(history))
    if len(gamma) != len(history):
        raise ValueError(f"{len(gamma)} weights for {len(history)} states")
    out = gamma[0] * np.asarray(history[0], dtype=float)
    for g, h in zip(gamma[1:], history[1:]):
        out += g * np.asarray(h, dtype=float)
    return out


def zero_stability_check(p: int, tol: float = 1e-9) -> bool:
    """Root condition: all zeros of delta lie outside the closed unit disk
    except for the simple zero at zeta = 1."""
    coeffs = bdf_delta(p)
    roots = np.roots(coeffs[::-1])
    at_one = np.abs(roots - 1.0) <= tol
    if np.count_nonzero(at_one) != 1:
        return False
    return bool(np.all(np.abs(roots[~at_one]) > 1.0 + tol))


def multiplier_check(p: int, eta: float) -> bool:
    """True when Re delta(zeta)/(1 - eta zeta) > 0 on a fixed grid of |zeta|<1.

    The grid (100 radii from 0.01 to 0.999 times 720 angles) is deterministic
    so results are reproducible across runs.
    """
    if not 0.0 <= eta < 1.0:
        raise ConfigError(f"multiplier must satisfy 0 <= eta < 1, got {eta}")
    coeffs = bdf_delta(p)
    z = _RADII[:, None] * np.exp(1j * _ANGLES[None, :])
    delta_values = np.polyval(coeffs[::-1], z)
    # sign of Re[delta / (1 - eta z)] equals the sign of Re[delta * conj(1 - eta z)]
    signs = np.real(delta_values * np.conj(1.0 - eta * z))
    return bool(np.all(signs > 0.0))


def _laurent_product_coeffs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Coefficients of zeta^p [a(zeta) b(1/zeta) + b(zeta) a(1/zeta)], ascending."""
    return np.convolve(a, b[::-1]) + np.convolve(b, a[::-1])


def _symbol_fractions(p: int, eta: float) -> list[Fraction]:
    """Exact ascending coefficients of the positivity symbol

    zeta^p [delta(zeta) mu(1/zeta) + mu(zeta) delta(1/zeta)],  mu(zeta) = 1 - eta zeta.
    """
    a = bdf_delta_fractions(p)
    b = [Fraction(1), Fraction(-eta)] + [Fraction(0)] * (p - 1)
    out = [Fraction(0)] * (2 * p + 1)
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            prod = ai * bj
            out[i + p - j] += prod
            out[p - i + j] += prod
    return out


def _deflate_root_one(coeffs: list[Fraction]) -> tuple[list[Fraction], Fraction]:
    """Divide an ascending-coefficient polynomial by (zeta - 1) exactly.

    Returns the ascending quotient coefficients and the remainder (the value
    at zeta = 1).
    """
    desc = coeffs[::-1]
    horner = [desc[0]]
    for c in desc[1:]:
        horner.append(c + horner[-1])
    return horner[:-1][::-1], horner[-1]


def dahlquist_g_matrix(p: int, eta: float, residual_tol: float = 1e-7) -> np.ndarray:
    """Construct G with A(w) B(w) - Phi(w)^2 = |W_1|_G^2 - |W_0|_G^2.

    Here A and B combine the last p+1 states with the delta and multiplier
    weights, and Phi comes from a spectral factorization of the nonnegative
    symbol delta(zeta)(1 - eta/zeta) + delta(1/zeta)(1 - eta zeta) on the unit
    circle.  Requires the multiplier condition to hold; raises
    :class:`ConfigError` otherwise and :class:`ArithmeticError` when the
    factorization fails validation.
    """
    if not multiplier_check(p, eta):
        raise ConfigError(f"no positivity certificate for order {p} with multiplier {eta}")
    a = bdf_delta(p)
    b = np.zeros(p + 1)
    b[0], b[1] = 1.0, -eta

    # delta(1) = 0 exactly, so the symbol has a root of even order at zeta = 1.
    # Peel that factor off in rational arithmetic first: a clustered circle
    # root would otherwise limit the eigenvalue-based root finder to a few
    # correct digits and poison the factorization.
    symbol_frac = _symbol_fractions(p, eta)
    reduced_frac, mult = symbol_frac, 0
    while True:
        quotient, remainder = _deflate_root_one(reduced_frac)
        if remainder != 0:
            break
        reduced_frac, mult = quotient, mult + 1
    if mult % 2:
        raise ArithmeticError("odd-order tangency at zeta = 1; symbol is not a square on the circle")
    symbol = np.array([float(c) for c in symbol_frac])  # degree 2p, ascending, palindromic
    reduced = np.array([float(c) for c in reduced_frac])
    if reduced.size > 1:
        roots = np.roots(reduced[::-1])
        # self-reciprocal polynomial: roots pair as (rho, 1/rho); keep the outer half
        outer = roots[np.argsort(np.abs(roots))[reduced.size // 2:]]
        monic = np.atleast_1d(np.poly(outer).real)[::-1]  # ascending
    else:
        monic = np.ones(1)
    for _ in range(mult // 2):
        monic = np.convolve(monic, np.array([-1.0, 1.0]))  # restore (zeta - 1) factors
    # zeta^p c(zeta) c(1/zeta) has coefficients conv(c, reversed c)
    recon = np.convolve(monic, monic[::-1])
    kappa_sq = float(symbol @ recon) / float(recon @ recon)
    if kappa_sq <= 0.0:
        raise ArithmeticError("spectral factorization produced a non-positive scale")
    c = np.sqrt(kappa_sq) * monic
    scale = np.abs(symbol).max()
    if np.abs(np.convolve(c, c[::-1]) - symbol).max() > residual_tol * scale:
        raise ArithmeticError("spectral factorization failed to reproduce the symbol")

    alpha, beta, phi = a[::-1], b[::-1], c[::-1] / np.sqrt(2.0)
    d_form = 0.5 * (np.outer(alpha, beta) + np.outer(beta, alpha)) - np.outer(phi, phi)
    # telescoping requires every diagonal sum of the form to vanish
    diag_sums = [d_form.diagonal(m).sum() for m in range(-p, p + 1)]
    if np.abs(diag_sums).max() > residual_tol * scale:
        raise ArithmeticError("factorized form does not telescope")

    g = np.zeros((p, p))
    for i in range(1, p + 1):
        for j in range(1, p + 1):
            steps = p - max(i, j) + 1
            g[i - 1, j - 1] = sum(d_form[i + m, j + m] for m in range(steps))
    return 0.5 * (g + g.T)


def g_matrix_exists_check(p: int, eta: float, trials: int = 100_000, seed: int = 0) -> bool:
    """Numerically certify the telescoping energy inequality for (p, eta).

    Builds the candidate G and verifies, over random state sequences, that

        (sum_i delta_i w_{p-i}) (sum_i mu_i w_{p-i}) >= |W_p|_G^2 - |W_{p-1}|_G^2

    with mu(zeta) = 1 - eta zeta.  Returns False when no admissible G exists
    (failed multiplier condition or a non-positive G).
    """
    try:
        g = dahlquist_g_matrix(p, eta)
    except (ConfigError, ArithmeticError):
        return False
    if np.linalg.eigvalsh(g)[0] <= 0.0:
        return False
    a = bdf_delta(p)
    b = np.zeros(p + 1)
    b[0], b[1] = 1.0, -eta
    alpha, beta = a[::-1], b[::-1]
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((trials, p + 1))
    lhs = (w @ alpha) * (w @ beta)
    newest = np.einsum("ti,ij,tj->t", w[:, 1:], g, w[:, 1:])
    oldest = np.einsum("ti,ij,tj->t", w[:, :-1], g, w[:, :-1])
    slack = lhs - (newest - oldest)
    return bool(np.all(slack >= -1e-10 * np.maximum(1.0, np.abs(lhs))))
