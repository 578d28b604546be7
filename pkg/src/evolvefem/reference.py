"""Lagrange bases and quadrature on the unit reference triangle.

The reference element is the triangle with vertices (0,0), (1,0), (0,1).
Nodes of the degree-2 element are ordered as the three vertices followed by
the three edge midpoints, where midpoint ``3 + i`` sits on the edge opposite
vertex ``i``.

Quadrature rules are symmetric positive-weight rules; weights sum to the
reference-triangle area 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

SUPPORTED_DEGREES = (1, 2)


def reference_nodes(degree: int) -> np.ndarray:
    """Nodal points of the degree-1 or degree-2 Lagrange element, shape (n_loc, 2)."""
    if degree == 1:
        return np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    if degree == 2:
        return np.array(
            [
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
                [0.5, 0.5],  # opposite vertex 0
                [0.0, 0.5],  # opposite vertex 1
                [0.5, 0.0],  # opposite vertex 2
            ]
        )
    raise ValueError(f"unsupported element degree {degree}; expected one of {SUPPORTED_DEGREES}")


def num_local_nodes(degree: int) -> int:
    return reference_nodes(degree).shape[0]


def reference_basis(degree: int, points) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the Lagrange basis at reference points.

    Parameters
    ----------
    degree : int
        Polynomial degree, 1 or 2.
    points : array_like
        Reference coordinates, shape (..., 2).

    Returns
    -------
    values : ndarray, shape (..., n_loc)
    gradients : ndarray, shape (..., n_loc, 2)
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError("reference points must have a trailing dimension of 2")
    r = pts[..., 0]
    s = pts[..., 1]
    one = np.ones_like(r)
    zero = np.zeros_like(r)
    lam = (1.0 - r - s, r, s)
    dlam = ((-one, -one), (one, zero), (zero, one))

    if degree == 1:
        values = np.stack(lam, axis=-1)
        grads = np.stack([np.stack(d, axis=-1) for d in dlam], axis=-2)
        return values, grads

    if degree == 2:
        values = []
        grads = []
        for i in range(3):
            li, dli = lam[i], dlam[i]
            values.append(li * (2.0 * li - 1.0))
            grads.append(np.stack([(4.0 * li - 1.0) * g for g in dli], axis=-1))
        # edge node opposite vertex i is supported on lam[i+1], lam[i+2]
        for i in range(3):
            la, dla = lam[(i + 1) % 3], dlam[(i + 1) % 3]
            lb, dlb = lam[(i + 2) % 3], dlam[(i + 2) % 3]
            values.append(4.0 * la * lb)
            grads.append(np.stack([4.0 * (la * gb + lb * ga) for ga, gb in zip(dla, dlb)], axis=-1))
        return np.stack(values, axis=-1), np.stack(grads, axis=-2)

    raise ValueError(f"unsupported element degree {degree}; expected one of {SUPPORTED_DEGREES}")


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature rule on the reference triangle.

    Attributes
    ----------
    points : ndarray, shape (n_q, 2)
    weights : ndarray, shape (n_q,), positive, summing to 1/2
    degree : int
        Total polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _orbit1(w):
    # centroid
    return [((1.0 / 3.0, 1.0 / 3.0), w)]


def _orbit3(a, w):
    # permutations of barycentric (a, a, 1-2a)
    b = 1.0 - 2.0 * a
    return [((a, a), w), ((b, a), w), ((a, b), w)]


def _orbit6(a, b, w):
    c = 1.0 - a - b
    return [((a, b), w), ((b, a), w), ((a, c), w), ((c, a), w), ((b, c), w), ((c, b), w)]


def _build(entries):
    pts = np.array([p for p, _ in entries])
    # table weights are normalized to sum 1; scale to the triangle area 1/2
    wts = 0.5 * np.array([w for _, w in entries])
    return pts, wts


_SQRT15 = np.sqrt(15.0)

# Symmetric positive-weight rules (degree -> orbits).  The degree-3 and
# degree-7 members of the classical family contain negative weights, so
# requests for those degrees fall through to the next rule up.
_RULES: dict[int, list] = {
    1: _orbit1(1.0),
    2: _orbit3(1.0 / 6.0, 1.0 / 3.0),
    4: _orbit3(0.445948490915965, 0.223381589678011)
    + _orbit3(0.091576213509771, 0.109951743655322),
    5: _orbit1(9.0 / 40.0)
    + _orbit3((6.0 + _SQRT15) / 21.0, (155.0 + _SQRT15) / 1200.0)
    + _orbit3((6.0 - _SQRT15) / 21.0, (155.0 - _SQRT15) / 1200.0),
    6: _orbit3(0.249286745170910, 0.116786275726379)
    + _orbit3(0.063089014491502, 0.050844906370207)
    + _orbit6(0.310352451033785, 0.053145049844816, 0.082851075618374),
    8: _orbit1(0.14431560767773774)
    + _orbit3(0.45929258829268804, 0.09509163426731752)
    + _orbit3(0.17056930775171852, 0.10321737053472897)
    + _orbit3(0.05054722831703218, 0.03245849762320302)
    + _orbit6(0.2631128296347633, 0.008394777409900899, 0.02723031417441896),
}


def _conical_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Conical-product Gauss rule, exact to any requested total degree.

    Maps a tensor Gauss-Jacobi x Gauss-Legendre grid on the unit square to the
    triangle via (u, v) -> (u, v(1-u)).  Not symmetric, but positive and exact
    to degree 2n-1; used only beyond the tabulated symmetric rules.
    """
    n = degree // 2 + 1
    # Gauss-Jacobi with weight (1-u) on [-1,1], shifted to [0,1]
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    uj = 0.5 * (xj + 1.0)
    wj = wj / 8.0  # (1/2)^2 from the interval map, (1/2) from the weight (1-u)
    xl, wl = roots_legendre(n)
    vl = 0.5 * (xl + 1.0)
    wl = 0.5 * wl
    u, v = np.meshgrid(uj, vl, indexing="ij")
    w = np.outer(wj, wl)
    pts = np.column_stack([u.ravel(), (v * (1.0 - u)).ravel()])
    return pts, 2.0 * w.ravel()


def quadrature_rule(exactness_degree: int) -> QuadratureRule:
    """Return a positive-weight rule exact for total degree >= the request.

    Falls back to the next tabulated symmetric rule above the requested
    degree, and to a conical-product Gauss rule beyond the tables.
    """
    if exactness_degree < 1:
        exactness_degree = 1
    for deg in sorted(_RULES):
        if deg >= exactness_degree:
            pts, wts = _build(_RULES[deg])
            return QuadratureRule(points=pts, weights=wts, degree=deg)
    pts, wts = _conical_rule(exactness_degree)
    return QuadratureRule(points=pts, weights=wts, degree=exactness_degree)
