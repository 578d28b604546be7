"""Manufactured solutions on an expanding sphere and convergence bookkeeping.

The exact surface is X(q, t) = r(t) q with q on the unit sphere and r the
logistic radius

    r(t) = r0 r1 / (r0 (1 - e^{-t}) + r1 e^{-t}),

which satisfies rdot = (1 - r/r1) r with r(0) = r0 and r -> r1.  The exact
velocity is v = c(t) x with c = rdot/r.  Every forcing below is derived by
inserting this solution into the strong equations on a sphere of radius r,
where the unit normal is x/r, the mean curvature is 2/r, and
Delta_Gamma x = -2 x / r^2.  The derivations are guarded by weak-form
residual oracles (:func:`weak_residual`) so a sign or convention slip is
caught mechanically rather than by eye.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .fem import (
    BlockOperator,
    KOperator,
    assemble_mass_stiffness,
    assemble_normal_rhs,
    assemble_scalar_rhs,
    dual_norm_of_residual,
    norm_K,
    norm_M,
)
from .mesh import SurfaceMesh, as_points, as_vector

#: coupling strength of the scalar field in the coupled position forcing
KAPPA = 1.0

#: tolerance for the on-surface precondition of exact_velocity
SURFACE_TOL = 1e-8

#: time-step width of the central differences in the dynamic/coupled residuals
FD_EPSILON = 1e-5


@dataclass(frozen=True)
class ManufacturedSolution:
    """Expanding-sphere problem data: radii and PDE parameters."""

    r0: float = 1.0
    r1: float = 2.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.r0 <= self.r1:
            raise ValueError(f"radii must satisfy 0 < r0 <= r1, got {self.r0}, {self.r1}")


def logistic_radius(t, r0: float = 1.0, r1: float = 2.0):
    """Radius r(t) of the expanding sphere and its derivative rdot(t).

    Closed form of the logistic growth rdot = (1 - r/r1) r, r(0) = r0; the
    radius increases monotonically from r0 toward the carrying radius r1.
    """
    scalar = np.ndim(t) == 0
    t = np.asarray(t, dtype=float)
    decay = np.exp(-t)
    r = r0 * r1 / (r0 * (1.0 - decay) + r1 * decay)
    rdot = (1.0 - r / r1) * r
    if scalar:
        return float(r), float(rdot)
    return r, rdot


def exact_velocity(x, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Velocity c(t) x of surface points, with c = rdot/r.

    ``x`` must lie on the exact sphere of radius r(t) (tolerance 1e-8); use
    the forcing functions, which are plain functions of time, when evaluating
    on extrapolated or discrete surfaces.
    """
    r, rdot = logistic_radius(t, ms.r0, ms.r1)
    x = np.asarray(x, dtype=float)
    radii = np.sqrt(np.sum(x * x, axis=-1))
    if np.abs(radii - r).max() > SURFACE_TOL * max(r, 1.0):
        raise ValueError(f"points are not on the sphere of radius {r:.6g}")
    return (rdot / r) * x


def forcing_regularized(points, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Normal forcing g driving the regularized law along the expanding sphere.

    From v - alpha Delta_Gamma v + beta H nu = g nu with v = c x:
    g = c r + 2 alpha c / r + 2 beta / r.  The value is constant over the
    sphere, so off-surface quadrature points of extrapolated surfaces are
    accepted as-is.
    """
    r, rdot = logistic_radius(t, ms.r0, ms.r1)
    c = rdot / r
    g = c * r + 2.0 * ms.alpha * c / r + 2.0 * ms.beta / r
    return np.full(np.asarray(points).shape[:-1], g)


def forcing_dynamic(points, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Normal forcing g for the material-derivative law.

    From del* v + v div_Gamma v - alpha Delta_Gamma v = g nu with v = c x:
    del* v = (cdot + c^2) x, div_Gamma v = 2c, Delta_Gamma v = -2 c x / r^2,
    hence g = (cdot + 3 c^2) r + 2 alpha c / r with cdot = -rdot / r1.
    """
    r, rdot = logistic_radius(t, ms.r0, ms.r1)
    c = rdot / r
    cdot = -rdot / ms.r1
    g = (cdot + 3.0 * c * c) * r + 2.0 * ms.alpha * c / r
    return np.full(np.asarray(points).shape[:-1], g)


def coupled_solution(points, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Scalar field u(x, t) = e^{-t} x_1 x_2 / r(t)^2 transported by the flow.

    Along trajectories x(t) = r(t) q the field equals e^{-t} q_1 q_2, so its
    material derivative is exactly -u.
    """
    r, _ = logistic_radius(t, ms.r0, ms.r1)
    pts = np.asarray(points, dtype=float)
    return np.exp(-t) * pts[..., 0] * pts[..., 1] / r**2


def coupled_manufactured(ms: ManufacturedSolution):
    """Exact scalar field with matching forcings (u_exact, f, g).

    u solves the transport-diffusion equation del* u + u div_Gamma v
    - Delta_Gamma u = f on the expanding sphere: with del* u = -u,
    div_Gamma v = 2c and Delta_Gamma u = -6 u / r^2 (a degree-2 spherical
    harmonic) the data is f = (-1 + 2c + 6/r^2) u.  The position forcing g
    couples back to the computed field as g = g_regularized + kappa (u -
    u_exact), so the exact trajectory is the same expanding sphere while the
    discrete position solve still depends on the discrete u.

    f and g are returned in the stepper calling convention
    ``fn(u, grad_u, points, t)``; f ignores the discrete field and evaluates
    the manufactured data at the quadrature points.
    """

    def u_exact(points, t):
        return coupled_solution(points, t, ms)

    def f(u, grad_u, points, t):
        r, rdot = logistic_radius(t, ms.r0, ms.r1)
        c = rdot / r
        return (-1.0 + 2.0 * c + 6.0 / r**2) * coupled_solution(points, t, ms)

    def g(u, grad_u, points, t):
        return forcing_regularized(points, t, ms) + KAPPA * (u - coupled_solution(points, t, ms))

    return u_exact, f, g


def exact_positions(mesh: SurfaceMesh, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Exact nodal positions r(t) q, as (N, 3) points.

    The mesh supplies the unit-sphere reference nodes q (its stored positions
    are normalized, so any mesh of the sphere family works regardless of the
    radius it currently has).
    """
    q = as_points(mesh.positions)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r, _ = logistic_radius(t, ms.r0, ms.r1)
    return r * q


def exact_position_vector(mesh: SurfaceMesh, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Exact nodal positions as a component-major vector in R^(3N)."""
    return as_vector(exact_positions(mesh, t, ms))


def exact_velocity_vector(mesh: SurfaceMesh, t: float, ms: ManufacturedSolution) -> np.ndarray:
    """Exact nodal velocities c(t) r(t) q as a component-major vector."""
    r, rdot = logistic_radius(t, ms.r0, ms.r1)
    return (rdot / r) * exact_position_vector(mesh, t, ms)


def error_norms(numeric, exact_nodes, mesh: SurfaceMesh, positions=None):
    """L2 and H1 distances between a computed nodal field and exact values.

    Norms are those of the mass and stiffness matrices assembled at
    ``positions``; by default the comparison vector itself is taken to be the
    exact nodal positions, the natural choice when measuring position errors.
    Pass ``positions`` explicitly when measuring scalar or velocity errors.
    Returns (L2, H1) with H1^2 = L2^2 + |.|_A^2.
    """
    numeric = np.asarray(numeric, dtype=float)
    exact = np.asarray(exact_nodes, dtype=float)
    if numeric.shape != exact.shape:
        raise ValueError(f"shape mismatch: {numeric.shape} vs {exact.shape}")
    pos_vec = np.asarray(exact_nodes if positions is None else positions, dtype=float)
    mass, stiffness = assemble_mass_stiffness(mesh, pos_vec)
    diff = numeric - exact
    l2 = norm_M(mass, diff)
    h1 = norm_K(mass, stiffness, 1.0, diff)
    return l2, h1


def surface_area(mesh: SurfaceMesh, positions=None) -> float:
    """Total area 1^T M(x) 1 of the discrete surface."""
    pos_vec = mesh.positions if positions is None else np.asarray(positions, dtype=float)
    mass, _ = assemble_mass_stiffness(mesh, pos_vec)
    ones = np.ones(mesh.num_nodes)
    return float(ones @ (mass @ ones))


@dataclass(frozen=True)
class ConvergenceTable:
    """Rows of (parameter, L2, H1) errors with experimental orders.

    EOC entry i compares rows i-1 and i:
    log(e_{i-1}/e_i) / log(param_{i-1}/param_i); the first row carries NaN.
    """

    params: tuple
    l2: tuple
    h1: tuple
    eoc_l2: tuple
    eoc_h1: tuple

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("param,L2,H1,EOC_L2,EOC_H1\n")
        for row in zip(self.params, self.l2, self.h1, self.eoc_l2, self.eoc_h1):
            out.write(",".join(_csv_number(v) for v in row) + "\n")
        return out.getvalue()


def _csv_number(value: float) -> str:
    return "nan" if math.isnan(value) else format(value, ".17g")


def _eoc_column(params, errors):
    out = [math.nan]
    for i in range(1, len(params)):
        ratio = params[i - 1] / params[i]
        if errors[i - 1] > 0.0 and errors[i] > 0.0 and ratio != 1.0:
            out.append(math.log(errors[i - 1] / errors[i]) / math.log(ratio))
        else:
            out.append(math.nan)
    return out


def eoc(params, l2, h1) -> ConvergenceTable:
    """Experimental orders of convergence for an error sweep.

    ``params`` must be strictly decreasing (finer discretizations later);
    vanishing errors yield NaN orders rather than an exception.
    """
    params = [float(p) for p in params]
    l2 = [float(e) for e in l2]
    h1 = [float(e) for e in h1]
    if not len(params) == len(l2) == len(h1):
        raise ValueError("parameter and error columns must have equal length")
    if any(b >= a for a, b in zip(params, params[1:])):
        raise ValueError("parameters must be strictly decreasing")
    return ConvergenceTable(
        params=tuple(params),
        l2=tuple(l2),
        h1=tuple(h1),
        eoc_l2=tuple(_eoc_column(params, l2)),
        eoc_h1=tuple(_eoc_column(params, h1)),
    )


def _assembled_state(mesh, t, ms):
    """Matrices and exact nodal data on the interpolated exact surface."""
    pts = exact_positions(mesh, t, ms)
    x_vec = as_vector(pts)
    mass, stiffness = assemble_mass_stiffness(mesh, x_vec)
    r, rdot = logistic_radius(t, ms.r0, ms.r1)
    v_vec = (rdot / r) * x_vec
    return x_vec, mass, stiffness, v_vec


def weak_residual(mesh: SurfaceMesh, t: float, ms: ManufacturedSolution,
                  law: str = "regularized") -> float:
    """Dual norm of the weak-form residual of the interpolated exact solution.

    The oracle validating each derived forcing: nodal interpolants of the
    exact solution are inserted into the law's weak form on the interpolated
    surface and the residual functional rho is measured as
    sqrt(rho^T S^{-1} rho) with S = M + A.  Time-derivative terms of the
    dynamic and coupled forms are replaced by central differences with
    stepwidth 1e-5 (an O(1e-10) perturbation, far below the spatial
    consistency error being measured).  The residual decays at the rate of
    the interpolation error under mesh refinement; a wrong forcing leaves an
    O(1) remainder instead.
    """
    if law == "regularized":
        x_vec, mass, stiffness, v_vec = _assembled_state(mesh, t, ms)
        k_op = KOperator(mass, stiffness, ms.alpha)
        rhs = assemble_normal_rhs(mesh, x_vec, lambda p, s: forcing_regularized(p, s, ms), t)
        residual = k_op.matvec(v_vec) + ms.beta * BlockOperator(stiffness).matvec(x_vec) - rhs
        scalar = (mass + stiffness).tocsr()
        return dual_norm_of_residual(residual, scalar)
    if law == "dynamic":
        x_vec, mass, stiffness, v_vec = _assembled_state(mesh, t, ms)
        transport = _transport_difference(mesh, t, ms, field="velocity")
        rhs = assemble_normal_rhs(mesh, x_vec, lambda p, s: forcing_dynamic(p, s, ms), t)
        residual = transport + ms.alpha * BlockOperator(stiffness).matvec(v_vec) - rhs
        scalar = (mass + stiffness).tocsr()
        return dual_norm_of_residual(residual, scalar)
    if law == "coupled":
        x_vec, mass, stiffness, _ = _assembled_state(mesh, t, ms)
        u_nodes = coupled_solution(as_points(x_vec), t, ms)
        _, f, _ = coupled_manufactured(ms)
        transport = _transport_difference(mesh, t, ms, field="scalar")
        rhs = assemble_scalar_rhs(mesh, x_vec, f, t, u=u_nodes)
        residual = transport + stiffness @ u_nodes - rhs
        scalar = (mass + stiffness).tocsr()
        return dual_norm_of_residual(residual, scalar)
    raise ValueError(f"unknown law {law!r}")


def _transport_difference(mesh, t, ms, field: str) -> np.ndarray:
    """Central difference of t -> M(x*(t)) w*(t) for the transported field."""
    eps = FD_EPSILON
    out = None
    for sign in (1.0, -1.0):
        s = t + sign * eps
        pts = exact_positions(mesh, s, ms)
        vec = as_vector(pts)
        mass, _ = assemble_mass_stiffness(mesh, vec)
        if field == "velocity":
            r, rdot = logistic_radius(s, ms.r0, ms.r1)
            term = BlockOperator(mass).matvec((rdot / r) * vec)
        else:
            term = mass @ coupled_solution(pts, s, ms)
        out = term * sign if out is None else out + term * sign
    return out / (2.0 * eps)


def scheme_defects(mesh: SurfaceMesh, t: float, tau: float, p: int,
                   ms: ManufacturedSolution):
    """Defect sizes of the exact solution in the fully discrete equations.

    Inserts nodal interpolants x*(t - j tau) of the exact positions into the
    p-step scheme for the regularized law at time t and returns

    - the K-norm of the backward-difference defect
      d_x = (1/tau) sum_j delta_j x*(t - j tau) - v*(t), and
    - the dual *-norm of the residual of the position equation assembled on
      the extrapolated surface.

    The first is a pure time-discretization error, O(tau^p); the second mixes
    extrapolation and spatial consistency, O(tau^p + h^k).
    """
    from .bdf import bdf_delta, bdf_gamma

    delta = bdf_delta(p)
    gamma = bdf_gamma(p)
    history = [exact_position_vector(mesh, t - j * tau, ms) for j in range(p + 1)]
    v_star = exact_velocity_vector(mesh, t, ms)

    diff = sum(d * x for d, x in zip(delta, history)) / tau
    x_tilde = sum(g * x for g, x in zip(gamma, history[1:]))
    mass, stiffness = assemble_mass_stiffness(mesh, x_tilde)
    k_op = KOperator(mass, stiffness, ms.alpha)

    d_x = diff - v_star
    d_x_norm = norm_K(mass, stiffness, ms.alpha, d_x)

    rhs = assemble_normal_rhs(mesh, x_tilde, lambda pq, s: forcing_regularized(pq, s, ms), t)
    residual = k_op.matvec(diff) + ms.beta * BlockOperator(stiffness).matvec(history[0]) - rhs
    d_v_norm = dual_norm_of_residual(residual, k_op.scalar_matrix)
    return d_x_norm, d_v_norm
