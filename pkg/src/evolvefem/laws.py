"""Linearly implicit BDF time steppers for the three surface velocity laws.

Each step assembles the surface matrices on the extrapolated surface
x~^n = sum_j gamma_j x^{n-1-j}, so advancing costs one sparse SPD solve (plus
one scalar solve for the coupled law).  Histories are rings of the last p
states, newest first.  The dynamic and coupled laws additionally keep the
mass-matrix products M v^m / M u^m formed at their own step; those cached
products are summed by the backward difference and are never recomputed on a
newer surface -- that caching is what makes the scheme linearly implicit.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bdf import bdf_delta, bdf_gamma
from .errors import ConfigError
from .fem import (
    CG_REL_TOL,
    BlockOperator,
    KOperator,
    assemble_mass_stiffness,
    assemble_normal_rhs,
    assemble_scalar_rhs,
    solve_spd,
)
from .mesh import SurfaceMesh, quadrature_geometry

LAWS = ("regularized", "dynamic", "coupled")

#: largest admissible BDF order per law (energy estimates need the
#: Nevanlinna-Odeh multiplier for the dynamic and coupled schemes)
MAX_ORDER = {"regularized": 6, "dynamic": 5, "coupled": 5}


def _zero_forcing(points, t):
    return np.zeros(np.asarray(points).shape[:-1])


def _zero_field_forcing(u, grad_u, points, t):
    return np.zeros(np.asarray(points).shape[:-1])


@dataclass(frozen=True)
class ProblemConfig:
    """Which law to integrate, with discretization and PDE parameters.

    Forcing conventions: for the regularized and dynamic laws ``forcing_g`` is
    called as ``g(points, t)``; for the coupled law both ``forcing_g`` and
    ``forcing_f`` are called as ``fn(u, grad_u, points, t)`` with the
    extrapolated scalar field and its tangential gradient at the quadrature
    points.  ``None`` means zero forcing.
    """

    law: str = "regularized"
    p: int = 2
    tau: float = 0.01
    end_time: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    forcing_g: Optional[Callable] = None
    forcing_f: Optional[Callable] = None
    solver_tol: float = CG_REL_TOL

    def __post_init__(self):
        if self.law not in LAWS:
            raise ConfigError(f"unknown law {self.law!r}; expected one of {LAWS}")
        if not 1 <= self.p <= MAX_ORDER[self.law]:
            raise ConfigError(
                f"BDF order {self.p} outside 1..{MAX_ORDER[self.law]} for the {self.law} law"
            )
        if self.alpha < 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.alpha == 0.0:
            warnings.warn(
                "alpha = 0 disables the elliptic regularization; runs are experimental",
                stacklevel=2,
            )
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.tau <= 0.0:
            raise ConfigError(f"time step must be positive, got {self.tau}")
        if self.end_time < 0.0:
            raise ConfigError(f"end time must be nonnegative, got {self.end_time}")

    @property
    def num_steps(self) -> int:
        """Number of time steps, floor(T / tau) with a roundoff guard."""
        return int(math.floor(self.end_time / self.tau + 1e-9))


@dataclass
class SimulationState:
    """Histories and diagnostics of a running simulation.

    All vectors are component-major; ``positions[j]`` holds x^{n-j} (newest
    first), likewise the velocity, scalar-field, and cached-product rings.
    ``cached_products`` stores M v^m for the dynamic law and M u^m for the
    coupled law, each formed at step m and kept verbatim.
    """

    mesh: SurfaceMesh
    n: int
    time: float
    positions: deque
    velocities: deque
    u_values: Optional[deque] = None
    cached_products: Optional[deque] = None
    last_iterations: int = 0
    total_iterations: int = 0

    @property
    def current_positions(self) -> np.ndarray:
        return self.positions[0]

    @property
    def current_velocity(self) -> np.ndarray:
        return self.velocities[0]

    @property
    def current_u(self) -> Optional[np.ndarray]:
        return None if self.u_values is None else self.u_values[0]


def _combine(weights, history) -> np.ndarray:
    out = weights[0] * history[0]
    for w, h in zip(weights[1:], list(history)[1:]):
        out = out + w * h
    return out


def _solve_blocks(scalar_matrix, rhs, x0, rel_tol):
    """Three scalar CG solves for a component-major block system."""
    n = scalar_matrix.shape[0]
    blocks = rhs.reshape(3, n)
    guesses = None if x0 is None else x0.reshape(3, n)
    out = np.empty_like(blocks)
    iterations = 0
    for c in range(3):
        out[c], info = solve_spd(
            scalar_matrix, blocks[c], rel_tol=rel_tol,
            x0=None if guesses is None else guesses[c],
        )
        iterations += info["iterations"]
    return out.reshape(-1), iterations


def _position_solve(cfg, mass, stiffness, delta, x_tilde, positions, g_rhs):
    """Shared position update: ((delta_0/tau) K + beta A) x^n = g - (1/tau) K sum.

    Used verbatim by both the regularized and the coupled stepper so that a
    decoupled run (f = 0, g independent of u) reproduces the regularized
    trajectory bit for bit.
    """
    k_op = KOperator(mass, stiffness, cfg.alpha)
    hist_sum = _combine(delta[1:], positions)
    rhs = g_rhs - k_op.matvec(hist_sum) / cfg.tau
    system = ((delta[0] / cfg.tau) * k_op.scalar_matrix + cfg.beta * stiffness).tocsr()
    x_new, iterations = _solve_blocks(system, rhs, x0=x_tilde, rel_tol=cfg.solver_tol)
    v_new = (delta[0] * x_new + hist_sum) / cfg.tau
    return x_new, v_new, iterations


def step_regularized(state: SimulationState, cfg: ProblemConfig) -> SimulationState:
    """Advance the regularized law by one linearly implicit BDF step."""
    delta, gamma = bdf_delta(cfg.p), bdf_gamma(cfg.p)
    t_new = state.time + cfg.tau
    x_tilde = _combine(gamma, state.positions)
    geo = quadrature_geometry(state.mesh, x_tilde)
    mass, stiffness = assemble_mass_stiffness(state.mesh, x_tilde, geometry=geo)
    forcing = cfg.forcing_g if cfg.forcing_g is not None else _zero_forcing
    g_rhs = assemble_normal_rhs(state.mesh, x_tilde, forcing, t_new, geometry=geo)
    x_new, v_new, iterations = _position_solve(
        cfg, mass, stiffness, delta, x_tilde, state.positions, g_rhs
    )
    state.positions.appendleft(x_new)
    state.velocities.appendleft(v_new)
    state.n += 1
    state.time = t_new
    state.last_iterations = iterations
    state.total_iterations += iterations
    return state


def step_dynamic(state: SimulationState, cfg: ProblemConfig) -> SimulationState:
    """Advance the material-derivative law by one step.

    Solves ((delta_0/tau) M + alpha A) v^n = g - (1/tau) sum_j delta_j [M v]^{n-j}
    with the cached mass-velocity products, then recovers the position from
    the backward difference and caches M(x~^n) v^n.
    """
    delta, gamma = bdf_delta(cfg.p), bdf_gamma(cfg.p)
    t_new = state.time + cfg.tau
    x_tilde = _combine(gamma, state.positions)
    geo = quadrature_geometry(state.mesh, x_tilde)
    mass, stiffness = assemble_mass_stiffness(state.mesh, x_tilde, geometry=geo)
    forcing = cfg.forcing_g if cfg.forcing_g is not None else _zero_forcing
    g_rhs = assemble_normal_rhs(state.mesh, x_tilde, forcing, t_new, geometry=geo)

    product_sum = _combine(delta[1:], state.cached_products)
    rhs = g_rhs - product_sum / cfg.tau
    system = ((delta[0] / cfg.tau) * mass + cfg.alpha * stiffness).tocsr()
    v_new, iterations = _solve_blocks(
        system, rhs, x0=state.velocities[0], rel_tol=cfg.solver_tol
    )
    hist_sum = _combine(delta[1:], state.positions)
    x_new = (cfg.tau * v_new - hist_sum) / delta[0]

    state.cached_products.appendleft(BlockOperator(mass).matvec(v_new))
    state.positions.appendleft(x_new)
    state.velocities.appendleft(v_new)
    state.n += 1
    state.time = t_new
    state.last_iterations = iterations
    state.total_iterations += iterations
    return state


def step_coupled(state: SimulationState, cfg: ProblemConfig) -> SimulationState:
    """Advance the position-diffusion coupled system by one step.

    First the scalar solve ((delta_0/tau) M + A) u^n = f - (1/tau) sum_j
    delta_j [M u]^{n-j} with f evaluated at the extrapolated field u~^n, then
    the position solve of :func:`step_regularized` with g(u~^n); finally
    M(x~^n) u^n joins the product ring.
    """
    delta, gamma = bdf_delta(cfg.p), bdf_gamma(cfg.p)
    t_new = state.time + cfg.tau
    x_tilde = _combine(gamma, state.positions)
    u_tilde = _combine(gamma, state.u_values)
    geo = quadrature_geometry(state.mesh, x_tilde)
    mass, stiffness = assemble_mass_stiffness(state.mesh, x_tilde, geometry=geo)

    forcing_f = cfg.forcing_f if cfg.forcing_f is not None else _zero_field_forcing
    f_rhs = assemble_scalar_rhs(state.mesh, x_tilde, forcing_f, t_new, u=u_tilde, geometry=geo)
    product_sum = _combine(delta[1:], state.cached_products)
    scalar_system = ((delta[0] / cfg.tau) * mass + stiffness).tocsr()
    u_new, scalar_iters = solve_spd(
        scalar_system, f_rhs - product_sum / cfg.tau, rel_tol=cfg.solver_tol, x0=u_tilde
    )

    forcing_g = cfg.forcing_g if cfg.forcing_g is not None else _zero_field_forcing
    g_rhs = assemble_normal_rhs(state.mesh, x_tilde, forcing_g, t_new, u=u_tilde, geometry=geo)
    x_new, v_new, iterations = _position_solve(
        cfg, mass, stiffness, delta, x_tilde, state.positions, g_rhs
    )

    state.cached_products.appendleft(mass @ u_new)
    state.positions.appendleft(x_new)
    state.velocities.appendleft(v_new)
    state.u_values.appendleft(u_new)
    state.n += 1
    state.time = t_new
    state.last_iterations = iterations + scalar_iters["iterations"]
    state.total_iterations += state.last_iterations
    return state


_STEPPERS = {
    "regularized": step_regularized,
    "dynamic": step_dynamic,
    "coupled": step_coupled,
}


def _state_from_histories(cfg, mesh, xs, vs, us, n, time) -> SimulationState:
    """Assemble a SimulationState from newest-first history lists.

    Cached mass products for the dynamic/coupled rings are formed on each
    history entry's own surface (the extrapolated surface of a starting index
    does not exist yet, so the actual surface stands in for it).
    """
    p = cfg.p
    positions = deque(xs, maxlen=p)
    velocities = deque(vs, maxlen=p)
    u_values = deque(us, maxlen=p) if cfg.law == "coupled" else None
    cached = None
    if cfg.law in ("dynamic", "coupled"):
        cached = deque(maxlen=p)
        for j in reversed(range(len(xs))):  # oldest first, so newest ends at [0]
            mass, _ = assemble_mass_stiffness(mesh, xs[j])
            if cfg.law == "dynamic":
                cached.appendleft(BlockOperator(mass).matvec(vs[j]))
            else:
                cached.appendleft(mass @ us[j])
    return SimulationState(
        mesh=mesh, n=n, time=time, positions=positions, velocities=velocities,
        u_values=u_values, cached_products=cached,
    )


def starting_values(cfg: ProblemConfig, mesh: SurfaceMesh, ms=None, mode: str = "exact",
                    initial_velocity=None, initial_u=None) -> SimulationState:
    """Histories for the first p indices, by interpolation or bootstrapping.

    ``exact`` interpolates the manufactured solution at t_i = i tau (the mode
    for convergence studies; requires ``ms``).  ``bootstrap`` starts from the
    mesh's own positions and climbs a ladder of lower-order methods with
    smaller steps: order q runs with step tau / 2^(p-q), and every second
    state is kept when the order increases.  The dynamic law needs an initial
    velocity (from ``ms`` or ``initial_velocity``); the coupled law likewise
    needs the initial scalar field.
    """
    from .verify import (
        coupled_solution,
        exact_position_vector,
        exact_positions,
        exact_velocity_vector,
    )

    p, tau = cfg.p, cfg.tau
    if mode == "exact":
        if ms is None:
            raise ConfigError("exact starting values require a manufactured solution")
        times = [(p - 1 - i) * tau for i in range(p)]  # newest first
        xs = [exact_position_vector(mesh, t, ms) for t in times]
        vs = [exact_velocity_vector(mesh, t, ms) for t in times]
        us = [coupled_solution(exact_positions(mesh, t, ms), t, ms) for t in times]
        return _state_from_histories(cfg, mesh, xs, vs, us, n=p - 1, time=(p - 1) * tau)
    if mode != "bootstrap":
        raise ConfigError(f"unknown starting mode {mode!r}")

    x0 = np.array(mesh.positions, dtype=float)
    if ms is not None:
        v0 = exact_velocity_vector(mesh, 0.0, ms)
        u0 = coupled_solution(exact_positions(mesh, 0.0, ms), 0.0, ms)
    else:
        if cfg.law == "dynamic" and initial_velocity is None:
            raise ConfigError("bootstrap for the dynamic law needs an initial velocity")
        if cfg.law == "coupled" and initial_u is None:
            raise ConfigError("bootstrap for the coupled law needs an initial scalar field")
        v0 = np.zeros_like(x0) if initial_velocity is None else np.array(initial_velocity, float)
        u0 = None if cfg.law != "coupled" else np.array(initial_u, dtype=float)

    xs, vs, us = [x0], [v0], [u0]  # newest first (single entry)
    for q in range(1, p):
        tau_q = tau / 2 ** (p - q)
        sub_cfg = ProblemConfig(
            law=cfg.law, p=q, tau=tau_q, end_time=2 * q * tau_q, alpha=cfg.alpha,
            beta=cfg.beta, forcing_g=cfg.forcing_g, forcing_f=cfg.forcing_f,
            solver_tol=cfg.solver_tol,
        )
        state = _state_from_histories(
            sub_cfg, mesh, xs, vs, us, n=q - 1, time=(q - 1) * tau_q
        )
        trajectory = {j: (xs[q - 1 - j], vs[q - 1 - j], us[q - 1 - j]) for j in range(q)}
        stepper = _STEPPERS[cfg.law]
        while state.n < 2 * q:
            state = stepper(state, sub_cfg)
            trajectory[state.n] = (
                state.positions[0], state.velocities[0], state.current_u,
            )
        kept = [trajectory[j] for j in range(2 * q, -1, -2)]  # newest first
        xs = [k[0] for k in kept]
        vs = [k[1] for k in kept]
        us = [k[2] for k in kept]
    return _state_from_histories(cfg, mesh, xs, vs, us, n=p - 1, time=(p - 1) * tau)


@dataclass
class RunResult:
    """Final state plus run-level diagnostics."""

    state: SimulationState
    num_steps: int
    total_iterations: int


def run(cfg: ProblemConfig, mesh: SurfaceMesh, ms=None, observers=(), observer_stride: int = 1,
        start: str = "exact", initial_velocity=None, initial_u=None,
        state: Optional[SimulationState] = None) -> RunResult:
    """Integrate the configured law to the end time.

    Observers are called as ``observer(n, t_n, positions, velocity, u)`` (u is
    None outside the coupled law) at every index divisible by the stride,
    including the starting indices; they receive copies and must not mutate
    them back into the run.
    """
    if observer_stride < 1:
        raise ConfigError(f"observer stride must be >= 1, got {observer_stride}")
    if state is None:
        state = starting_values(
            cfg, mesh, ms=ms, mode=start,
            initial_velocity=initial_velocity, initial_u=initial_u,
        )
    n_steps = cfg.num_steps
    if n_steps < state.n:
        raise ConfigError(
            f"end time {cfg.end_time} is shorter than the starting window of {state.n} steps"
        )

    def notify(index):
        if index % observer_stride:
            return
        j = state.n - index  # history offset
        u = None if state.u_values is None else state.u_values[j].copy()
        for obs in observers:
            obs(index, index * cfg.tau, state.positions[j].copy(),
                state.velocities[j].copy(), u)

    for i in range(state.n + 1):
        notify(i)
    stepper = _STEPPERS[cfg.law]
    while state.n < n_steps:
        state = stepper(state, cfg)
        notify(state.n)
    return RunResult(state=state, num_steps=n_steps, total_iterations=state.total_iterations)
