"""Surface finite element matrices, functionals, norms and the linear solver.

Scalar mass and stiffness matrices are assembled once per surface; their
vector-valued counterparts are the Kronecker blocks I_3 (x) M and I_3 (x) A
acting on component-major nodal vectors, so no 3N x 3N matrix is ever stored.
All assembled matrices are exactly symmetric because the element contributions
are symmetric and scattered in a deterministic order.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.io import mmwrite

from .errors import SolverError
from .mesh import QuadratureGeometry, SurfaceMesh, as_points, quadrature_geometry

#: default relative tolerance of the conjugate gradient solver
CG_REL_TOL = 1e-10

#: tolerance on negative radicands in norm evaluations; anything below this
#: indicates a broken (non-positive) matrix rather than roundoff
NEGATIVE_RADICAND_TOL = -1e-13


def _geometry(mesh, positions, rule, geometry):
    if geometry is not None:
        return geometry
    return quadrature_geometry(mesh, positions, rule)


def _scatter(mesh: SurfaceMesh, local: np.ndarray) -> sparse.csr_matrix:
    # Deterministic duplicate accumulation: entries are ordered stably by
    # (row, col) and summed left to right, so the (j, k) and (k, j) sums see
    # identical element contributions in identical order and the assembled
    # matrix is exactly symmetric.
    rows = np.broadcast_to(mesh.elements[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(mesh.elements[:, None, :], local.shape).ravel()
    vals = local.ravel()
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    first = np.ones(rows.size, dtype=bool)
    first[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.nonzero(first)[0]
    data = np.add.reduceat(vals, starts)
    n = mesh.num_nodes
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows[starts], minlength=n), out=indptr[1:])
    return sparse.csr_matrix((data, cols[starts], indptr), shape=(n, n))


def assemble_mass(mesh: SurfaceMesh, positions: np.ndarray, rule=None,
                  geometry: QuadratureGeometry | None = None) -> sparse.csr_matrix:
    """Scalar mass matrix M(x)_jk = int phi_j phi_k over the discrete surface."""
    geo = _geometry(mesh, positions, rule, geometry)
    # weight the basis by sqrt(w * area) so each local entry is a sum of plain
    # products a_l * a_m, which makes the local matrix symmetric to the bit
    scaled = np.sqrt(geo.weighted_area)[:, :, None] * geo.basis[None, :, :]
    local = np.einsum("eql,eqm->elm", scaled, scaled)
    return _scatter(mesh, local)


def assemble_stiffness(mesh: SurfaceMesh, positions: np.ndarray, rule=None,
                       geometry: QuadratureGeometry | None = None) -> sparse.csr_matrix:
    """Scalar stiffness matrix A(x)_jk = int grad phi_j . grad phi_k (tangential)."""
    geo = _geometry(mesh, positions, rule, geometry)
    scaled = np.sqrt(geo.weighted_area)[:, :, None, None] * geo.surf_grad
    local = np.einsum("eqlc,eqmc->elm", scaled, scaled)
    return _scatter(mesh, local)


def assemble_mass_stiffness(mesh, positions, rule=None, geometry=None):
    """Assemble M and A from a single geometry pass."""
    geo = _geometry(mesh, positions, rule, geometry)
    return assemble_mass(mesh, positions, geometry=geo), assemble_stiffness(
        mesh, positions, geometry=geo
    )


def assemble_normal_rhs(mesh: SurfaceMesh, positions: np.ndarray, forcing, t: float,
                        u: np.ndarray | None = None, rule=None,
                        geometry: QuadratureGeometry | None = None) -> np.ndarray:
    """Load vector with entries int g nu_l phi_j, component-major in R^(3N).

    ``forcing`` is vectorized over quadrature points: called as
    ``forcing(points, t)`` with points of shape (..., 3), or, when a scalar
    field ``u`` is supplied, as ``forcing(u_h, grad_u_h, points, t)`` with the
    finite element values and tangential gradients of u at the same points.
    """
    geo = _geometry(mesh, positions, rule, geometry)
    if u is None:
        values = forcing(geo.points, t)
    else:
        u_loc = u[mesh.elements]
        u_q = np.einsum("ql,el->eq", geo.basis, u_loc)
        grad_q = np.einsum("eqlc,el->eqc", geo.surf_grad, u_loc)
        values = forcing(u_q, grad_q, geo.points, t)
    contrib = np.einsum("eq,eqc,ql->elc", geo.weighted_area * values, geo.normal, geo.basis)
    out = np.zeros((mesh.num_nodes, 3))
    np.add.at(out, mesh.elements, contrib)
    return out.T.reshape(-1)


def assemble_scalar_rhs(mesh: SurfaceMesh, positions: np.ndarray, forcing, t: float,
                        u: np.ndarray | None = None, rule=None,
                        geometry: QuadratureGeometry | None = None) -> np.ndarray:
    """Load vector with entries int f phi_j; ``forcing`` as in the normal RHS."""
    geo = _geometry(mesh, positions, rule, geometry)
    if u is None:
        values = forcing(geo.points, t)
    else:
        u_loc = u[mesh.elements]
        u_q = np.einsum("ql,el->eq", geo.basis, u_loc)
        grad_q = np.einsum("eqlc,el->eqc", geo.surf_grad, u_loc)
        values = forcing(u_q, grad_q, geo.points, t)
    contrib = np.einsum("eq,ql->el", geo.weighted_area * values, geo.basis)
    out = np.zeros(mesh.num_nodes)
    np.add.at(out, mesh.elements, contrib)
    return out


class BlockOperator:
    """I_3 (x) S acting on component-major nodal vector fields."""

    def __init__(self, scalar_matrix: sparse.csr_matrix):
        self.scalar_matrix = scalar_matrix

    @property
    def shape(self):
        n = self.scalar_matrix.shape[0]
        return (3 * n, 3 * n)

    def matvec(self, w: np.ndarray) -> np.ndarray:
        n = self.scalar_matrix.shape[0]
        return (self.scalar_matrix @ w.reshape(3, n).T).T.reshape(-1)

    def diagonal(self) -> np.ndarray:
        return np.tile(self.scalar_matrix.diagonal(), 3)


class KOperator(BlockOperator):
    """The operator K(x) = M(x) + alpha A(x) on vector fields.

    ``alpha = 0`` degrades to the plain mass action; this is permitted so that
    experiments outside the regularized regime remain runnable.
    """

    def __init__(self, mass: sparse.csr_matrix, stiffness: sparse.csr_matrix, alpha: float):
        if alpha < 0.0:
            raise ValueError("alpha must be >= 0")
        self.mass = mass
        self.stiffness = stiffness
        self.alpha = alpha
        super().__init__((mass + alpha * stiffness).tocsr() if alpha else mass)


def _quadratic_form(matrix, w: np.ndarray) -> float:
    n = matrix.shape[0]
    w = np.asarray(w)
    if w.size == n:
        return float(w @ (matrix @ w))
    if w.size == 3 * n:
        blocks = w.reshape(3, n)
        return float(np.sum(blocks * (matrix @ blocks.T).T))
    raise ValueError(f"vector of length {w.size} incompatible with matrix of size {n}")


def _guarded_sqrt(value: float, scale: float = 1.0) -> float:
    # roundoff can push a vanishing quadratic form slightly negative; anything
    # below the scaled threshold means the matrix itself is not positive
    if value < NEGATIVE_RADICAND_TOL * max(scale, 1.0):
        raise RuntimeError(f"negative radicand {value:.3e} in norm; assembly is inconsistent")
    return float(np.sqrt(max(value, 0.0)))


def _form_scale(matrix, w: np.ndarray) -> float:
    return float(np.abs(matrix.diagonal()).max(initial=0.0) * (w @ w))


def norm_M(mass, w) -> float:
    """Discrete L2 norm sqrt(w^T M w); accepts scalar or vector fields."""
    return _guarded_sqrt(_quadratic_form(mass, w), _form_scale(mass, w))


def norm_A(stiffness, w) -> float:
    """Discrete H1 seminorm sqrt(w^T A w)."""
    return _guarded_sqrt(_quadratic_form(stiffness, w), _form_scale(stiffness, w))


def norm_K(mass, stiffness, alpha: float, w) -> float:
    """Energy norm with ||w||_K^2 = ||w||_M^2 + alpha ||w||_A^2."""
    return _guarded_sqrt(
        _quadratic_form(mass, w) + alpha * _quadratic_form(stiffness, w),
        _form_scale(mass, w) + alpha * _form_scale(stiffness, w),
    )


def solve_spd(operator, rhs: np.ndarray, rel_tol: float = CG_REL_TOL,
              x0: np.ndarray | None = None, max_iter: int | None = None):
    """Preconditioned conjugate gradients with the Jacobi preconditioner.

    Parameters
    ----------
    operator : scipy sparse matrix or object with ``matvec`` and ``diagonal``
    rhs : ndarray
    rel_tol : float
        Required bound on ||A x - b|| / ||b||.
    x0 : ndarray, optional
        Initial guess (used to warm-start time stepping).
    max_iter : int, optional
        Defaults to ceil(10 sqrt(n)).

    Returns
    -------
    x : ndarray
    info : dict with keys ``iterations`` and ``relative_residual``

    Raises
    ------
    SolverError
        If the tolerance is not reached within the iteration budget.
    """
    if sparse.issparse(operator):
        matvec = operator.dot
        diag = operator.diagonal()
    else:
        matvec = operator.matvec
        diag = operator.diagonal()
    n = rhs.size
    if max_iter is None:
        max_iter = int(np.ceil(10.0 * np.sqrt(n)))
    b_norm = np.linalg.norm(rhs)
    if b_norm == 0.0:
        return np.zeros_like(rhs), {"iterations": 0, "relative_residual": 0.0}
    if np.any(diag <= 0.0):
        raise SolverError("operator diagonal is not positive; system is not SPD")
    inv_diag = 1.0 / diag

    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - matvec(x)
    r_norm = np.linalg.norm(r)
    if r_norm <= rel_tol * b_norm:
        # warm start already within tolerance (e.g. a stationary step)
        return x, {"iterations": 0, "relative_residual": float(r_norm / b_norm)}
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ap = matvec(p)
        pap = p @ ap
        if pap <= 0.0:
            raise SolverError(f"non-positive curvature p^T A p = {pap:.3e}; system is not SPD")
        step = rz / pap
        x += step * p
        r -= step * ap
        if np.linalg.norm(r) <= rel_tol * b_norm:
            # recompute the true residual to guard against recurrence drift
            true_res = np.linalg.norm(rhs - matvec(x))
            if true_res <= rel_tol * b_norm * 10.0:
                return x, {"iterations": it, "relative_residual": float(true_res / b_norm)}
            r = rhs - matvec(x)
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"conjugate gradients stalled after {max_iter} iterations "
        f"(residual {np.linalg.norm(r) / b_norm:.3e} > {rel_tol:.1e})"
    )


def solve_blockwise(scalar_matrix, rhs: np.ndarray, rel_tol: float = CG_REL_TOL,
                    x0: np.ndarray | None = None) -> np.ndarray:
    """Solve (I_3 (x) S) y = rhs by three scalar solves with the same matrix."""
    n = scalar_matrix.shape[0]
    blocks = rhs.reshape(3, n)
    guesses = None if x0 is None else x0.reshape(3, n)
    out = np.empty_like(blocks)
    for c in range(3):
        out[c], _ = solve_spd(
            scalar_matrix, blocks[c], rel_tol=rel_tol, x0=None if guesses is None else guesses[c]
        )
    return out.reshape(-1)


def dual_norm_star(defect: np.ndarray, mass, k_operator: KOperator,
                   rel_tol: float = CG_REL_TOL) -> float:
    """Dual norm ||d||_*^2 = d^T M K^{-1} M d of a vector-field defect."""
    md = BlockOperator(mass).matvec(defect)
    y = solve_blockwise(k_operator.scalar_matrix, md, rel_tol=rel_tol)
    return _guarded_sqrt(float(md @ y), float(np.linalg.norm(md) * np.linalg.norm(y)))


def dual_norm_of_residual(residual: np.ndarray, scalar_matrix,
                          rel_tol: float = CG_REL_TOL) -> float:
    """Dual norm sqrt(rho^T S^{-1} rho) of a weak-form residual functional.

    Equivalent to :func:`dual_norm_star` with rho = M d, so the defect itself
    never needs to be recovered.  Accepts scalar residuals (length N, solved
    with S directly) and vector-field residuals (length 3N, solved blockwise).
    """
    n = scalar_matrix.shape[0]
    if residual.size == n:
        y, _ = solve_spd(scalar_matrix, residual, rel_tol=rel_tol)
    else:
        y = solve_blockwise(scalar_matrix, residual, rel_tol=rel_tol)
    return _guarded_sqrt(
        float(residual @ y), float(np.linalg.norm(residual) * np.linalg.norm(y))
    )


def interpolate_field(fn, mesh: SurfaceMesh, positions: np.ndarray | None = None) -> np.ndarray:
    """Nodal interpolation of a function of position.

    ``fn`` receives the node coordinates as an (N, 3) array and returns either
    (N,) for a scalar field or (N, 3) for a vector field; vector fields come
    back component-major.
    """
    pts = as_points(mesh.positions if positions is None else positions)
    values = np.asarray(fn(pts), dtype=float)
    if values.shape == (pts.shape[0],):
        return values
    if values.shape == (pts.shape[0], 3):
        return values.T.reshape(-1).copy()
    raise ValueError(f"interpolated field has unexpected shape {values.shape}")


def export_matrix(path, matrix) -> None:
    """Write a sparse matrix in the Matrix Market exchange format."""
    mmwrite(path, matrix)
