"""Assembly, norms and solver checks.

Local matrices on a flat element are compared against exact symbolic
integrals; curved-surface assembly is checked against closed-form sphere
quantities (area 4 pi, Dirichlet energy of the identity 8 pi) and exact
discrete identities (A 1 = 0, x^T A3 x = 2 area, vanishing total normal).
"""

import numpy as np
import pytest
import sympy as sp
from scipy import sparse

from evolvefem.errors import SolverError
from evolvefem.fem import (
    BlockOperator,
    KOperator,
    assemble_mass,
    assemble_mass_stiffness,
    assemble_normal_rhs,
    assemble_scalar_rhs,
    assemble_stiffness,
    dual_norm_of_residual,
    dual_norm_star,
    export_matrix,
    interpolate_field,
    norm_A,
    norm_K,
    norm_M,
    solve_blockwise,
    solve_spd,
)
from evolvefem.mesh import (
    SurfaceMesh,
    as_points,
    as_vector,
    generate_sphere_mesh,
    mesh_width,
    quadrature_geometry,
)

from test_mesh import flat_triangle, tetrahedron_surface


def symbolic_local_matrices(degree):
    """Exact mass and stiffness of the flat reference triangle embedded in R^3."""
    r, s = sp.symbols("r s")
    lam = [1 - r - s, r, s]
    if degree == 1:
        basis = lam
    else:
        basis = [l * (2 * l - 1) for l in lam] + [
            4 * lam[1] * lam[2],
            4 * lam[2] * lam[0],
            4 * lam[0] * lam[1],
        ]
    n = len(basis)
    mass = sp.zeros(n, n)
    stiff = sp.zeros(n, n)
    for i in range(n):
        for j in range(i, n):
            m = sp.integrate(sp.integrate(basis[i] * basis[j], (s, 0, 1 - r)), (r, 0, 1))
            gi = (sp.diff(basis[i], r), sp.diff(basis[i], s))
            gj = (sp.diff(basis[j], r), sp.diff(basis[j], s))
            a = sp.integrate(
                sp.integrate(gi[0] * gj[0] + gi[1] * gj[1], (s, 0, 1 - r)), (r, 0, 1)
            )
            mass[i, j] = mass[j, i] = m
            stiff[i, j] = stiff[j, i] = a
    return np.array(mass, dtype=float), np.array(stiff, dtype=float)


@pytest.mark.parametrize("degree", [1, 2])
def test_flat_element_matrices_match_symbolic(degree):
    mesh = flat_triangle(degree=degree)
    mass = assemble_mass(mesh, mesh.positions).toarray()
    stiff = assemble_stiffness(mesh, mesh.positions).toarray()
    mass_exact, stiff_exact = symbolic_local_matrices(degree)
    assert np.allclose(mass, mass_exact, atol=1e-15)
    assert np.allclose(stiff, stiff_exact, atol=1e-14)


def test_flat_element_mass_values():
    # degree 1: (1/24) * [[2,1,1],[1,2,1],[1,1,2]]
    mesh = flat_triangle(degree=1)
    mass = assemble_mass(mesh, mesh.positions).toarray()
    assert np.allclose(24.0 * mass, np.eye(3) + 1.0, atol=1e-13)


def test_mass_total_is_area():
    mesh = flat_triangle(degree=1)
    mass = assemble_mass(mesh, mesh.positions)
    one = np.ones(mesh.num_nodes)
    assert one @ (mass @ one) == pytest.approx(0.5, abs=1e-15)


def test_sphere_area_and_dirichlet_energy():
    mesh = generate_sphere_mesh(3, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    one = np.ones(mesh.num_nodes)
    area = one @ (mass @ one)
    assert area == pytest.approx(4.0 * np.pi, rel=1e-4)
    x = mesh.positions.reshape(3, -1)
    dirichlet = sum(x[c] @ (stiff @ x[c]) for c in range(3))
    assert dirichlet == pytest.approx(8.0 * np.pi, rel=1e-4)
    # exact discrete identity: grad of the identity is the tangential projector
    assert dirichlet == pytest.approx(2.0 * area, rel=1e-13)


def test_stiffness_annihilates_constants():
    mesh = generate_sphere_mesh(2, degree=2)
    stiff = assemble_stiffness(mesh, mesh.positions)
    one = np.ones(mesh.num_nodes)
    scale = np.abs(stiff.data).max()
    assert np.abs(stiff @ one).max() <= 1e-12 * scale


@pytest.mark.parametrize("degree", [1, 2])
def test_matrices_exactly_symmetric(degree):
    mesh = generate_sphere_mesh(1, degree=degree)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    assert (mass - mass.T).count_nonzero() == 0
    assert (stiff - stiff.T).count_nonzero() == 0


def test_scaling_behaviour():
    mesh = generate_sphere_mesh(1, degree=2)
    scale = 1.7
    mass0, stiff0 = assemble_mass_stiffness(mesh, mesh.positions)
    mass1, stiff1 = assemble_mass_stiffness(mesh, scale * mesh.positions)
    assert np.allclose(mass1.toarray(), scale**2 * mass0.toarray(), rtol=1e-12, atol=1e-15)
    assert np.allclose(stiff1.toarray(), stiff0.toarray(), rtol=1e-12, atol=1e-15)


def test_rigid_motion_invariance():
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    mesh = generate_sphere_mesh(1, degree=2)
    moved = as_vector(mesh.node_coordinates() @ q.T + np.array([1.0, -2.0, 0.5]))
    mass0, stiff0 = assemble_mass_stiffness(mesh, mesh.positions)
    mass1, stiff1 = assemble_mass_stiffness(mesh, moved)
    assert np.allclose(mass1.toarray(), mass0.toarray(), atol=1e-13)
    assert np.allclose(stiff1.toarray(), stiff0.toarray(), atol=1e-12)


def test_mass_is_positive_definite():
    mesh = generate_sphere_mesh(1, degree=2)
    mass = assemble_mass(mesh, mesh.positions)
    rng = np.random.default_rng(0)
    w = rng.standard_normal(mesh.num_nodes)
    # inverse power iteration for the smallest eigenvalue
    for _ in range(5):
        w, _ = solve_spd(mass, w)
        w /= np.linalg.norm(w)
    smallest = w @ (mass @ w)
    assert smallest > 0.0


def test_k_operator():
    mesh = generate_sphere_mesh(1, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    alpha = 0.7
    kop = KOperator(mass, stiff, alpha)
    rng = np.random.default_rng(1)
    w = rng.standard_normal(3 * mesh.num_nodes)
    expect = BlockOperator(mass).matvec(w) + alpha * BlockOperator(stiff).matvec(w)
    assert np.allclose(kop.matvec(w), expect, rtol=1e-13, atol=1e-13)
    # norm compatibility
    nk = norm_K(mass, stiff, alpha, w)
    assert nk == pytest.approx(np.sqrt(norm_M(mass, w) ** 2 + alpha * norm_A(stiff, w) ** 2),
                               rel=1e-12)
    assert nk**2 == pytest.approx(w @ kop.matvec(w), rel=1e-12)
    # alpha = 0 degrades to the mass action
    kop0 = KOperator(mass, stiff, 0.0)
    assert np.allclose(kop0.matvec(w), BlockOperator(mass).matvec(w), rtol=0, atol=0)
    with pytest.raises(ValueError):
        KOperator(mass, stiff, -1.0)


def test_normal_rhs_closed_surface():
    # total normal of a closed surface vanishes; for the unit sphere the
    # pairing with the position recovers 3 * volume = 4 pi
    for mesh in (tetrahedron_surface(), generate_sphere_mesh(2, degree=2)):
        rhs = assemble_normal_rhs(mesh, mesh.positions, lambda p, t: np.ones(p.shape[:-1]), 0.0)
        sums = rhs.reshape(3, -1).sum(axis=1)
        assert np.abs(sums).max() <= 1e-12
    mesh = generate_sphere_mesh(2, degree=2)
    rhs = assemble_normal_rhs(mesh, mesh.positions, lambda p, t: np.ones(p.shape[:-1]), 0.0)
    assert rhs @ mesh.positions == pytest.approx(4.0 * np.pi, rel=1e-3)


def test_normal_rhs_zero_forcing():
    mesh = generate_sphere_mesh(1, degree=2)
    rhs = assemble_normal_rhs(mesh, mesh.positions, lambda p, t: np.zeros(p.shape[:-1]), 0.0)
    assert np.all(rhs == 0.0)


def test_scalar_rhs():
    mesh = generate_sphere_mesh(2, degree=2)
    mass = assemble_mass(mesh, mesh.positions)
    rhs = assemble_scalar_rhs(mesh, mesh.positions, lambda p, t: np.ones(p.shape[:-1]), 0.0)
    assert rhs.sum() == pytest.approx(4.0 * np.pi, rel=1e-4)
    # f(u, grad u) = u with a nodal field u reproduces M u up to quadrature
    u = interpolate_field(lambda p: p[:, 0] ** 2, mesh)
    rhs_u = assemble_scalar_rhs(mesh, mesh.positions, lambda uq, gq, p, t: uq, 0.0, u=u)
    assert np.allclose(rhs_u, mass @ u, rtol=0, atol=1e-14)


def test_scalar_rhs_gradient_argument():
    mesh = generate_sphere_mesh(2, degree=2)
    u = interpolate_field(lambda p: p[:, 2], mesh)
    # int |grad_Gamma u|^2 via the rhs pairing equals u^T A u
    rhs = assemble_scalar_rhs(
        mesh, mesh.positions, lambda uq, gq, p, t: np.sum(gq * gq, axis=-1), 0.0, u=u
    )
    stiff = assemble_stiffness(mesh, mesh.positions)
    assert rhs.sum() == pytest.approx(u @ (stiff @ u), rel=1e-12)


def test_norm_values():
    mesh = generate_sphere_mesh(2, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    area = np.ones(mesh.num_nodes) @ (mass @ np.ones(mesh.num_nodes))
    const = 2.5 * np.ones(mesh.num_nodes)
    assert norm_M(mass, const) == pytest.approx(2.5 * np.sqrt(area), rel=1e-12)
    assert norm_A(stiff, const) == pytest.approx(0.0, abs=1e-7)
    vec = np.concatenate([const, const, const])
    assert norm_M(mass, vec) == pytest.approx(2.5 * np.sqrt(3 * area), rel=1e-12)
    assert norm_M(mass, np.zeros(mesh.num_nodes)) == 0.0


def test_negative_radicand_guard():
    mesh = flat_triangle()
    mass = assemble_mass(mesh, mesh.positions)
    with pytest.raises(RuntimeError, match="radicand"):
        norm_M(-mass, np.array([1.0, 2.0, 3.0]))


def test_solver_contract():
    mesh = generate_sphere_mesh(2, degree=2)
    mass = assemble_mass(mesh, mesh.positions)
    rng = np.random.default_rng(2)
    w = rng.standard_normal(mesh.num_nodes)
    rhs = mass @ w
    x, info = solve_spd(mass, rhs)
    assert np.linalg.norm(mass @ x - rhs) <= 1e-10 * np.linalg.norm(rhs)
    assert np.allclose(x, w, atol=1e-8)
    assert info["iterations"] > 0
    # zero right-hand side short-circuits to the exact zero solution
    x0, info0 = solve_spd(mass, np.zeros(mesh.num_nodes))
    assert np.all(x0 == 0.0)
    assert info0["iterations"] == 0


def test_solver_warm_start():
    mesh = generate_sphere_mesh(2, degree=2)
    mass = assemble_mass(mesh, mesh.positions)
    rng = np.random.default_rng(3)
    w = rng.standard_normal(mesh.num_nodes)
    rhs = mass @ w
    _, cold = solve_spd(mass, rhs)
    _, warm = solve_spd(mass, rhs, x0=w + 1e-8 * rng.standard_normal(w.size))
    assert warm["iterations"] < cold["iterations"]
    # a start vector that already satisfies the tolerance returns immediately
    exact, done = solve_spd(mass, rhs, x0=w)
    assert done["iterations"] == 0
    assert np.array_equal(exact, w)


def test_solver_failure_raises():
    mesh = generate_sphere_mesh(1, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    hard = (mass + stiff).tocsr()
    rng = np.random.default_rng(4)
    rhs = rng.standard_normal(mesh.num_nodes)
    with pytest.raises(SolverError, match="stalled"):
        solve_spd(hard, rhs, max_iter=2)


def test_solver_rejects_indefinite():
    bad = sparse.diags([1.0, -1.0, 1.0]).tocsr()
    with pytest.raises(SolverError, match="not positive|not SPD"):
        solve_spd(bad, np.array([1.0, 1.0, 1.0]))


def test_dual_norm_star():
    mesh = generate_sphere_mesh(1, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    alpha = 1.0
    kop = KOperator(mass, stiff, alpha)
    rng = np.random.default_rng(6)
    d = rng.standard_normal(3 * mesh.num_nodes)

    star = dual_norm_star(d, mass, kop)

    # dense-algebra oracle, independent of the CG path
    n = mesh.num_nodes
    mass_d = mass.toarray()
    k_d = mass_d + alpha * stiff.toarray()
    expect_sq = 0.0
    for c in range(3):
        md = mass_d @ d.reshape(3, n)[c]
        expect_sq += md @ np.linalg.solve(k_d, md)
    assert star == pytest.approx(np.sqrt(expect_sq), rel=1e-8)

    # sup characterization: random test fields never exceed the norm, the
    # analytic maximizer psi* = K^{-1} M d attains it
    md_full = BlockOperator(mass).matvec(d)
    for _ in range(50):
        psi = rng.standard_normal(3 * n)
        ratio = (d @ BlockOperator(mass).matvec(psi)) / norm_K(mass, stiff, alpha, psi)
        assert ratio <= star * (1.0 + 1e-9)
    maximizer = np.concatenate(
        [np.linalg.solve(k_d, md_full.reshape(3, n)[c]) for c in range(3)]
    )
    attained = (d @ BlockOperator(mass).matvec(maximizer)) / norm_K(mass, stiff, alpha, maximizer)
    assert attained == pytest.approx(star, rel=1e-8)

    # with alpha = 0 the star norm collapses to the M norm
    star0 = dual_norm_star(d, mass, KOperator(mass, stiff, 0.0))
    assert star0 == pytest.approx(norm_M(mass, d), rel=1e-9)


def test_dual_norm_of_residual_matches_star():
    mesh = generate_sphere_mesh(1, degree=2)
    mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
    kop = KOperator(mass, stiff, 1.0)
    rng = np.random.default_rng(7)
    d = rng.standard_normal(3 * mesh.num_nodes)
    rho = BlockOperator(mass).matvec(d)
    assert dual_norm_of_residual(rho, kop.scalar_matrix) == pytest.approx(
        dual_norm_star(d, mass, kop), rel=1e-9
    )


def test_mesh_movement_mass_continuity():
    # |w^T (M(y+e) - M(y)) z| <= 2 max ||div_Gamma e|| ||w||_M ||z||_M
    mesh = generate_sphere_mesh(2, degree=2)
    pts = mesh.node_coordinates()
    displacement = 0.02 * np.column_stack(
        [np.sin(2 * pts[:, 1]), pts[:, 0] * pts[:, 2], np.cos(pts[:, 0])]
    )
    e = as_vector(displacement)
    mass0 = assemble_mass(mesh, mesh.positions)
    mass1 = assemble_mass(mesh, mesh.positions + e)

    div_max = 0.0
    for theta in (0.0, 0.5, 1.0):
        geo = quadrature_geometry(mesh, mesh.positions + theta * e)
        e_loc = as_points(e)[mesh.elements]
        div = np.einsum("eqlc,elc->eq", geo.surf_grad, e_loc)
        div_max = max(div_max, np.abs(div).max())

    rng = np.random.default_rng(8)
    for _ in range(10):
        w = rng.standard_normal(mesh.num_nodes)
        z = rng.standard_normal(mesh.num_nodes)
        lhs = abs(w @ ((mass1 - mass0) @ z))
        assert lhs <= 2.0 * div_max * norm_M(mass0, w) * norm_M(mass0, z)


def test_weak_laplace_identity_on_sphere():
    # M h = A3 x on the interpolated unit sphere gives h ~ H nu = 2 x
    errors = {}
    for level in (2, 3):
        mesh = generate_sphere_mesh(level, degree=2)
        mass, stiff = assemble_mass_stiffness(mesh, mesh.positions)
        h_vec = solve_blockwise(mass, BlockOperator(stiff).matvec(mesh.positions))
        errors[level] = np.abs(h_vec - 2.0 * mesh.positions).max()
        assert errors[level] <= 0.5 * mesh_width(mesh)
    assert errors[3] < 0.5 * errors[2]


def test_interpolate_field():
    mesh = generate_sphere_mesh(1, degree=2)
    identity = interpolate_field(lambda p: p, mesh)
    assert np.array_equal(identity, mesh.positions)
    scalar = interpolate_field(lambda p: p[:, 0] + 1.0, mesh)
    assert scalar.shape == (mesh.num_nodes,)
    assert np.allclose(scalar, mesh.node_coordinates()[:, 0] + 1.0)


def test_export_matrix(tmp_path):
    mesh = flat_triangle()
    mass = assemble_mass(mesh, mesh.positions)
    path = tmp_path / "mass.mtx"
    export_matrix(path, mass)
    from scipy.io import mmread

    back = mmread(path)
    assert np.allclose(back.toarray(), mass.toarray(), atol=1e-15)
