"""Closed simplicial surface meshes with curved elements of degree 1 or 2.

A mesh stores the element-node incidence and the initial nodal positions; the
positions evolve during time stepping and are passed alongside the mesh to
every geometric operation.  Nodal vector fields use the component-major
layout: a field w in R^(3N) stores all first components, then all second
components, then all third components, matching the Kronecker block structure
(I_3 (x) S) of the vector-valued finite element matrices.

Degree-2 elements list their three corner vertices first and then the three
edge nodes, where local node 3+i lies on the edge opposite corner i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError
from .reference import QuadratureRule, num_local_nodes, quadrature_rule, reference_basis

#: relative threshold on det(J^T J), scaled by diameter^4, below which an
#: element counts as degenerate
DEGENERATE_REL_TOL = 1e-14

#: default residual tolerance for implicit-surface projection
PROJECTION_TOL = 1e-10


def as_points(vector: np.ndarray) -> np.ndarray:
    """View a component-major vector field in R^(3N) as an (N, 3) array."""
    vector = np.asarray(vector)
    if vector.ndim != 1 or vector.size % 3:
        raise ValueError("expected a flat vector of length 3N")
    return vector.reshape(3, -1).T


def as_vector(points: np.ndarray) -> np.ndarray:
    """Flatten an (N, 3) array of points into a component-major vector."""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("expected an (N, 3) array")
    return points.T.reshape(-1).copy()


@dataclass
class SurfaceMesh:
    """Simplicial surface mesh of degree 1 or 2.

    Parameters
    ----------
    degree : int
        Element degree (1 or 2).
    elements : ndarray of int, shape (n_elements, n_local)
        Element-node incidence; n_local is 3 for degree 1 and 6 for degree 2.
    positions : ndarray, shape (3 * num_nodes,)
        Initial nodal positions, component-major.
    validate : bool
        Run the closed-surface and orientation checks on construction.
    """

    degree: int
    elements: np.ndarray
    positions: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        nloc = num_local_nodes(self.degree)
        if self.elements.ndim != 2 or self.elements.shape[1] != nloc:
            raise MeshError(
                f"degree-{self.degree} elements need {nloc} nodes per element, "
                f"got shape {self.elements.shape}"
            )
        if self.positions.ndim != 1 or self.positions.size % 3:
            raise MeshError("positions must be a flat component-major vector of length 3N")
        if self.elements.size and self.elements.max() >= self.num_nodes:
            raise MeshError("element references a node beyond the position array")
        if self.elements.min(initial=0) < 0:
            raise MeshError("negative node index in element list")
        if self.validate:
            validate_mesh(self)

    @property
    def num_nodes(self) -> int:
        return self.positions.size // 3

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def node_coordinates(self) -> np.ndarray:
        return as_points(self.positions)


def mesh_width(mesh: SurfaceMesh, positions: np.ndarray | None = None) -> float:
    """Longest corner edge over all elements."""
    pts = as_points(mesh.positions if positions is None else positions)
    corners = pts[mesh.elements[:, :3]]
    h = 0.0
    for i, j in ((0, 1), (1, 2), (2, 0)):
        h = max(h, float(np.linalg.norm(corners[:, i] - corners[:, j], axis=1).max()))
    return h


def _element_diameters(mesh: SurfaceMesh, pts: np.ndarray) -> np.ndarray:
    corners = pts[mesh.elements[:, :3]]
    d = np.zeros(mesh.num_elements)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        np.maximum(d, np.linalg.norm(corners[:, i] - corners[:, j], axis=1), out=d)
    return d


@dataclass(frozen=True)
class ElementGeometry:
    """First-order geometry of one element at one reference point."""

    jacobian: np.ndarray  # (3, 2)
    gram: np.ndarray  # (2, 2)
    inv_gram: np.ndarray  # (2, 2)
    area_element: float  # sqrt(det gram)
    normal: np.ndarray  # (3,), unit


def element_geometry(
    mesh: SurfaceMesh,
    positions: np.ndarray,
    element_index: int,
    reference_point,
) -> ElementGeometry:
    """Evaluate Jacobian, Gram matrix, area element and unit normal.

    Raises
    ------
    MeshError
        If the element is degenerate at the evaluation point, i.e.
        det(J^T J) <= 1e-14 * diameter^4.
    """
    pts = as_points(positions)
    coords = pts[mesh.elements[element_index]]
    _, grads = reference_basis(mesh.degree, np.asarray(reference_point, dtype=float))
    jac = coords.T @ grads  # (3, 2)
    gram = jac.T @ jac
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    corners = coords[:3]
    diam = max(
        np.linalg.norm(corners[0] - corners[1]),
        np.linalg.norm(corners[1] - corners[2]),
        np.linalg.norm(corners[2] - corners[0]),
    )
    if det <= DEGENERATE_REL_TOL * diam**4:
        raise MeshError(f"degenerate element {element_index}: det(J^T J) = {det:.3e}")
    area = np.sqrt(det)
    normal = np.cross(jac[:, 0], jac[:, 1]) / area
    inv_gram = np.array([[gram[1, 1], -gram[0, 1]], [-gram[1, 0], gram[0, 0]]]) / det
    return ElementGeometry(
        jacobian=jac, gram=gram, inv_gram=inv_gram, area_element=float(area), normal=normal
    )


@dataclass(frozen=True)
class QuadratureGeometry:
    """Geometry of every element at every quadrature point of a rule.

    Shapes use (n_elements, n_q, ...); ``basis`` and ``basis_grad`` are the
    reference-element data shared by all elements, while ``surf_grad`` holds
    the tangential gradients of the basis functions in ambient coordinates.
    """

    rule: QuadratureRule
    basis: np.ndarray  # (n_q, n_loc)
    points: np.ndarray  # (n_el, n_q, 3)
    weighted_area: np.ndarray  # (n_el, n_q): quadrature weight * area element
    normal: np.ndarray  # (n_el, n_q, 3)
    surf_grad: np.ndarray  # (n_el, n_q, n_loc, 3)


def quadrature_geometry(
    mesh: SurfaceMesh,
    positions: np.ndarray,
    rule: QuadratureRule | None = None,
) -> QuadratureGeometry:
    """Batch version of :func:`element_geometry` used by matrix assembly."""
    if rule is None:
        rule = quadrature_rule(2 * mesh.degree + 2)
    pts = as_points(positions)
    coords = pts[mesh.elements]  # (n_el, n_loc, 3)
    vals, grads = reference_basis(mesh.degree, rule.points)  # (n_q, n_loc), (n_q, n_loc, 2)
    jac = np.einsum("elc,qld->eqcd", coords, grads)
    gram = np.einsum("eqcd,eqcf->eqdf", jac, jac)
    det = gram[..., 0, 0] * gram[..., 1, 1] - gram[..., 0, 1] * gram[..., 1, 0]
    diam4 = _element_diameters(mesh, pts) ** 4
    bad = det <= DEGENERATE_REL_TOL * diam4[:, None]
    if np.any(bad):
        index = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise MeshError(f"degenerate element {index}: det(J^T J) = {det[index].min():.3e}")
    area = np.sqrt(det)
    normal = np.cross(jac[..., 0], jac[..., 1]) / area[..., None]
    inv_gram = (
        np.stack(
            [
                np.stack([gram[..., 1, 1], -gram[..., 0, 1]], axis=-1),
                np.stack([-gram[..., 1, 0], gram[..., 0, 0]], axis=-1),
            ],
            axis=-2,
        )
        / det[..., None, None]
    )
    surf_grad = np.einsum("eqcd,eqdf,qlf->eqlc", jac, inv_gram, grads)
    points = np.einsum("ql,elc->eqc", vals, coords)
    return QuadratureGeometry(
        rule=rule,
        basis=vals,
        points=points,
        weighted_area=rule.weights[None, :] * area,
        normal=normal,
        surf_grad=surf_grad,
    )


def signed_volume(mesh: SurfaceMesh, positions: np.ndarray | None = None) -> float:
    """Volume enclosed by the surface, positive for outward orientation."""
    geo = quadrature_geometry(mesh, mesh.positions if positions is None else positions)
    return float(np.einsum("eq,eqc,eqc->", geo.weighted_area, geo.points, geo.normal) / 3.0)


def validate_mesh(mesh: SurfaceMesh) -> None:
    """Check that the mesh is a closed, consistently oriented surface.

    Every corner edge must be traversed exactly once in each direction, every
    node must be referenced, degree-2 elements sharing an edge must share its
    edge node, and the enclosed volume must be positive.
    """
    used = np.zeros(mesh.num_nodes, dtype=bool)
    used[mesh.elements.ravel()] = True
    if not used.all():
        raise MeshError(f"unreferenced node {int(np.argwhere(~used)[0, 0])}")

    corners = mesh.elements[:, :3]
    directed = set()
    for i, j in ((0, 1), (1, 2), (2, 0)):
        for e, (a, b) in enumerate(zip(corners[:, i], corners[:, j])):
            key = (int(a), int(b))
            if key in directed:
                raise MeshError(f"edge {key} traversed twice; inconsistent orientation at element {e}")
            directed.add(key)
    for a, b in directed:
        if (b, a) not in directed:
            raise MeshError(f"boundary edge {(a, b)}: surface is not closed")

    if mesh.degree == 2:
        edge_nodes: dict[tuple[int, int], int] = {}
        for e, elem in enumerate(mesh.elements):
            for i in range(3):
                a, b = int(elem[(i + 1) % 3]), int(elem[(i + 2) % 3])
                key = (min(a, b), max(a, b))
                node = int(elem[3 + i])
                if edge_nodes.setdefault(key, node) != node:
                    raise MeshError(f"elements disagree on the edge node of {key} (element {e})")

    if signed_volume(mesh, mesh.positions) <= 0.0:
        raise MeshError("surface is oriented inward (negative enclosed volume)")


# ---------------------------------------------------------------------------
# sphere meshes by icosahedral subdivision


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return verts, faces


def _normalize(p: np.ndarray) -> np.ndarray:
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def generate_sphere_mesh(level: int, degree: int = 2) -> SurfaceMesh:
    """Unit-sphere mesh from `level` quadrisections of the icosahedron.

    All nodes, including the degree-2 edge nodes, are projected radially onto
    the unit sphere.  Level 0 with degree 1 is the icosahedron itself
    (12 nodes, 20 elements); each level multiplies the element count by 4.
    """
    if level < 0:
        raise MeshError("subdivision level must be >= 0")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                verts.append(_normalize(0.5 * (verts[a] + verts[b])))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    verts = np.array(verts)

    if degree == 1:
        return SurfaceMesh(degree=1, elements=faces, positions=as_vector(verts))
    if degree != 2:
        raise MeshError(f"unsupported element degree {degree}")

    verts = list(verts)
    edge_node: dict[tuple[int, int], int] = {}

    def enode(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in edge_node:
            verts.append(_normalize(0.5 * (verts[a] + verts[b])))
            edge_node[key] = len(verts) - 1
        return edge_node[key]

    elements = []
    for a, b, c in faces:
        elements.append([a, b, c, enode(b, c), enode(c, a), enode(a, b)])
    return SurfaceMesh(
        degree=2,
        elements=np.array(elements, dtype=np.int64),
        positions=as_vector(np.array(verts)),
    )


# ---------------------------------------------------------------------------
# implicit surfaces


def sphere_level_set(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance to the unit sphere with its gradient."""
    r = np.linalg.norm(points, axis=-1)
    return r - 1.0, points / r[..., None]


def rounded_cube_level_set(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero level set of (x^4 + y^4 + z^4)^(1/4) - 1, a cube with rounded edges."""
    s = np.sum(points**4, axis=-1)
    phi = s**0.25 - 1.0
    grad = points**3 * s[..., None] ** (-0.75)
    return phi, grad


def generate_implicit_mesh(level_set, base_mesh: SurfaceMesh, tol: float = PROJECTION_TOL,
                           max_iter: int = 100) -> SurfaceMesh:
    """Project every node of `base_mesh` onto the zero level set.

    Damped Newton iteration along the level-set gradient; `level_set` maps an
    (n, 3) array of points to a pair (values, gradients).  Raises
    :class:`MeshError` naming a node if the projection stalls.
    """
    y = base_mesh.node_coordinates().copy()
    for _ in range(max_iter):
        phi, grad = level_set(y)
        active = np.abs(phi) > tol
        if not active.any():
            return SurfaceMesh(
                degree=base_mesh.degree,
                elements=base_mesh.elements.copy(),
                positions=as_vector(y),
            )
        gg = np.sum(grad * grad, axis=-1)
        if np.any(gg[active] == 0.0):
            raise MeshError(
                f"level-set gradient vanishes at node {int(np.nonzero(active & (gg == 0.0))[0][0])}"
            )
        step = (phi / gg)[:, None] * grad
        lam = np.where(active, 1.0, 0.0)
        for _ in range(30):
            y_new = y - lam[:, None] * step
            phi_new, _ = level_set(y_new)
            worse = active & (np.abs(phi_new) > np.abs(phi))
            if not worse.any():
                break
            lam[worse] *= 0.5
        y = y_new
    phi, _ = level_set(y)
    node = int(np.argmax(np.abs(phi)))
    raise MeshError(f"implicit projection stalled at node {node}: |phi| = {abs(phi[node]):.3e}")


# ---------------------------------------------------------------------------
# file formats


def write_off(path, mesh: SurfaceMesh) -> None:
    """Write a degree-1 mesh in the OFF format."""
    if mesh.degree != 1:
        raise MeshError("OFF stores flat triangles; use the surface text format for degree 2")
    pts = mesh.node_coordinates()
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_nodes} {mesh.num_elements} 0\n")
        for p in pts:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))
        for el in mesh.elements:
            fh.write("3 %d %d %d\n" % tuple(el))


def read_off(path, validate: bool = True) -> SurfaceMesh:
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    cursor = 4
    pts = np.array(tokens[cursor : cursor + 3 * nv], dtype=float).reshape(nv, 3)
    cursor += 3 * nv
    elements = []
    for _ in range(nf):
        n = int(tokens[cursor])
        if n != 3:
            raise MeshError(f"{path}: only triangles are supported, got a {n}-gon")
        elements.append([int(t) for t in tokens[cursor + 1 : cursor + 4]])
        cursor += n + 1
    return SurfaceMesh(
        degree=1,
        elements=np.array(elements, dtype=np.int64),
        positions=as_vector(pts),
        validate=validate,
    )


def write_surface_text(path, mesh: SurfaceMesh) -> None:
    """Write a mesh of either degree in the package's plain text format."""
    pts = mesh.node_coordinates()
    with open(path, "w") as fh:
        fh.write("# evolvefem surface mesh\n")
        fh.write(f"degree {mesh.degree}\n")
        fh.write(f"nodes {mesh.num_nodes}\n")
        for p in pts:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))
        fh.write(f"elements {mesh.num_elements}\n")
        for el in mesh.elements:
            fh.write(" ".join(str(int(i)) for i in el) + "\n")


def read_surface_text(path, validate: bool = True) -> SurfaceMesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    try:
        degree = int(lines[0].split()[1])
        nv = int(lines[1].split()[1])
        pts = np.array([ln.split() for ln in lines[2 : 2 + nv]], dtype=float)
        ne = int(lines[2 + nv].split()[1])
        elements = np.array([ln.split() for ln in lines[3 + nv : 3 + nv + ne]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: malformed surface text file: {exc}") from exc
    return SurfaceMesh(degree=degree, elements=elements, positions=as_vector(pts), validate=validate)
