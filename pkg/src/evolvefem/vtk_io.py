"""Legacy ASCII VTK emission of surface snapshots, plus a strict reader.

Unstructured grids with cell type 5 (linear triangle) or 22 (quadratic
triangle); quadratic connectivity is reordered from the mesh-local layout
(vertices first, then the edge node opposite each vertex) to the VTK layout
(vertices, then midpoints of edges 01, 12, 20).  Coordinates and fields are
printed with %.17g so files are byte-reproducible and round-trip doubles
exactly.  The reader checks the format strictly and is the reference used by
the tests; it returns data exactly as stored in the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceMesh, as_points

VTK_TRIANGLE = 5
VTK_QUADRATIC_TRIANGLE = 22

#: mesh-local column order producing VTK node order, per element degree
_VTK_COLUMNS = {1: (0, 1, 2), 2: (0, 1, 2, 5, 3, 4)}
_NODES_PER_TYPE = {VTK_TRIANGLE: 3, VTK_QUADRATIC_TRIANGLE: 6}


class VTKError(ValueError):
    """Malformed or unsupported VTK content."""


def series_path(directory, index: int, prefix: str = "surface"):
    """File name of snapshot ``index`` in a VTK series, e.g. surface_000013.vtk."""
    from pathlib import Path

    return Path(directory) / f"{prefix}_{index:06d}.vtk"


def write_vtk(path, mesh: SurfaceMesh, positions=None, velocity=None, u=None,
              title: str = "evolvefem surface") -> None:
    """Write one surface snapshot as a legacy ASCII unstructured grid.

    ``positions`` (component-major, defaults to the mesh's own) define the
    written geometry; ``velocity`` (component-major) and ``u`` (nodal scalars)
    become POINT_DATA fields named "velocity" and "u".
    """
    pts = as_points(mesh.positions if positions is None else positions)
    cell_type = VTK_TRIANGLE if mesh.degree == 1 else VTK_QUADRATIC_TRIANGLE
    cells = mesh.elements[:, _VTK_COLUMNS[mesh.degree]]
    nloc = cells.shape[1]
    if "\n" in title:
        raise VTKError("VTK titles are single-line")

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.num_nodes} double\n")
        for p in pts:
            fh.write("%.17g %.17g %.17g\n" % tuple(p))
        fh.write(f"CELLS {mesh.num_elements} {mesh.num_elements * (nloc + 1)}\n")
        for el in cells:
            fh.write(str(nloc) + " " + " ".join(str(int(i)) for i in el) + "\n")
        fh.write(f"CELL_TYPES {mesh.num_elements}\n")
        for _ in range(mesh.num_elements):
            fh.write(f"{cell_type}\n")

        if velocity is None and u is None:
            return
        fh.write(f"POINT_DATA {mesh.num_nodes}\n")
        if velocity is not None:
            vel = as_points(velocity)
            if vel.shape[0] != mesh.num_nodes:
                raise VTKError("velocity field does not match the node count")
            fh.write("VECTORS velocity double\n")
            for v in vel:
                fh.write("%.17g %.17g %.17g\n" % tuple(v))
        if u is not None:
            u = np.asarray(u, dtype=float)
            if u.shape != (mesh.num_nodes,):
                raise VTKError("scalar field does not match the node count")
            fh.write("SCALARS u double 1\n")
            fh.write("LOOKUP_TABLE default\n")
            for value in u:
                fh.write("%.17g\n" % value)


@dataclass
class VTKGrid:
    """Contents of one unstructured-grid file, in file order."""

    points: np.ndarray
    cells: np.ndarray
    cell_types: np.ndarray
    point_data: dict = field(default_factory=dict)


class _Tokens:
    """Token cursor that reports the file position of format errors."""

    def __init__(self, path):
        with open(path) as fh:
            self.lines = fh.read().splitlines()
        self.path = path
        self.row = 0
        self.buffer = []

    def line(self) -> str:
        while self.row < len(self.lines):
            text = self.lines[self.row]
            self.row += 1
            if text.strip():
                return text.strip()
        raise VTKError(f"{self.path}: unexpected end of file")

    def peek_line(self):
        row = self.row
        try:
            text = self.line()
        except VTKError:
            return None
        self.row = row
        return text

    def floats(self, count: int) -> np.ndarray:
        out = np.empty(count)
        filled = 0
        while filled < count:
            if not self.buffer:
                self.buffer = self.line().split()
            take = min(count - filled, len(self.buffer))
            try:
                out[filled : filled + take] = [float(t) for t in self.buffer[:take]]
            except ValueError as exc:
                raise VTKError(f"{self.path}:{self.row}: bad number: {exc}") from exc
            del self.buffer[:take]
            filled += take
        return out

    def ints(self, count: int) -> np.ndarray:
        values = self.floats(count)
        out = values.astype(np.int64)
        if np.any(out != values):
            raise VTKError(f"{self.path}:{self.row}: expected integers")
        return out


def read_vtk(path) -> VTKGrid:
    """Parse a legacy ASCII unstructured-grid file, validating the format."""
    tok = _Tokens(path)
    if not tok.line().startswith("# vtk DataFile Version"):
        raise VTKError(f"{path}: missing VTK header")
    tok.line()  # title, free text
    if tok.line().upper() != "ASCII":
        raise VTKError(f"{path}: only ASCII files are supported")
    dataset = tok.line().split()
    if dataset[:2] != ["DATASET", "UNSTRUCTURED_GRID"]:
        raise VTKError(f"{path}: expected DATASET UNSTRUCTURED_GRID")

    header = tok.line().split()
    if header[0] != "POINTS" or header[2] not in ("double", "float"):
        raise VTKError(f"{path}: malformed POINTS header")
    n_points = int(header[1])
    points = tok.floats(3 * n_points).reshape(n_points, 3)

    header = tok.line().split()
    if header[0] != "CELLS":
        raise VTKError(f"{path}: malformed CELLS header")
    n_cells, list_size = int(header[1]), int(header[2])
    flat = tok.ints(list_size)
    cells, cursor = [], 0
    for _ in range(n_cells):
        count = int(flat[cursor])
        row = flat[cursor + 1 : cursor + 1 + count]
        if row.size != count or (row.size and (row.min() < 0 or row.max() >= n_points)):
            raise VTKError(f"{path}: cell references a point out of range")
        cells.append(row)
        cursor += count + 1
    if cursor != list_size:
        raise VTKError(f"{path}: CELLS list size does not match its header")

    header = tok.line().split()
    if header[0] != "CELL_TYPES" or int(header[1]) != n_cells:
        raise VTKError(f"{path}: malformed CELL_TYPES header")
    cell_types = tok.ints(n_cells)
    for ct, cell in zip(cell_types, cells):
        expected = _NODES_PER_TYPE.get(int(ct))
        if expected is None:
            raise VTKError(f"{path}: unsupported cell type {ct}")
        if cell.size != expected:
            raise VTKError(f"{path}: cell type {ct} needs {expected} nodes, got {cell.size}")
    sizes = {c.size for c in cells}
    grid = VTKGrid(
        points=points,
        cells=np.array(cells) if len(sizes) <= 1 else np.array(cells, dtype=object),
        cell_types=cell_types,
    )

    if tok.peek_line() is None:
        return grid
    header = tok.line().split()
    if header[0] != "POINT_DATA" or int(header[1]) != n_points:
        raise VTKError(f"{path}: malformed POINT_DATA header")
    while (line := tok.peek_line()) is not None:
        header = tok.line().split()
        if header[0] == "VECTORS":
            if len(header) != 3:
                raise VTKError(f"{path}: malformed VECTORS header: {line}")
            grid.point_data[header[1]] = tok.floats(3 * n_points).reshape(n_points, 3)
        elif header[0] == "SCALARS":
            if len(header) not in (3, 4) or (len(header) == 4 and header[3] != "1"):
                raise VTKError(f"{path}: malformed SCALARS header: {line}")
            if tok.line().split()[0] != "LOOKUP_TABLE":
                raise VTKError(f"{path}: SCALARS must be followed by a LOOKUP_TABLE")
            grid.point_data[header[1]] = tok.floats(n_points)
        else:
            raise VTKError(f"{path}: unsupported point-data attribute {header[0]}")
    return grid
