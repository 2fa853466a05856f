"""Deterministic structured meshes: intervals, squares, and annuli.

All meshes are simplicial (segments in 1D, positively oriented triangles in
2D), carry marked boundary facets, and report the characteristic size h as
the longest edge over all cells.  Construction is reproducible: node and
cell numbering follow fixed conventions (x-fastest for squares, angle-fastest
for annuli, square diagonals always lower-left to upper-right).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class BoundaryMarker(str, enum.Enum):
    ALL = "All"
    OUTER = "Outer"
    INNER = "Inner"


@dataclass(frozen=True)
class Mesh:
    """Simplicial mesh with marked boundary facets.

    Attributes
    ----------
    dim : 1 or 2
    nodes : (n_nodes, dim) float array
    cells : (n_cells, dim+1) int array; triangles positively oriented
    facets : (n_facets, dim) int array of boundary facet node indices
    facet_markers : list of BoundaryMarker, one per facet
    h : longest edge length over all cells
    """

    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_markers: list
    structure: tuple = None  # generator metadata, enables analytic point location
    h: float = field(init=False)

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.cells.setflags(write=False)
        self.facets.setflags(write=False)
        object.__setattr__(self, "h", float(edge_lengths(self).max()))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def facets_with_marker(self, marker: BoundaryMarker) -> np.ndarray:
        idx = [i for i, m in enumerate(self.facet_markers) if m == marker]
        return self.facets[idx]

    def dump(self, path) -> None:
        """Plain-text dump: header `dim N_nodes N_cells N_facets`, then node,
        cell and facet lines (facet lines end with the marker name)."""
        with open(path, "w") as fh:
            fh.write(f"{self.dim} {self.n_nodes} {self.n_cells} {len(self.facets)}\n")
            for p in self.nodes:
                fh.write(" ".join(repr(float(c)) for c in p) + "\n")
            for c in self.cells:
                fh.write(" ".join(str(int(i)) for i in c) + "\n")
            for f, m in zip(self.facets, self.facet_markers):
                fh.write(" ".join(str(int(i)) for i in f) + f" {m.value}\n")


def cell_edges(mesh: Mesh) -> np.ndarray:
    """All cell edges as node index pairs, shape (n_cells*n_edges_per_cell, 2)."""
    c = mesh.cells
    if mesh.dim == 1:
        return c
    return np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [0, 2]]])


def edge_lengths(mesh: Mesh) -> np.ndarray:
    e = cell_edges(mesh)
    d = mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]
    return np.linalg.norm(d, axis=1)


def cell_measures(mesh: Mesh) -> np.ndarray:
    """Length (1D) or area (2D, signed-positive by orientation) per cell."""
    p = mesh.nodes[mesh.cells]
    if mesh.dim == 1:
        return np.abs(p[:, 1, 0] - p[:, 0, 0])
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    return 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])


def build_interval_mesh(N: int, a: float = 0.0, b: float = 1.0) -> Mesh:
    """N equispaced nodes on [a, b], N-1 segments, h = (b-a)/(N-1)."""
    if N < 2:
        raise ValueError(f"need at least 2 nodes, got N={N}")
    if not a < b:
        raise ValueError(f"degenerate interval [{a}, {b}]")
    nodes = np.linspace(a, b, N).reshape(-1, 1)
    cells = np.stack([np.arange(N - 1), np.arange(1, N)], axis=1)
    facets = np.array([[0], [N - 1]])
    return Mesh(1, nodes, cells, facets, [BoundaryMarker.ALL, BoundaryMarker.ALL],
                ("interval", float(a), float(b), N))


def build_square_mesh(
    N: int,
    x_min: float = 0.0,
    x_max: float = 1.0,
    y_min: float = 0.0,
    y_max: float = 1.0,
) -> Mesh:
    """Cartesian N x N grid split into 2(N-1)^2 triangles.

    Nodes are numbered x-fastest; every cell is split along its lower-left to
    upper-right diagonal; h is the cell diagonal.
    """
    if N < 2:
        raise ValueError(f"need at least 2 nodes per side, got N={N}")
    if not (x_min < x_max and y_min < y_max):
        raise ValueError("degenerate bounds")
    xs = np.linspace(x_min, x_max, N)
    ys = np.linspace(y_min, y_max, N)
    X, Y = np.meshgrid(xs, ys)  # Y slow, X fast
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    ix = np.tile(np.arange(N - 1), N - 1)  # quad order: x fastest
    iy = np.repeat(np.arange(N - 1), N - 1)
    ll = iy * N + ix
    lr = ll + 1
    ul = ll + N
    ur = ul + 1
    cells = np.empty((2 * (N - 1) ** 2, 3), dtype=np.int64)
    cells[0::2] = np.stack([ll, lr, ur], axis=1)  # below the ll-ur diagonal
    cells[1::2] = np.stack([ll, ur, ul], axis=1)

    facets = []
    for i in range(N - 1):
        facets.append((i, i + 1))  # bottom
        facets.append((N * (N - 1) + i, N * (N - 1) + i + 1))  # top
        facets.append((i * N, (i + 1) * N))  # left
        facets.append((i * N + N - 1, (i + 1) * N + N - 1))  # right
    facets = np.array(facets)
    markers = [BoundaryMarker.ALL] * len(facets)
    return Mesh(2, nodes, cells, facets, markers,
                ("square", float(x_min), float(x_max), float(y_min), float(y_max), N))


def build_annulus_mesh(n_r: int, n_t: int, r_in: float, r_out: float) -> Mesh:
    """Polar tensor grid on the annulus r_in <= r <= r_out, polygonal boundary.

    n_r equispaced radii, n_t equispaced angles with periodic wrap; nodes are
    numbered angle-fastest.  Facets on the innermost ring are marked Inner,
    on the outermost Outer.
    """
    if n_r < 2:
        raise ValueError(f"need at least 2 radial nodes, got n_r={n_r}")
    if n_t < 3:
        raise ValueError(f"need at least 3 angular nodes, got n_t={n_t}")
    if not 0 < r_in < r_out:
        raise ValueError(f"invalid radii ({r_in}, {r_out})")
    radii = np.linspace(r_in, r_out, n_r)
    theta = 2.0 * np.pi * np.arange(n_t) / n_t
    R, T = np.meshgrid(radii, theta, indexing="ij")  # radius slow, angle fast
    nodes = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=1)

    cells = []
    for ir in range(n_r - 1):
        for it in range(n_t):
            a = ir * n_t + it
            b = ir * n_t + (it + 1) % n_t
            c = (ir + 1) * n_t + it
            d = (ir + 1) * n_t + (it + 1) % n_t
            cells.append((a, d, b))  # both triangles share diagonal a-d
            cells.append((a, c, d))
    cells = np.array(cells)

    facets, markers = [], []
    for it in range(n_t):
        facets.append((it, (it + 1) % n_t))
        markers.append(BoundaryMarker.INNER)
    base = (n_r - 1) * n_t
    for it in range(n_t):
        facets.append((base + it, base + (it + 1) % n_t))
        markers.append(BoundaryMarker.OUTER)
    mesh = Mesh(2, nodes, np.array(cells), np.array(facets), markers,
                ("annulus", n_r, n_t, float(r_in), float(r_out)))
    if np.any(cell_measures(mesh) <= 0):
        raise ValueError("negative cell orientation in annulus construction")
    return mesh
