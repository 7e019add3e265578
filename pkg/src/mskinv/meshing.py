"""Structured P1 triangulations of the unit square.

Nodes are laid out row-major on an (n+1) x (n+1) grid; each grid cell is
split along the diagonal from its lower-left to its upper-right corner,
giving 2*n^2 positively oriented triangles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

SIDES = ("bottom", "right", "top", "left")


@dataclass(frozen=True)
class BoundaryEdge:
    """One boundary edge: node pair, side label and the parameter range
    of the side coordinate it covers (x1 on bottom/top, x2 on left/right)."""

    nodes: tuple[int, int]
    side: str
    span: tuple[float, float]


@dataclass(eq=False)
class TriMesh:
    """Triangulation of [0,1]^2 with uniform mesh width 1/n."""

    n: int
    nodes: np.ndarray          # (N, 2) coordinates
    triangles: np.ndarray      # (T, 3) node indices, counterclockwise
    boundary_nodes: np.ndarray  # sorted indices
    boundary_edges: list[BoundaryEdge]
    _geom: dict = field(default_factory=dict, repr=False)

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.nonzero(mask)[0]

    def side_nodes(self, side: str) -> tuple[np.ndarray, np.ndarray]:
        """Node indices on one side and their side parameter, sorted by parameter.

        Corners belong to both adjacent sides.
        """
        n = self.n
        if side == "bottom":
            idx = np.arange(n + 1)
        elif side == "top":
            idx = n * (n + 1) + np.arange(n + 1)
        elif side == "left":
            idx = np.arange(n + 1) * (n + 1)
        elif side == "right":
            idx = np.arange(n + 1) * (n + 1) + n
        else:
            raise ValueError(f"unknown side {side!r}")
        params = np.arange(n + 1) / n
        return idx, params

    # geometry used by assembly, computed once
    def geometry(self) -> dict:
        if not self._geom:
            tri = self.nodes[self.triangles]           # (T, 3, 2)
            e1 = tri[:, 1] - tri[:, 0]
            e2 = tri[:, 2] - tri[:, 0]
            det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
            area = 0.5 * det
            # gradients of the three barycentric functions, (T, 3, 2)
            grads = np.empty((tri.shape[0], 3, 2))
            grads[:, 1, 0] = e2[:, 1] / det
            grads[:, 1, 1] = -e2[:, 0] / det
            grads[:, 2, 0] = -e1[:, 1] / det
            grads[:, 2, 1] = e1[:, 0] / det
            grads[:, 0] = -grads[:, 1] - grads[:, 2]
            self._geom = {"area": area, "grads": grads, "corners": tri}
        return self._geom


def build_structured_mesh(n: int) -> TriMesh:
    """Uniform triangulation of the unit square with n subdivisions per side.

    Parameters
    ----------
    n : int
        Number of cells per side, n >= 1.
    """
    if n < 1:
        raise ValueError(f"subdivision count must be >= 1, got {n}")
    n = int(n)
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(ix, iy):
        return iy * (n + 1) + ix

    ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ix = ix.ravel()
    iy = iy.ravel()
    v00 = nid(ix, iy)
    v10 = nid(ix + 1, iy)
    v01 = nid(ix, iy + 1)
    v11 = nid(ix + 1, iy + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.vstack([lower, upper])

    bmask = np.zeros((n + 1) * (n + 1), dtype=bool)
    bmask[nid(np.arange(n + 1), 0)] = True
    bmask[nid(np.arange(n + 1), n)] = True
    bmask[nid(0, np.arange(n + 1))] = True
    bmask[nid(n, np.arange(n + 1))] = True
    boundary_nodes = np.nonzero(bmask)[0]

    edges: list[BoundaryEdge] = []
    for i in range(n):
        t0, t1 = i / n, (i + 1) / n
        edges.append(BoundaryEdge((nid(i, 0), nid(i + 1, 0)), "bottom", (t0, t1)))
    for i in range(n):
        t0, t1 = i / n, (i + 1) / n
        edges.append(BoundaryEdge((nid(n, i), nid(n, i + 1)), "right", (t0, t1)))
    for i in range(n):
        t0, t1 = i / n, (i + 1) / n
        edges.append(BoundaryEdge((nid(i, n), nid(i + 1, n)), "top", (t0, t1)))
    for i in range(n):
        t0, t1 = i / n, (i + 1) / n
        edges.append(BoundaryEdge((nid(0, i), nid(0, i + 1)), "left", (t0, t1)))

    return TriMesh(n=n, nodes=nodes, triangles=triangles,
                   boundary_nodes=boundary_nodes, boundary_edges=edges)


def locate(mesh: TriMesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric weights for points in [0,1]^2.

    Returns (tri_index (P,), weights (P,3)) with weights ordered like the
    triangle's node columns.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < -1e-12) or np.any(pts > 1.0 + 1e-12):
        bad = pts[np.any((pts < -1e-12) | (pts > 1 + 1e-12), axis=1)][0]
        raise ValueError(f"point {bad} outside the unit square")
    pts = np.clip(pts, 0.0, 1.0)
    n = mesh.n
    cx = np.minimum((pts[:, 0] * n).astype(int), n - 1)
    cy = np.minimum((pts[:, 1] * n).astype(int), n - 1)
    lx = pts[:, 0] * n - cx
    ly = pts[:, 1] * n - cy
    cell = cy * n + cx
    in_lower = ly <= lx
    tri = np.where(in_lower, cell, cell + n * n)
    w = np.empty((pts.shape[0], 3))
    # lower triangle (v00, v10, v11): weights (1-lx, lx-ly, ly)
    w[in_lower, 0] = 1.0 - lx[in_lower]
    w[in_lower, 1] = lx[in_lower] - ly[in_lower]
    w[in_lower, 2] = ly[in_lower]
    up = ~in_lower
    # upper triangle (v00, v11, v01): weights (1-ly, lx, ly-lx)
    w[up, 0] = 1.0 - ly[up]
    w[up, 1] = lx[up]
    w[up, 2] = ly[up] - lx[up]
    return tri, w


def interpolation_matrix(mesh: TriMesh, points: np.ndarray) -> sp.csr_matrix:
    """Sparse operator taking nodal values to point values by P1 interpolation."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri, w = locate(mesh, pts)
    rows = np.repeat(np.arange(pts.shape[0]), 3)
    cols = mesh.triangles[tri].ravel()
    return sp.csr_matrix((w.ravel(), (rows, cols)),
                         shape=(pts.shape[0], mesh.n_nodes))
