"""Periodic cell problems and tabulated effective tensors.

The corrector problems are posed on the unit cell with periodic node
identification; the effective tensor uses the energy form, which is
symmetric up to solver tolerance because the discrete correctors satisfy
the discrete variational equations exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshIdentificationError, ParameterRangeError
from .fem import StiffnessAssembler, TensorField
from .meshing import TriMesh, build_structured_mesh


@dataclass(eq=False)
class CellMesh:
    """Unit-cell triangulation with periodic node identification."""

    mesh: TriMesh
    fold: np.ndarray        # node index -> periodic unknown index
    n_dofs: int

    @property
    def n_cell(self) -> int:
        return self.mesh.n


def build_cell_mesh(n_cell: int) -> CellMesh:
    mesh = build_structured_mesh(n_cell)
    n = n_cell
    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    rep_x = np.mod(ix, n)
    rep_y = np.mod(iy, n)
    fold = (rep_y * n + rep_x).ravel()
    return CellMesh(mesh=mesh, fold=fold, n_dofs=n * n)


def _fold_matrix(cell: CellMesh) -> sp.csr_matrix:
    n_nodes = cell.mesh.n_nodes
    return sp.csr_matrix((np.ones(n_nodes), (np.arange(n_nodes), cell.fold)),
                         shape=(n_nodes, cell.n_dofs))


def _cell_mean(cell: CellMesh, nodal: np.ndarray) -> float:
    # exact integral of a P1 field over the unit cell
    area = cell.mesh.geometry()["area"]
    return float(np.einsum("t,tk->", area / 3.0, nodal[cell.mesh.triangles]))


class CellProblem:
    """Both correctors of one cell tensor, sharing the factorization."""

    def __init__(self, A_cell: TensorField, cell: CellMesh, quad_order: int = 2,
                 assembler: StiffnessAssembler | None = None):
        self.cell = cell
        self.assembler = assembler or StiffnessAssembler(cell.mesh, quad_order)
        self.tensor_values = self.assembler.tensor_at_quadrature(A_cell)
        K = self.assembler.assemble(tensor_values=self.tensor_values)
        P = _fold_matrix(cell)
        Kp = (P.T @ K @ P).tolil()
        # pin unknown 0; the folded operator has exactly a constant kernel
        Kp[0, :] = 0.0
        Kp[:, 0] = 0.0
        Kp[0, 0] = 1.0
        self._P = P
        self._lu = spla.splu(Kp.tocsc())
        # weighted quadrature average of the tensor per triangle
        self._abar = np.einsum("q,tqij->tij", self.assembler.weights,
                               self.tensor_values)

    def corrector(self, direction: int) -> np.ndarray:
        """Mean-zero periodic corrector for unit slope e_direction,
        returned as nodal values on the full cell mesh."""
        if direction not in (0, 1):
            raise ValueError("direction must be 0 or 1")
        grads = self.assembler.grads
        area = self.assembler.area
        e = np.zeros(2)
        e[direction] = 1.0
        # rhs_i = -int_Y A e_d . grad phi_i
        fe = -np.einsum("tde,e,tid,t->ti", self._abar, e, grads, area)
        rhs_full = np.zeros(self.cell.mesh.n_nodes)
        np.add.at(rhs_full, self.cell.mesh.triangles.ravel(), fe.ravel())
        rhs = self._P.T @ rhs_full
        rhs[0] = 0.0
        chi = self._lu.solve(rhs)
        if not np.all(np.isfinite(chi)):
            raise MeshIdentificationError(
                "cell solve produced non-finite values; identification "
                "left a larger null space")
        nodal = self._P @ chi
        return nodal - _cell_mean(self.cell, nodal)

    def effective_tensor(self) -> np.ndarray:
        grads = self.assembler.grads
        area = self.assembler.area
        tri = self.cell.mesh.triangles
        # corrected gradients e_j + grad chi_j, constant per triangle
        fields = np.empty((2, grads.shape[0], 2))
        for j in range(2):
            chi = self.corrector(j)
            g = np.einsum("tk,tkd->td", chi[tri], grads)
            g[:, j] += 1.0
            fields[j] = g
        out = np.einsum("itd,tde,jte,t->ij", fields, self._abar, fields, area)
        return 0.5 * (out + out.T)


def solve_cell_problem(A_cell: TensorField, cell: CellMesh, direction: int,
                       quad_order: int = 2) -> np.ndarray:
    """Nodal corrector for one coordinate direction."""
    return CellProblem(A_cell, cell, quad_order).corrector(direction)


def effective_tensor(A_cell: TensorField, cell: CellMesh, quad_order: int = 2) -> np.ndarray:
    """Homogenized 2x2 tensor of a periodic cell coefficient."""
    return CellProblem(A_cell, cell, quad_order).effective_tensor()


class HomogenizedMap:
    """Piecewise-linear interpolation of effective tensors over a scalar
    parameter.  Queries outside the tabulated range raise; grid values
    are reproduced exactly."""

    def __init__(self, grid: np.ndarray, tensors: np.ndarray):
        grid = np.asarray(grid, dtype=float)
        tensors = np.asarray(tensors, dtype=float)
        if grid.ndim != 1 or tensors.shape != (grid.size, 2, 2):
            raise ValueError("grid (G,) and tensors (G, 2, 2) required")
        if grid.size > 1 and np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        self.grid = grid
        self.tensors = tensors

    @property
    def lo(self) -> float:
        return float(self.grid[0])

    @property
    def hi(self) -> float:
        return float(self.grid[-1])

    def __call__(self, t) -> np.ndarray:
        tt = np.asarray(t, dtype=float)
        scalar = tt.ndim == 0
        tt = np.atleast_1d(tt)
        if tt.size and (tt.min() < self.lo or tt.max() > self.hi):
            bad = tt[(tt < self.lo) | (tt > self.hi)][0]
            raise ParameterRangeError(bad, self.lo, self.hi, "homogenized map")
        if self.grid.size == 1:
            out = np.broadcast_to(self.tensors[0], (tt.size, 2, 2)).copy()
        else:
            pos = np.clip(np.searchsorted(self.grid, tt, side="right") - 1,
                          0, self.grid.size - 2)
            t0 = self.grid[pos]
            w = (tt - t0) / (self.grid[pos + 1] - t0)
            exact = tt == t0
            w = np.where(exact, 0.0, w)[:, None, None]
            out = (1.0 - w) * self.tensors[pos] + w * self.tensors[pos + 1]
        return out[0] if scalar else out

    def as_tensor_field(self, sigma_of_x: Callable) -> TensorField:
        """Macroscale tensor field x -> A0(sigma(x))."""
        return TensorField(lambda pts: self(np.asarray(sigma_of_x(pts))))

    def export_csv(self, path) -> int:
        """Write rows t,a11,a12,a22; returns the row count."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "a11", "a12", "a22"])
            for t, a in zip(self.grid, self.tensors):
                wr.writerow([repr(float(t)), repr(float(a[0, 0])),
                             repr(float(a[0, 1])), repr(float(a[1, 1]))])
        return self.grid.size

    @classmethod
    def from_csv(cls, path) -> "HomogenizedMap":
        grid, tensors = [], []
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if header != ["t", "a11", "a12", "a22"]:
                raise ValueError(f"unexpected header {header}")
            for row in rd:
                t, a11, a12, a22 = map(float, row)
                grid.append(t)
                tensors.append([[a11, a12], [a12, a22]])
        return cls(np.array(grid), np.array(tensors))


def build_homogenized_map(tensor_family: Callable[[float], TensorField],
                          t_lo: float, t_hi: float, n_grid: int,
                          cell: CellMesh, quad_order: int = 2) -> HomogenizedMap:
    """Tabulate effective tensors of a parametrized cell coefficient.

    Parameters
    ----------
    tensor_family : callable
        Maps the scalar parameter t to the periodic cell tensor A(t, .).
    t_lo, t_hi : float
        Tabulation range (inclusive).
    n_grid : int
        Number of grid points; 1 gives a constant map over [t_lo, t_hi].
    """
    if n_grid < 1:
        raise ValueError("n_grid must be >= 1")
    if t_hi < t_lo:
        raise ValueError("t_hi must be >= t_lo")
    assembler = StiffnessAssembler(cell.mesh, quad_order)
    if n_grid == 1:
        # constant map, valid on the whole requested range
        a0 = CellProblem(tensor_family(float(t_lo)), cell,
                         assembler=assembler).effective_tensor()
        if t_hi > t_lo:
            return HomogenizedMap(np.array([t_lo, t_hi]), np.stack([a0, a0]))
        return HomogenizedMap(np.array([t_lo]), a0[None])
    grid = np.linspace(t_lo, t_hi, n_grid)
    tensors = np.empty((n_grid, 2, 2))
    for i, t in enumerate(grid):
        tensors[i] = CellProblem(tensor_family(float(t)), cell,
                                 assembler=assembler).effective_tensor()
    return HomogenizedMap(grid, tensors)


def voigt_reuss_bounds(A_cell: TensorField, cell: CellMesh,
                       quad_order: int = 2) -> tuple[float, float]:
    """Harmonic/arithmetic-mean bounds on the effective eigenvalues,
    computed from the eigenvalue field at quadrature points."""
    assembler = StiffnessAssembler(cell.mesh, quad_order)
    vals = assembler.tensor_at_quadrature(A_cell)
    flat = vals.reshape(-1, 2, 2)
    eigs = np.linalg.eigvalsh(flat)
    wq = (assembler.area[:, None] * assembler.weights[None, :]).ravel()
    wq = wq / wq.sum()
    lower = 1.0 / float(np.sum(wq / eigs[:, 0]))
    upper = float(np.sum(wq * eigs[:, 1]))
    return lower, upper
