"""Mesh construction, P1 assembly, Dirichlet solves and flux extraction."""

import numpy as np
import pytest
from scipy.sparse.linalg import splu

from mskinv.errors import EllipticityError, MisalignmentError
from mskinv.fem import (FluxProbe, StiffnessAssembler, TensorField,
                        assemble_stiffness, constant_tensor, diagonal_tensor,
                        flux_observation, identity_tensor, isotropic_tensor,
                        l2_error, probe_weights, quadrature_points,
                        segment_alignment, solve_dirichlet)
from mskinv.meshing import build_structured_mesh, interpolation_matrix, locate


# ---------------------------------------------------------------- meshing

def test_mesh_counts():
    for n in (1, 2, 7, 16):
        mesh = build_structured_mesh(n)
        assert mesh.n_nodes == (n + 1) ** 2
        assert len(mesh.triangles) == 2 * n * n
        assert len(mesh.boundary_edges) == 4 * n
        assert len(mesh.boundary_nodes) == 4 * n


def test_mesh_rejects_bad_n():
    with pytest.raises(ValueError):
        build_structured_mesh(0)
    with pytest.raises(ValueError):
        build_structured_mesh(-3)


def test_triangles_positively_oriented_and_cover_square():
    mesh = build_structured_mesh(9)
    p = mesh.nodes[mesh.triangles]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(cross > 0)
    assert np.isclose(0.5 * cross.sum(), 1.0)


def test_edges_conforming():
    # every interior edge is shared by exactly two triangles, boundary by one
    mesh = build_structured_mesh(5)
    edges = {}
    for tri in mesh.triangles:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = tuple(sorted((tri[a], tri[b])))
            edges[key] = edges.get(key, 0) + 1
    boundary = {tuple(sorted(e.nodes)) for e in mesh.boundary_edges}
    for key, count in edges.items():
        assert count == (1 if key in boundary else 2)
    assert boundary <= set(edges)


def test_side_nodes_parametrization():
    mesh = build_structured_mesh(4)
    idx, params = mesh.side_nodes("bottom")
    assert np.allclose(mesh.nodes[idx, 1], 0.0)
    assert np.allclose(params, np.linspace(0, 1, 5))
    idx, params = mesh.side_nodes("left")
    assert np.allclose(mesh.nodes[idx, 0], 0.0)
    assert np.allclose(mesh.nodes[idx, 1], params)


def test_locate_roundtrip():
    mesh = build_structured_mesh(8)
    rng = np.random.default_rng(3)
    pts = rng.random((200, 2))
    cells, weights = locate(mesh, pts)
    rebuilt = np.einsum("pk,pkd->pd", weights, mesh.nodes[mesh.triangles[cells]])
    assert np.allclose(rebuilt, pts, atol=1e-12)
    assert np.allclose(weights.sum(axis=1), 1.0)
    assert np.all(weights >= -1e-12)


def test_interpolation_matrix_reproduces_linears():
    mesh = build_structured_mesh(6)
    pts = np.random.default_rng(0).random((50, 2))
    P = interpolation_matrix(mesh, pts)
    for f in (lambda x: x[:, 0], lambda x: 2.0 - x[:, 1], lambda x: x.sum(axis=1)):
        assert np.allclose(P @ f(mesh.nodes), f(pts), atol=1e-12)


# ---------------------------------------------------------------- assembly

def test_laplacian_stencil_n2():
    # five-point stencil row of the single interior node at (1/2, 1/2)
    mesh = build_structured_mesh(2)
    K = assemble_stiffness(mesh, identity_tensor).toarray()
    assert np.allclose(K[4], [0, -1, 0, -1, 4, -1, 0, -1, 0])


def test_stiffness_symmetric_psd_with_constant_kernel():
    mesh = build_structured_mesh(5)
    A = constant_tensor([[2.0, 0.3], [0.3, 1.0]])
    K = assemble_stiffness(mesh, A)
    assert np.allclose((K - K.T).toarray(), 0.0, atol=1e-14)
    assert np.allclose(K @ np.ones(mesh.n_nodes), 0.0, atol=1e-13)
    w = np.linalg.eigvalsh(K.toarray())
    assert w.min() > -1e-12


@pytest.mark.parametrize("quad_order", [1, 2, 3])
def test_quadrature_integrates_affine(quad_order):
    # rule weights are barycentric: scale by triangle areas to integrate
    mesh = build_structured_mesh(3)
    pts, _, wts = quadrature_points(mesh, quad_order)
    area = mesh.geometry()["area"]
    for f, val in ((lambda x: np.ones(x.shape[:-1]), 1.0),
                   (lambda x: x[..., 0], 0.5),
                   (lambda x: x[..., 0] - 3 * x[..., 1], -1.0)):
        approx = np.einsum("t,q,tq->", area, wts, f(pts))
        assert np.isclose(approx, val, atol=1e-13)


@pytest.mark.parametrize("quad_order,degree_ok", [(2, 2), (3, 3)])
def test_quadrature_exact_for_higher_degree(quad_order, degree_ok):
    mesh = build_structured_mesh(2)
    pts, _, wts = quadrature_points(mesh, quad_order)
    area = mesh.geometry()["area"]
    f = (lambda x: x[..., 0] * x[..., 1]) if degree_ok == 2 else \
        (lambda x: x[..., 0] ** 2 * x[..., 1])
    val = 0.25 if degree_ok == 2 else 1 / 6
    approx = np.einsum("t,q,tq->", area, wts, f(pts))
    assert np.isclose(approx, val, atol=1e-13)


def test_assembler_reuse_matches_fresh_assembly():
    mesh = build_structured_mesh(6)
    asm = StiffnessAssembler(mesh, quad_order=2)
    A = diagonal_tensor(1.5, 0.5)
    pts, _, _ = quadrature_points(mesh, 2)
    vals = A(pts.reshape(-1, 2)).reshape(pts.shape[0], pts.shape[1], 2, 2)
    K1 = asm.assemble(tensor_values=vals)
    K2 = assemble_stiffness(mesh, A)
    assert np.allclose((K1 - K2).toarray(), 0.0, atol=1e-14)


def test_ellipticity_violation_reported_with_location():
    mesh = build_structured_mesh(4)
    bad = TensorField(lambda pts: np.tile(np.diag([1.0, -0.5]), (len(pts), 1, 1)))
    with pytest.raises(EllipticityError):
        assemble_stiffness(mesh, bad)


def test_asymmetric_tensor_rejected():
    mesh = build_structured_mesh(4)
    bad = TensorField(lambda pts: np.tile([[1.0, 0.4], [-0.4, 1.0]], (len(pts), 1, 1)))
    with pytest.raises(EllipticityError):
        assemble_stiffness(mesh, bad)


# ---------------------------------------------------------------- solving

def test_affine_solution_exact():
    """Constant tensor, zero source, affine data: P1 reproduces it exactly."""
    mesh = build_structured_mesh(12)
    sol = solve_dirichlet(mesh, constant_tensor([[3.0, 0.5], [0.5, 1.0]]),
                          f=0.0, g=lambda x: 2.0 * x[:, 0] - x[:, 1] + 0.25)
    exact = 2.0 * mesh.nodes[:, 0] - mesh.nodes[:, 1] + 0.25
    assert np.abs(sol.values - exact).max() < 1e-12


def test_discrete_maximum_principle():
    mesh = build_structured_mesh(10)
    g = lambda x: np.sin(3 * x[:, 0]) + x[:, 1]
    sol = solve_dirichlet(mesh, isotropic_tensor(2.0), f=0.0, g=g)
    gb = g(mesh.nodes[mesh.boundary_nodes])
    assert sol.values.min() >= gb.min() - 1e-12
    assert sol.values.max() <= gb.max() + 1e-12


def test_manufactured_convergence_rate():
    # p = sin(pi x) sin(pi y), A = diag(2, 1): f = 3 pi^2 p
    p_exact = lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    f = lambda x: 3 * np.pi ** 2 * p_exact(x)
    A = diagonal_tensor(2.0, 1.0)
    errs = []
    for n in (8, 16, 32):
        sol = solve_dirichlet(build_structured_mesh(n), A, f=f, g=0.0)
        errs.append(l2_error(sol, p_exact))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(rates > 1.8) and np.all(rates < 2.2)


def test_interior_residual_small():
    mesh = build_structured_mesh(20)
    A = constant_tensor([[1.0, 0.2], [0.2, 2.0]])
    sol = solve_dirichlet(mesh, A, f=1.0, g=0.0)
    K = assemble_stiffness(mesh, A)
    ii = mesh.interior_nodes
    res = (K @ sol.values - sol.load_vector)[ii]
    assert np.linalg.norm(res) <= 1e-10 * max(1.0, np.linalg.norm(sol.load_vector[ii]))


def test_solution_evaluate_matches_nodal():
    mesh = build_structured_mesh(8)
    sol = solve_dirichlet(mesh, identity_tensor, f=1.0, g=0.0)
    pts = mesh.nodes[[3, 17, 40]]
    assert np.allclose(sol.evaluate(pts), sol.values[[3, 17, 40]], atol=1e-13)


# ---------------------------------------------------------------- fluxes

def test_flux_unit_hat_linear_solution():
    """p = x1 through the identity tensor carries unit flux density across
    the right side, so a hat of integral 0.1 reads exactly 0.1."""
    mesh = build_structured_mesh(20)
    sol = solve_dirichlet(mesh, identity_tensor, f=0.0, g=lambda x: x[:, 0])
    probe = FluxProbe("right", 0.4, 0.6)
    val = flux_observation(sol, [probe])
    assert np.allclose(val, 0.1, atol=1e-12)


def test_flux_scales_with_tensor():
    mesh = build_structured_mesh(20)
    sol = solve_dirichlet(mesh, diagonal_tensor(2.0, 1.0), f=0.0,
                          g=lambda x: x[:, 0])
    val = flux_observation(sol, [FluxProbe("right", 0.4, 0.6)])
    assert np.allclose(val, 0.2, atol=1e-12)


def test_flux_linear_in_boundary_data():
    mesh = build_structured_mesh(16)
    A = constant_tensor([[2.0, 0.4], [0.4, 1.5]])
    g1 = lambda x: np.sin(2 * x[:, 0]) * x[:, 1]
    g2 = lambda x: x[:, 0] ** 2
    probes = [FluxProbe("top", 0.25, 0.5), FluxProbe("left", 0.5, 0.75)]
    f1 = flux_observation(solve_dirichlet(mesh, A, 0.0, g1), probes)
    f2 = flux_observation(solve_dirichlet(mesh, A, 0.0, g2), probes)
    both = flux_observation(
        solve_dirichlet(mesh, A, 0.0, lambda x: g1(x) + g2(x)), probes)
    assert np.allclose(both, f1 + f2, atol=1e-11)


def test_probe_weights_trace_mass_when_aligned():
    # hat supported on one side with nodes at both kinks: trapezoid trace
    # integral reproduces the profile mass width/2 exactly
    mesh = build_structured_mesh(10)
    w = probe_weights(FluxProbe("bottom", 0.2, 0.4), mesh)
    assert np.isclose(mesh.h * w.sum(), 0.1)


def test_segment_alignment_detection():
    mesh = build_structured_mesh(20)
    assert segment_alignment(FluxProbe("top", 0.4, 0.6), mesh)
    assert not segment_alignment(FluxProbe("top", 0.4, 0.55), mesh)
    mesh16 = build_structured_mesh(16)
    assert not segment_alignment(FluxProbe("top", 0.4, 0.6), mesh16)


def test_flux_alignment_enforcement():
    mesh = build_structured_mesh(16)
    sol = solve_dirichlet(mesh, identity_tensor, f=0.0, g=lambda x: x[:, 0])
    probe = FluxProbe("right", 0.4, 0.6)
    with pytest.raises(MisalignmentError):
        flux_observation(sol, [probe], require_aligned=True)
    # relaxed mode interpolates the hat onto the trace grid; for a unit
    # normal gradient the reading equals the interpolant's trapezoid mass,
    # here (1/16) * (0.375 + 1 + 0.375) with kinks falling off-node
    val = flux_observation(sol, [probe])
    assert np.isclose(val[0], 0.109375, atol=1e-12)


def test_flux_convergence_under_refinement():
    A = constant_tensor([[2.0, 0.3], [0.3, 1.0]])
    g = lambda x: np.sin(np.pi * x[:, 1]) + x[:, 0]
    probe = FluxProbe("right", 0.4, 0.6)
    vals = [flux_observation(solve_dirichlet(build_structured_mesh(n), A, 0.0, g),
                             [probe])[0]
            for n in (20, 40, 80)]
    assert abs(vals[1] - vals[2]) < abs(vals[0] - vals[1])


# ---------------------------------------------------------------- L2 error

def test_l2_error_zero_against_self():
    mesh = build_structured_mesh(6)
    sol = solve_dirichlet(mesh, identity_tensor, f=1.0, g=0.0)
    assert l2_error(sol, sol) < 1e-14


def test_l2_error_of_interpolated_linear_field():
    mesh = build_structured_mesh(6)
    sol = solve_dirichlet(mesh, identity_tensor, f=0.0,
                          g=lambda x: x[:, 0] + 2 * x[:, 1])
    assert l2_error(sol, lambda x: x[:, 0] + 2 * x[:, 1]) < 1e-12


def test_direct_factorization_reused_between_solves():
    from mskinv.fem import DirichletSolver
    mesh = build_structured_mesh(12)
    solver = DirichletSolver(mesh, constant_tensor([[1.0, 0.0], [0.0, 1.0]]))
    s1 = solver.solve(f=1.0, g=0.0)
    s2 = solver.solve(f=0.0, g=lambda x: x[:, 1])
    assert not np.allclose(s1.values, s2.values)
    assert np.allclose(s2.values, mesh.nodes[:, 1], atol=1e-12)
