"""Discrete optimal transport distances and the coupling upper bound."""

import itertools

import numpy as np
import pytest

from mskinv.transport import (DiscreteMeasure, homogenization_error,
                              wasserstein_discrete, wasserstein_upper_bound)

PS_GRID = [(1.0, 2.0), (2.0, 2.0), (1.0, np.inf)]


def uniform(points):
    points = np.atleast_2d(points)
    k = len(points)
    return DiscreteMeasure(points, np.full(k, 1.0 / k))


def test_measure_validation():
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 1)), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 1)), np.array([1.5, -0.5]))
    with pytest.raises(ValueError):
        DiscreteMeasure(np.zeros((2, 1)), np.array([1.0]))


@pytest.mark.parametrize("p,s", PS_GRID)
def test_identity_of_indiscernibles(p, s):
    pts = np.random.default_rng(0).standard_normal((5, 3))
    assert wasserstein_discrete(uniform(pts), uniform(pts), p=p, s=s) == 0.0


@pytest.mark.parametrize("p,s", PS_GRID)
def test_invariance_under_support_permutation(p, s):
    rng = np.random.default_rng(1)
    pts = rng.standard_normal((6, 2))
    shuffled = pts[rng.permutation(6)]
    assert wasserstein_discrete(uniform(pts), uniform(shuffled), p=p, s=s) \
        == pytest.approx(0.0, abs=1e-12)


def test_two_point_distance_is_ground_metric():
    a = uniform(np.array([[0.0, 0.0]]))
    b = uniform(np.array([[3.0, 4.0]]))
    assert wasserstein_discrete(a, b, p=1.0, s=2.0) == pytest.approx(5.0)
    assert wasserstein_discrete(a, b, p=2.0, s=2.0) == pytest.approx(5.0)
    assert wasserstein_discrete(a, b, p=1.0, s=np.inf) == pytest.approx(4.0)


def test_weighted_split_hand_value():
    # half the mass moves distance 1: W1 = 0.5
    mu = DiscreteMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    nu = DiscreteMeasure(np.array([[0.0]]), np.array([1.0]))
    assert wasserstein_discrete(mu, nu, p=1.0) == pytest.approx(0.5)
    # quadratic cost: W2 = sqrt(0.5)
    assert wasserstein_discrete(mu, nu, p=2.0) == pytest.approx(np.sqrt(0.5))


@pytest.mark.parametrize("p,s", PS_GRID)
def test_symmetry(p, s):
    rng = np.random.default_rng(2)
    mu = uniform(rng.standard_normal((7, 2)))
    nu = uniform(rng.standard_normal((7, 2)))
    d1 = wasserstein_discrete(mu, nu, p=p, s=s)
    d2 = wasserstein_discrete(nu, mu, p=p, s=s)
    assert d1 == pytest.approx(d2, rel=1e-10)


@pytest.mark.parametrize("p,s", PS_GRID)
def test_triangle_inequality(p, s):
    rng = np.random.default_rng(3)
    for _ in range(20):
        mu = uniform(rng.standard_normal((5, 2)))
        nu = uniform(rng.standard_normal((5, 2)))
        rho = uniform(rng.standard_normal((5, 2)))
        dmn = wasserstein_discrete(mu, nu, p=p, s=s)
        dmr = wasserstein_discrete(mu, rho, p=p, s=s)
        drn = wasserstein_discrete(rho, nu, p=p, s=s)
        assert dmn <= dmr + drn + 1e-9


def test_equal_weights_match_exhaustive_permutations():
    rng = np.random.default_rng(4)
    for k in (2, 3, 4, 5):
        a = rng.standard_normal((k, 2))
        b = rng.standard_normal((k, 2))
        cost = np.linalg.norm(a[:, None] - b[None, :], axis=2)
        best = min(cost[range(k), perm].sum() / k
                   for perm in itertools.permutations(range(k)))
        got = wasserstein_discrete(uniform(a), uniform(b), p=1.0, s=2.0)
        assert got == pytest.approx(best, rel=1e-12)


def test_lp_route_matches_assignment_route():
    # general-weight solver on equal weights must agree with the
    # assignment shortcut
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    w = np.full(6, 1.0 / 6)
    exact = wasserstein_discrete(uniform(a), uniform(b), p=2.0)
    jitter = w + 0.0   # same weights, but force the LP path via inequality
    lp = wasserstein_discrete(DiscreteMeasure(a, jitter),
                              DiscreteMeasure(b[::-1], w), p=2.0)
    assert lp == pytest.approx(exact, rel=1e-7)


def test_unequal_sizes_supported():
    rng = np.random.default_rng(6)
    mu = uniform(rng.standard_normal((4, 2)))
    nu = uniform(rng.standard_normal((9, 2)))
    d = wasserstein_discrete(mu, nu, p=1.0)
    assert d > 0


@pytest.mark.parametrize("p,s", PS_GRID)
def test_identity_coupling_upper_bound(p, s):
    rng = np.random.default_rng(7)
    for _ in range(50):
        a = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3))
        w = wasserstein_discrete(uniform(a), uniform(b), p=p, s=s)
        ub = wasserstein_upper_bound(a, b, p=p, s=s)
        assert w <= ub + 1e-9


def test_upper_bound_tight_for_translation():
    a = np.random.default_rng(8).standard_normal((10, 2))
    b = a + np.array([1.0, 0.0])
    w = wasserstein_discrete(uniform(a), uniform(b), p=2.0)
    assert w == pytest.approx(wasserstein_upper_bound(a, b, p=2.0))
    assert w == pytest.approx(1.0)


def test_problem_size_guard():
    big = uniform(np.zeros((1001, 1)))
    other = uniform(np.zeros((1000, 1)))
    with pytest.raises(ValueError):
        wasserstein_discrete(big, other, p=1.0)


def test_degenerate_measures():
    mu = DiscreteMeasure(np.array([[2.0, 2.0]]), np.array([1.0]))
    assert wasserstein_discrete(mu, mu, p=1.0) == 0.0


def test_homogenization_error_zero_for_matching_forwards():
    rng = np.random.default_rng(9)
    U = rng.standard_normal((12, 3))
    fwd = lambda u: np.array([u @ u, u.sum()])
    assert homogenization_error(U, fwd, fwd) == pytest.approx(0.0)


def test_homogenization_error_scales_with_offset():
    U = np.zeros((5, 2))
    f1 = lambda u: np.array([0.0])
    f2 = lambda u: np.array([2.0])
    assert homogenization_error(U, f1, f2) == pytest.approx(2.0)
