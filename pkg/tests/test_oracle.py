import math

import numpy as np
import pytest

from conftest import GAMMA11, GAMMA12, OT_SYM, random_measure, random_problem, symmetric_problem
from entrobridge import DiscreteMeasure, ShapeMismatchError, SolverConfig, build_problem, solve
from entrobridge.oracle import (
    OracleSizeError,
    _ot_assignment_dp,
    _ot_permutations,
    _ot_vertices,
    brute_force_entropic,
    brute_force_entropic_mm,
    brute_force_ot,
    envelope_bound,
    epsilon_sweep,
)


def uniform_problem(c, eps=1.0):
    c = np.asarray(c, dtype=float)
    ms = [DiscreteMeasure.uniform(k) for k in c.shape]
    return build_problem(ms, c, SolverConfig(eps))


def test_ot_examples():
    assert brute_force_ot(uniform_problem([[0.0, 1.0], [1.0, 0.0]]))[0] == 0.0
    val, g = brute_force_ot(uniform_problem([[4.0, 9.0], [9.0, 4.0]]))
    assert val == 4.0
    np.testing.assert_array_equal(g.mass, np.eye(2) / 2)
    one = DiscreteMeasure.from_weights([1.0])
    val, g = brute_force_ot(build_problem([one, one], [[3.25]], SolverConfig(1.0)))
    assert val == 3.25 and g.mass[0, 0] == 1.0


def test_ot_ties_pick_lexicographically_smallest():
    _, g = brute_force_ot(uniform_problem(np.zeros((3, 3))))
    np.testing.assert_array_equal(g.mass, np.fliplr(np.eye(3)) / 3)
    _, g = _ot_vertices(np.zeros((3, 3)), np.full(3, 1 / 3), np.full(3, 1 / 3))
    np.testing.assert_allclose(g, np.fliplr(np.eye(3)) / 3, atol=1e-15)


def test_vertex_enumeration_matches_permutations(rng):
    for _ in range(30):
        c = rng.normal(size=(3, 3))
        pv, _ = _ot_permutations(c)
        vv, g = _ot_vertices(c, np.full(3, 1 / 3), np.full(3, 1 / 3))
        assert vv == pytest.approx(pv, abs=1e-14)
        np.testing.assert_allclose(g.sum(axis=0), 1 / 3, atol=1e-14)


def test_dp_matches_permutations(rng):
    for n in range(1, 9):
        c = rng.normal(size=(n, n))
        pv, pg = _ot_permutations(c)
        dv, dg = _ot_assignment_dp(c)
        assert dv == pytest.approx(pv, abs=1e-12)
        np.testing.assert_array_equal(pg, dg)


def test_vertex_enumeration_nonuniform(rng):
    for _ in range(20):
        ms = [random_measure(rng, 2), random_measure(rng, 3)]
        c = rng.normal(size=(2, 3))
        val, g = brute_force_ot(build_problem(ms, c, SolverConfig(1.0)))
        # For 2 x m the exact optimum fills columns greedily by c[0]-c[1].
        np.testing.assert_allclose(g.mass.sum(axis=1), ms[0].weights, atol=1e-14)
        np.testing.assert_allclose(g.mass.sum(axis=0), ms[1].weights, atol=1e-14)
        order = np.argsort(c[0] - c[1], kind="stable")
        left, greedy = ms[0].weights[0], np.zeros((2, 3))
        for j in order:
            take = min(left, ms[1].weights[j])
            greedy[0, j], greedy[1, j] = take, ms[1].weights[j] - take
            left -= take
        assert val == pytest.approx(math.fsum((c * greedy).ravel()), abs=1e-13)


def test_ot_size_guards(rng):
    with pytest.raises(OracleSizeError):
        brute_force_ot(random_problem(rng, (4, 4)))
    with pytest.raises(OracleSizeError):
        brute_force_ot(uniform_problem(np.zeros((13, 13))))
    with pytest.raises(OracleSizeError):
        brute_force_ot(random_problem(rng, (2, 2, 2)))
    with pytest.raises(OracleSizeError):
        brute_force_entropic(random_problem(rng, (3, 4)))
    with pytest.raises(OracleSizeError):
        brute_force_entropic_mm(random_problem(rng, (2, 4, 2)))


def test_entropic_symmetric():
    val, g = brute_force_entropic(symmetric_problem())
    assert val == pytest.approx(OT_SYM, abs=1e-13)
    np.testing.assert_allclose(g.mass, [[GAMMA11, GAMMA12], [GAMMA12, GAMMA11]], atol=1e-12)


def test_entropic_zero_cost(rng):
    ms = [random_measure(rng, 2), random_measure(rng, 3)]
    val, g = brute_force_entropic(build_problem(ms, np.zeros((2, 3)), SolverConfig(0.3)))
    assert abs(val) <= 1e-13
    np.testing.assert_allclose(g.mass, np.outer(ms[0].weights, ms[1].weights), atol=1e-10)


def test_entropic_large_epsilon_near_product(rng):
    for scale in (1e-3, 1.0):
        p = random_problem(rng, (2, 3), eps=1e3, cost_scale=scale)
        _, g = brute_force_entropic(p)
        prod = np.outer(*(m.weights for m in p.measures))
        dev = np.max(np.abs(g.mass - prod))
        assert dev <= p.cost.sup_norm / p.epsilon
        if scale == 1e-3:
            assert dev <= 1e-6


@pytest.mark.parametrize("shape", [(2, 3), (3, 3), (2, 5), (3, 2), (5, 2), (1, 4)])
@pytest.mark.parametrize("eps", [0.05, 0.5, 5.0])
def test_entropic_oracle_matches_sinkhorn(rng, shape, eps):
    p = random_problem(rng, shape, eps=eps, tol_marginal=1e-13)
    val, g = brute_force_entropic(p)
    rep = solve(p)
    assert rep.converged
    assert abs(val - rep.primal) <= 1e-7
    assert np.max(np.abs(g.mass - rep.coupling.mass)) <= 1e-7


def test_mm_oracle_reduces_to_two_marginals(rng):
    p = random_problem(rng, (3, 3), eps=0.5)
    a, ga = brute_force_entropic(p)
    b, gb = brute_force_entropic_mm(p)
    assert abs(a - b) <= 1e-10
    np.testing.assert_allclose(ga.mass, gb.mass, atol=1e-9)


def test_sweep_envelope():
    x, y = np.array([0.0, 1.0]), np.array([2.0, 3.0])
    p = uniform_problem((x[:, None] - y[None, :]) ** 2)
    res = epsilon_sweep(p, [1.0, 0.1, 0.01, 0.001])
    assert res.exact_value == 4.0
    assert res.ok and all(res.converged)
    for e, gap in zip(res.epsilons, res.gaps):
        assert -1e-9 <= gap <= envelope_bound(e, (2, 2)) + 1e-6
    assert res.gaps[-1] <= 1e-3


def test_sweep_zero_cost_and_single_atom(rng):
    r = DiscreteMeasure.uniform(3)
    res = epsilon_sweep(build_problem([r, r], np.zeros((3, 3)), SolverConfig(1.0)), [1.0, 0.1])
    assert res.ok and all(abs(g) <= 1e-14 for g in res.gaps)
    one = DiscreteMeasure.from_weights([1.0])
    res = epsilon_sweep(build_problem([one, one], [[1.5]], SolverConfig(1.0)), [2.0, 0.5, 0.01])
    assert all(abs(g) <= 1e-14 for g in res.gaps)


def test_sweep_warm_matches_cold():
    p = symmetric_problem()
    res = epsilon_sweep(p, [1.0, 0.5, 0.2], SolverConfig(1.0, tol_marginal=1e-12), cold_check=True)
    assert all(res.cold_converged) and all(res.cold_match) and res.ok


def test_sweep_validation(rng):
    p = symmetric_problem()
    for bad in ([], [0.1, 1.0], [1.0, 1.0], [1.0, -0.1], [math.nan]):
        with pytest.raises(ValueError):
            epsilon_sweep(p, bad)
    with pytest.raises(ShapeMismatchError):
        epsilon_sweep(random_problem(rng, (2, 2, 2)), [1.0])
    with pytest.raises(OracleSizeError):
        epsilon_sweep(random_problem(rng, (5, 5)), [1.0])
