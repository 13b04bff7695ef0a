import math
import warnings

import numpy as np
import pytest

from entrobridge import (
    CostTensor,
    CostTooLargeError,
    Coupling,
    DiscreteMeasure,
    DuplicateAtomError,
    Gauge,
    InvalidConfigError,
    InvalidEpsilonError,
    NonFiniteCostError,
    NonPositiveWeightError,
    ShapeMismatchError,
    SolverConfig,
    SupportError,
    build_problem,
    gibbs_log_kernel,
)
from entrobridge.core import axis_sums, strip_zero_atoms


def test_smallest_problem():
    one = DiscreteMeasure.from_weights([1.0])
    p = build_problem([one, one], [[0.7]], SolverConfig(1.0))
    assert p.n_marginals == 2
    assert p.cost.sup_norm == 0.7


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        build_problem([DiscreteMeasure.uniform(2), DiscreteMeasure.uniform(3)],
                      np.zeros((3, 3)), SolverConfig(1.0))
    with pytest.raises(ShapeMismatchError):
        build_problem([DiscreteMeasure.uniform(2)] * 3, np.zeros((2, 2)), SolverConfig(1.0))


def test_zero_weight_names_atom():
    with pytest.raises(NonPositiveWeightError) as err:
        DiscreteMeasure.from_weights([0.5, 0.5, 0.0], ids=[10, 11, 12])
    assert err.value.atom_id == 12
    assert "12" in str(err.value)


def test_negative_weight_rejected():
    with pytest.raises(NonPositiveWeightError):
        DiscreteMeasure.from_weights([0.5, -0.1])
    with pytest.raises(NonPositiveWeightError):
        DiscreteMeasure.from_weights([0.5, math.nan])


def test_strip_zero_atoms_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        keep = strip_zero_atoms([0.5, 0.0, 0.5], ids=[3, 4, 5])
    assert keep == [0, 2]
    assert any("4" in str(w.message) for w in caught)
    with pytest.raises(NonPositiveWeightError):
        strip_zero_atoms([0.5, -1.0])


def test_weights_normalized():
    m = DiscreteMeasure.from_weights([1, 2, 3, 4])
    assert abs(math.fsum(m.weights) - 1.0) <= 1e-12
    np.testing.assert_allclose(m.weights, [0.1, 0.2, 0.3, 0.4], rtol=1e-15)
    np.testing.assert_array_equal(m.log_weights, np.log(m.weights))


def test_duplicate_ids():
    with pytest.raises(DuplicateAtomError):
        DiscreteMeasure.from_weights([0.5, 0.5], ids=[1, 1])


def test_arrays_are_read_only():
    m = DiscreteMeasure.uniform(3)
    with pytest.raises(ValueError):
        m.weights[0] = 1.0
    c = CostTensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        c.values[0, 0] = 1.0


def test_coordinates():
    m = DiscreteMeasure.from_weights([1, 1], coords=[[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(m.coordinates(), [[0, 1], [2, 3]])
    with pytest.raises(ShapeMismatchError):
        DiscreteMeasure.uniform(2).coordinates()


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_non_finite_cost(bad):
    with pytest.raises(NonFiniteCostError):
        CostTensor([[0.0, bad], [1.0, 0.0]])


def test_cost_rank_and_cap():
    with pytest.raises(ShapeMismatchError):
        CostTensor([1.0, 2.0])
    with pytest.raises(CostTooLargeError):
        CostTensor(np.zeros((10, 10)), entry_cap=50)
    c = CostTensor([[-3.0, 1.0], [2.0, 0.5]])
    assert c.sup_norm == 3.0


@pytest.mark.parametrize("eps", [0.0, -1.0, math.nan, math.inf])
def test_invalid_epsilon(eps):
    with pytest.raises(InvalidEpsilonError):
        SolverConfig(eps)


def test_invalid_config_fields():
    with pytest.raises(InvalidConfigError):
        SolverConfig(1.0, max_iter=0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(1.0, tol_marginal=0.0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(1.0, tol_dual_increment=-1.0)
    with pytest.raises(InvalidConfigError):
        SolverConfig(1.0, record_trace_every=0)
    with pytest.raises(ValueError):
        SolverConfig(1.0, gauge="sideways")


def test_config_defaults():
    cfg = SolverConfig(0.5)
    assert (cfg.max_iter, cfg.tol_marginal, cfg.tol_dual_increment, cfg.record_trace_every) == (
        100_000, 1e-9, 1e-12, 1)
    assert cfg.resolved_gauge(2) is Gauge.PAIR_RECENTER
    assert cfg.resolved_gauge(3) is Gauge.PROJECTION_P
    assert SolverConfig(0.5, gauge="none").resolved_gauge(2) is Gauge.NONE
    assert cfg.with_epsilon(2.0).epsilon == 2.0


def test_gibbs_log_kernel_examples():
    np.testing.assert_array_equal(gibbs_log_kernel(CostTensor([[0.0, 1.0], [1.0, 0.0]]), 1.0),
                                  [[0, -1], [-1, 0]])
    np.testing.assert_array_equal(gibbs_log_kernel(CostTensor([[2.0]]), 0.5), [[-4.0]])
    k = gibbs_log_kernel(CostTensor([[0.0, 1.0], [1.0, 0.0]]), 0.01)
    np.testing.assert_allclose(k, [[0, -100], [-100, 0]], rtol=1e-15)
    with pytest.raises(InvalidEpsilonError):
        gibbs_log_kernel(CostTensor([[1.0]]), 0.0)


def test_gibbs_roundtrip_power_of_two(rng):
    c = CostTensor(rng.normal(size=(4, 5)) * 10)
    for k in range(-6, 7):
        eps = 2.0 ** k
        np.testing.assert_array_equal(gibbs_log_kernel(c, eps) * -eps, c.values)


def test_problem_roundtrip(rng):
    ms = [DiscreteMeasure.from_weights(rng.random(3) + 0.1) for _ in range(2)]
    c = rng.random((3, 3))
    p = build_problem(ms, c, SolverConfig(0.3))
    np.testing.assert_array_equal(p.cost.values, c)
    for a, b in zip(p.measures, ms):
        np.testing.assert_array_equal(a.weights, b.weights)
    t = p.transposed()
    np.testing.assert_array_equal(t.cost.values, c.T)
    assert t.measures[0] is ms[1]


def test_reference_alignment():
    rho = DiscreteMeasure.from_weights([1, 1], ids=[5, 7])
    extra = DiscreteMeasure.from_weights([0.2, 0.3, 0.5], ids=[7, 9, 5])
    p = build_problem([rho, rho], np.zeros((2, 2)), SolverConfig(1.0), references=[extra, extra])
    np.testing.assert_array_equal(p.reference_weights()[0], [0.5, 0.2])
    short = DiscreteMeasure.from_weights([1.0], ids=[5])
    with pytest.raises(SupportError):
        build_problem([rho, rho], np.zeros((2, 2)), SolverConfig(1.0), references=[short, rho])


def test_coupling_contract():
    with pytest.raises(ValueError):
        Coupling([[0.5, -0.1], [0.3, 0.3]])
    g = Coupling([[0.25, 0.25], [0.25, 0.25]])
    assert g.is_probability()
    assert not Coupling([[0.5, 0.0], [0.0, 0.4]]).is_probability()


def test_axis_sums_layout_independent(rng):
    g = rng.random((3, 4, 5))
    for i in range(3):
        np.testing.assert_allclose(axis_sums(g, i), g.sum(axis=tuple(j for j in range(3) if j != i)))
    np.testing.assert_array_equal(axis_sums(g[:, :, 0], 0), axis_sums(np.ascontiguousarray(g[:, :, 0].T), 1))
