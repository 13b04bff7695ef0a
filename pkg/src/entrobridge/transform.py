"""Entropic (c, eps)-transforms, normalizing constants and gauge fixing.

All transforms are evaluated in the log domain. Every reduction goes through
:func:`_lse_rows`, which reduces along the contiguous last axis of a 2-D
array with max subtraction, so equal inputs give bitwise equal outputs no
matter which marginal they came from.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import (
    CostTensor,
    DiscreteMeasure,
    InvalidEpsilonError,
    MarginalIndexError,
    Potential,
    Problem,
    ShapeMismatchError,
    SupportError,
)


class MissingPotentialError(MarginalIndexError):
    pass


def _lse_rows(M: np.ndarray) -> np.ndarray:
    """Row-wise ``log sum exp`` of a 2-D array.

    Computed as ``max + log1p(rest)`` where ``rest`` sums the scaled terms
    other than the (first) maximal one, so a dominating term is exact.
    """
    M = np.ascontiguousarray(M)
    top_idx = M.argmax(axis=1)
    rows = np.arange(M.shape[0])
    top = M[rows, top_idx]
    scaled = np.exp(M - top[:, None])
    scaled[rows, top_idx] = 0.0
    return top + np.log1p(scaled.sum(axis=1))


def log_sum_exp_weighted(values, log_weights) -> float:
    """``log sum_i exp(values_i + log_weights_i)`` with max subtraction."""
    v = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(log_weights, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("log_sum_exp_weighted needs at least one term")
    if v.size != w.size:
        raise ShapeMismatchError(f"{v.size} values but {w.size} log-weights")
    return float(_lse_rows((v + w)[None, :])[0])


def _check_eps(epsilon: float):
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise InvalidEpsilonError(f"epsilon must be positive, got {epsilon!r}")


def _values(u, expected_len: int, expected_index=None) -> np.ndarray:
    if isinstance(u, Potential):
        if expected_index is not None and u.marginal_index != expected_index:
            raise MarginalIndexError(
                f"potential lives on marginal {u.marginal_index}, expected {expected_index}"
            )
        u = u.values
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != expected_len:
        raise ShapeMismatchError(f"potential has {u.size} entries, marginal has {expected_len}")
    return u


def _transform_rows(cost_rows, u_flat, lw_flat, epsilon) -> np.ndarray:
    # cost_rows[t, s]: target atom t, source configuration s
    return -epsilon * _lse_rows((u_flat - cost_rows) / epsilon + lw_flat)


def lambda_u(u, rho: DiscreteMeasure, epsilon: float) -> float:
    """``eps * log integral exp(u / eps) d rho``."""
    _check_eps(epsilon)
    u = _values(u, rho.size)
    return epsilon * float(_lse_rows((u / epsilon + rho.log_weights)[None, :])[0])


def c_transform(u, cost: CostTensor, source: DiscreteMeasure, epsilon: float,
                source_index: int | None = None) -> Potential:
    """Two-marginal entropic transform of ``u`` (living on ``source``).

    ``source_index`` is 0 when ``u`` is on the first marginal (the result is
    on the second) and 1 for the opposite direction. It defaults to the
    potential's own index, or 0 for a bare array.
    """
    _check_eps(epsilon)
    if cost.rank != 2:
        raise ShapeMismatchError("c_transform needs a two-marginal cost; use mm_transform")
    if source_index is None:
        source_index = u.marginal_index if isinstance(u, Potential) else 0
    if source_index not in (0, 1):
        raise MarginalIndexError(f"source_index must be 0 or 1, got {source_index}")
    if cost.shape[source_index] != source.size:
        raise ShapeMismatchError(
            f"source has {source.size} atoms, cost axis {source_index} has {cost.shape[source_index]}"
        )
    u = _values(u, source.size, source_index)
    rows = cost.values.T if source_index == 0 else cost.values
    out = _transform_rows(np.ascontiguousarray(rows), u, source.log_weights, epsilon)
    return Potential(1 - source_index, out)


class TransformKernel:
    """Precomputed per-marginal layouts of a problem's cost for fast transforms."""

    def __init__(self, cost: CostTensor, log_weights: Sequence[np.ndarray], epsilon: float):
        _check_eps(epsilon)
        self.epsilon = float(epsilon)
        self.n = cost.rank
        self.shape = cost.shape
        self.log_weights = [np.asarray(lw, dtype=float) for lw in log_weights]
        if tuple(lw.size for lw in self.log_weights) != self.shape:
            raise ShapeMismatchError("log-weights do not match cost shape")
        self._rows = []
        self._lw = []
        for i in range(self.n):
            rows = np.ascontiguousarray(np.moveaxis(cost.values, i, 0)).reshape(self.shape[i], -1)
            self._rows.append(rows)
            self._lw.append(self._outer([lw for j, lw in enumerate(self.log_weights) if j != i]))

    @classmethod
    def for_problem(cls, problem: Problem) -> "TransformKernel":
        key = ("kernel", problem.epsilon)
        if key not in problem._cache:
            problem._cache[key] = cls(problem.cost, problem.log_weights, problem.epsilon)
        return problem._cache[key]

    @staticmethod
    def _outer(vectors) -> np.ndarray:
        out = np.zeros(())
        for v in vectors:
            out = np.add.outer(out, v)
        return out.reshape(-1)

    def transform(self, i: int, others: Sequence[np.ndarray]) -> np.ndarray:
        """Transform onto marginal ``i`` from the potentials of the others (ascending order)."""
        return _transform_rows(self._rows[i], self._outer(others), self._lw[i], self.epsilon)

    def transform_full(self, i: int, us: Sequence[np.ndarray]) -> np.ndarray:
        return self.transform(i, [u for j, u in enumerate(us) if j != i])

    def lam(self, i: int, u: np.ndarray) -> float:
        eps = self.epsilon
        return eps * float(_lse_rows((u / eps + self.log_weights[i])[None, :])[0])


def mm_transform(us, cost: CostTensor, measures: Sequence[DiscreteMeasure], i: int,
                 epsilon: float) -> Potential:
    """Multi-marginal entropic transform onto marginal ``i``.

    ``us`` holds the N-1 potentials of the other marginals in ascending
    marginal order (or a mapping ``{j: u_j}``).
    """
    _check_eps(epsilon)
    n = cost.rank
    if len(measures) != n:
        raise ShapeMismatchError(f"{len(measures)} measures for a rank-{n} cost")
    if not 0 <= i < n:
        raise MarginalIndexError(f"marginal index {i} out of range for N={n}")
    others = [j for j in range(n) if j != i]
    if isinstance(us, dict):
        missing = [j for j in others if j not in us]
        if missing:
            raise MissingPotentialError(f"no potential supplied for marginals {missing}")
        us = [us[j] for j in others]
    us = list(us)
    if len(us) != n - 1:
        raise MissingPotentialError(f"expected {n - 1} potentials, got {len(us)}")
    vals = [_values(u, measures[j].size, j) for u, j in zip(us, others)]
    kernel = TransformKernel(cost, [m.log_weights for m in measures], epsilon)
    return Potential(i, kernel.transform(i, vals))


def _pair_shift(lam_input: float, lam_first: float) -> float:
    # Optimal translation for the pair (first, second) produced from `input`.
    return (lam_first - lam_input) / 2.0


def recenter_pair(u, v, problem: Problem) -> tuple[Potential, Potential]:
    """Improve and recenter a two-marginal potential pair.

    Returns ``u* = v^(c,eps) - a*`` and ``v* = (v^(c,eps))^(c,eps) + a*`` with
    ``a* = (lambda(v^(c,eps)) - lambda(v)) / 2``. Both outputs are bounded by
    ``1.5 * ||c||_inf`` in sup norm and the dual value does not decrease.
    ``u`` is accepted for symmetry of the signature; only ``v`` matters.
    """
    if problem.n_marginals != 2:
        raise ShapeMismatchError("recenter_pair needs a two-marginal problem")
    rho1, rho2 = problem.measures
    eps = problem.epsilon
    _values(u, rho1.size, 0)
    v = _values(v, rho2.size, 1)
    u_t = c_transform(v, problem.cost, rho2, eps, source_index=1).values
    v_t = c_transform(u_t, problem.cost, rho1, eps, source_index=0).values
    a = _pair_shift(lambda_u(v, rho2, eps), lambda_u(u_t, rho1, eps))
    return Potential(0, u_t - a), Potential(1, v_t + a)


def project_gauge_shifts(lams: Sequence[float]) -> list[float]:
    """Constants added by the projection ``P`` given each ``lambda(u_i)``."""
    shifts = [-lam for lam in lams[:-1]]
    shifts.append(math.fsum(lams[:-1]))
    return shifts


def project_gauge(us, measures: Sequence[DiscreteMeasure], epsilon: float) -> list[Potential]:
    """Translation-invariant projection ``P``.

    ``P_i(u) = u_i - lambda(u_i)`` for all but the last marginal, and the last
    one absorbs the sum of those constants, so ``sum_i P_i(u)(x_i)`` and the
    dual value are unchanged.
    """
    _check_eps(epsilon)
    if len(us) != len(measures) or len(us) < 2:
        raise ShapeMismatchError("project_gauge needs one potential per marginal, N >= 2")
    vals = [_values(u, m.size, k) for k, (u, m) in enumerate(zip(us, measures))]
    lams = [lambda_u(u, m, epsilon) for u, m in zip(vals[:-1], measures[:-1])]
    shifts = project_gauge_shifts(lams + [0.0])
    return [Potential(k, u + s) for k, (u, s) in enumerate(zip(vals, shifts))]


def conjugate_with_reference(v, problem: Problem, source_index: int = 1) -> Potential:
    """Entropic transform for the problem penalized against reference measures.

    For ``v`` on marginal ``source_index`` returns, on the other marginal ``t``,
    ``eps*log(rho_t/m_t) + F(v - eps*log(rho_s/m_s))`` where ``F`` is the
    plain transform that integrates against ``rho_s``.
    """
    if problem.n_marginals != 2:
        raise ShapeMismatchError("conjugate_with_reference needs a two-marginal problem")
    if problem.references is None:
        raise SupportError("problem has no reference measures")
    if source_index not in (0, 1):
        raise MarginalIndexError(f"source_index must be 0 or 1, got {source_index}")
    eps = problem.epsilon
    t = 1 - source_index
    src, tgt = problem.measures[source_index], problem.measures[t]
    m_w = problem.reference_weights()
    v = _values(v, src.size, source_index)
    log_ratio_src = src.log_weights - np.log(m_w[source_index])
    log_ratio_tgt = tgt.log_weights - np.log(m_w[t])
    inner = c_transform(v - eps * log_ratio_src, problem.cost, src, eps, source_index)
    return Potential(t, eps * log_ratio_tgt + inner.values)
