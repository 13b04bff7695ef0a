"""IPFP / Sinkhorn solvers in the potential (log-domain) parametrization.

Iterates are kept as potentials ``u_i``; the scalings of the multiplicative
form are ``a_i = exp(u_i / eps)`` and are only materialized on request
(see :meth:`SolveReport.scalings`), since they overflow for small ``eps``.

Gauge bookkeeping: ``gauge_log[i]`` is the constant by which the raw
(never recentered) iterate on marginal ``i`` exceeds the reported one, and
``gauge_constants[i] = exp(gauge_log[i] / eps)``. The logs sum to zero, so
the constants multiply to one. For small ``eps`` the constants can leave
the floating-point range (they saturate to 0 or inf); ``gauge_log`` is exact.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    Coupling,
    DiscreteMeasure,
    Gauge,
    NumericalInconsistencyError,
    Potential,
    Problem,
    ShapeMismatchError,
    SolverConfig,
    axis_sums,
    log_product_weights,
)
from .dual import (
    OptimalityReport,
    _exp_mass,
    _linear_term,
    check_complementarity,
    kl_divergence,
    log_coupling,
    primal_value,
    validation_tolerance,
)
from .transform import TransformKernel, _lse_rows, _pair_shift, _transform_rows, _values, project_gauge_shifts


@dataclass(frozen=True)
class IterationRecord:
    iter: int
    dual: float
    primal: float
    gap: float
    marginal_residual_l1: float
    marginal_residuals: tuple[float, ...]
    gauge_constants: tuple[float, ...]
    gauge_log: tuple[float, ...]
    wall_ms: float

    def values(self) -> tuple:
        """Every field except wall time, for reproducibility checks."""
        return (self.iter, self.dual, self.primal, self.gap, self.marginal_residual_l1,
                self.marginal_residuals, self.gauge_constants, self.gauge_log)


@dataclass(frozen=True)
class SolveReport:
    potentials: tuple[Potential, ...]
    coupling: Coupling
    optimality: OptimalityReport
    trace: tuple[IterationRecord, ...]
    converged: bool
    iterations: int
    gauge: Gauge
    epsilon: float
    max_dual: float

    @property
    def stop_reason(self) -> str:
        return "converged" if self.converged else "max_iter"

    @property
    def u(self) -> Potential:
        return self.potentials[0]

    @property
    def v(self) -> Potential:
        if len(self.potentials) != 2:
            raise ShapeMismatchError("v is defined for two-marginal solves; use potentials")
        return self.potentials[1]

    @property
    def primal(self) -> float:
        return self.optimality.primal_value

    @property
    def dual(self) -> float:
        return self.optimality.dual_value

    @property
    def gap(self) -> float:
        return self.optimality.gap

    def scalings(self) -> list[np.ndarray]:
        """Multiplicative scalings ``a_i = exp(u_i / eps)``; may overflow to inf."""
        with np.errstate(over="ignore"):
            return [p.scaling(self.epsilon) for p in self.potentials]

    @property
    def a(self) -> np.ndarray:
        return self.scalings()[0]

    @property
    def b(self) -> np.ndarray:
        return self.scalings()[1]


def marginal_residuals(gamma, measures: Sequence[DiscreteMeasure]) -> tuple[float, ...]:
    """L1 distance between each axis-sum of ``gamma`` and the matching marginal."""
    g = gamma.mass if isinstance(gamma, Coupling) else np.asarray(gamma, dtype=float)
    if tuple(m.size for m in measures) != g.shape:
        raise ShapeMismatchError(f"coupling shape {g.shape} vs measure sizes "
                                 f"{tuple(m.size for m in measures)}")
    return tuple(math.fsum(np.abs(axis_sums(g, i) - m.weights)) for i, m in enumerate(measures))


def _resolve(problem: Problem, config: Optional[SolverConfig]) -> tuple[Problem, SolverConfig]:
    if config is None:
        config = problem.config
    elif config != problem.config:
        problem = problem.with_config(config)
    return problem, config


def _initial(init, problem: Problem) -> list[np.ndarray]:
    if init is None:
        return [np.zeros(m.size) for m in problem.measures]
    if len(init) != problem.n_marginals:
        raise ShapeMismatchError(f"need {problem.n_marginals} initial potentials, got {len(init)}")
    return [np.array(_values(u, m.size, k)) for k, (u, m) in enumerate(zip(init, problem.measures))]


def _safe_exp(t: float) -> float:
    return math.exp(t) if t < 709.0 else math.inf


class _Monitor:
    """Per-sweep evaluation, stopping test and trace recording."""

    def __init__(self, problem: Problem, config: SolverConfig, d0: float):
        self.problem = problem
        self.config = config
        self.prev_dual = d0
        self.max_dual = d0
        self.trace: list[IterationRecord] = []
        self.t0 = time.perf_counter()
        self.log_gamma = None

    def step(self, n: int, vals, log_gamma, ell, last: bool) -> bool:
        p = self.problem
        eps = p.epsilon
        gamma = np.exp(log_gamma)
        sums = [axis_sums(gamma, i) for i in range(p.n_marginals)]
        res = tuple(math.fsum(np.abs(s - m.weights)) for s, m in zip(sums, p.measures))
        sup = max(float(np.max(np.abs(s / m.weights - 1.0))) for s, m in zip(sums, p.measures))
        dual = _linear_term(vals, p) - eps * _exp_mass(log_gamma)
        if not math.isfinite(dual):
            raise NumericalInconsistencyError(f"dual value became {dual!r} at sweep {n}")
        increment = dual - self.prev_dual
        self.prev_dual = dual
        self.max_dual = max(self.max_dual, dual)
        cfg = self.config
        done = (max(res) <= cfg.tol_marginal and abs(increment) <= cfg.tol_dual_increment
                and sup <= 10.0 * cfg.tol_marginal)
        if done or last or n % cfg.record_trace_every == 0:
            primal = primal_value(gamma, p.cost, p.measures, eps)
            self.trace.append(IterationRecord(
                iter=n, dual=dual, primal=primal, gap=primal - (dual + eps),
                marginal_residual_l1=max(res), marginal_residuals=res,
                gauge_constants=tuple(_safe_exp(l / eps) for l in ell),
                gauge_log=tuple(ell),
                wall_ms=(time.perf_counter() - self.t0) * 1e3,
            ))
        self.log_gamma = log_gamma
        return done

    def report(self, vals, n: int, converged: bool, gauge: Gauge) -> SolveReport:
        p = self.problem
        pots = tuple(Potential(i, u) for i, u in enumerate(vals))
        opt = check_complementarity(vals, p, tol=validation_tolerance(self.config, p.cost),
                                    best_dual=self.max_dual)
        return SolveReport(pots, Coupling(np.exp(self.log_gamma)), opt, tuple(self.trace),
                           converged, n, gauge, p.epsilon, self.max_dual)


def sinkhorn_2m(problem: Problem, config: Optional[SolverConfig] = None, init=None) -> SolveReport:
    """Two-marginal IPFP: ``v = F(u)`` then ``u = F(v)`` each sweep, from ``u = 0``.

    ``init`` optionally supplies starting potentials ``(u, v)`` for warm
    starts; only ``u`` influences the iterates.
    """
    problem, config = _resolve(problem, config)
    if problem.n_marginals != 2:
        raise ShapeMismatchError(f"sinkhorn_2m needs two marginals, got {problem.n_marginals}")
    gauge = config.resolved_gauge(2)
    eps = problem.epsilon
    rho1, rho2 = problem.measures
    lw1, lw2 = rho1.log_weights, rho2.log_weights
    rows_u = np.ascontiguousarray(problem.cost.values)
    rows_v = np.ascontiguousarray(problem.cost.values.T)
    c = problem.cost.values

    def lam(w, lw):
        return eps * float(_lse_rows((w / eps + lw)[None, :])[0])

    def log_gamma_of(u, v):
        return (u[:, None] + v[None, :] - c) / eps + (lw1[:, None] + lw2[None, :])

    u, v = _initial(init, problem)
    mon = _Monitor(problem, config, _linear_term([u, v], problem) - eps * _exp_mass(log_gamma_of(u, v)))
    ell = [0.0, 0.0]
    converged = False
    n = 0
    for n in range(1, config.max_iter + 1):
        u_prev = u
        v = _transform_rows(rows_v, u, lw1, eps)
        ell[1] = -ell[0]
        u = _transform_rows(rows_u, v, lw2, eps)
        ell[0] = -ell[1]
        if gauge is Gauge.PAIR_RECENTER:
            a = _pair_shift(lam(u_prev, lw1), lam(v, lw2))
            v = v - a
            u = u + a
            ell[1] += a
            ell[0] -= a
        elif gauge is Gauge.PROJECTION_P:
            s = lam(u, lw1)
            u = u - s
            v = v + s
            ell[0] += s
            ell[1] -= s
        if mon.step(n, [u, v], log_gamma_of(u, v), ell, n == config.max_iter):
            converged = True
            break
    return mon.report([u, v], n, converged, gauge)


def sinkhorn_mm(problem: Problem, config: Optional[SolverConfig] = None, init=None) -> SolveReport:
    """N-marginal IPFP with cyclic ascending updates ``u_i = F_i(hat u_i)``.

    For N = 2 the sweep updates marginal 0 first, so its iterates coincide
    with :func:`sinkhorn_2m` run on :meth:`Problem.transposed`.
    """
    problem, config = _resolve(problem, config)
    N = problem.n_marginals
    if N < 2:
        raise ShapeMismatchError("sinkhorn_mm needs at least two marginals")
    gauge = config.resolved_gauge(N)
    if gauge is Gauge.PAIR_RECENTER and N != 2:
        raise ShapeMismatchError("pair recentering is only defined for two marginals")
    eps = problem.epsilon
    kernel = TransformKernel.for_problem(problem)
    us = _initial(init, problem)
    mon = _Monitor(problem, config,
                   _linear_term(us, problem) - eps * _exp_mass(log_coupling(us, problem)))
    ell = [0.0] * N
    converged = False
    n = 0
    for n in range(1, config.max_iter + 1):
        prev_last = us[-1]
        for i in range(N):
            us[i] = kernel.transform_full(i, us)
            ell[i] = -math.fsum(ell[j] for j in range(N) if j != i)
        if gauge is Gauge.PAIR_RECENTER:
            a = _pair_shift(kernel.lam(1, prev_last), kernel.lam(0, us[0]))
            us[0] = us[0] - a
            us[1] = us[1] + a
            ell[0] += a
            ell[1] -= a
        elif gauge is Gauge.PROJECTION_P:
            lams = [kernel.lam(i, us[i]) for i in range(N - 1)]
            for i, s in enumerate(project_gauge_shifts(lams + [0.0])):
                us[i] = us[i] + s
                ell[i] -= s
        if mon.step(n, us, log_coupling(us, problem), ell, n == config.max_iter):
            converged = True
            break
    return mon.report(us, n, converged, gauge)


def solve(problem: Problem, config: Optional[SolverConfig] = None, init=None) -> SolveReport:
    """Dispatch to :func:`sinkhorn_2m` or :func:`sinkhorn_mm` by marginal count."""
    if problem.n_marginals == 2:
        return sinkhorn_2m(problem, config, init)
    return sinkhorn_mm(problem, config, init)


@dataclass(frozen=True)
class ReferenceSolve:
    """Solution of ``min int c dgamma + eps*KL(gamma | m_1 x ... x m_N)``."""

    potentials: tuple[Potential, ...]
    coupling: Coupling
    value: float
    converged: bool
    iterations: int
    marginal_residual_l1: tuple[float, ...]


def sinkhorn_reference(problem: Problem, config: Optional[SolverConfig] = None) -> ReferenceSolve:
    """IPFP for the problem penalized against its reference measures.

    Potentials ``phi_i`` parametrize ``gamma = exp((sum phi_i - c)/eps) prod m_i``
    and are updated cyclically by
    ``phi_i = eps*log(rho_i/m_i) + [transform against m of the others]``,
    which for two marginals is :func:`~entrobridge.transform.conjugate_with_reference`.
    """
    problem, config = _resolve(problem, config)
    eps = problem.epsilon
    N = problem.n_marginals
    m_w = problem.reference_weights()
    log_m = [np.log(w) for w in m_w]
    offsets = [eps * (rho.log_weights - lm) for rho, lm in zip(problem.measures, log_m)]
    kernel = TransformKernel(problem.cost, log_m, eps)
    base = log_product_weights(log_m)
    phis = [np.zeros(m.size) for m in problem.measures]
    converged = False
    n = 0
    res: tuple[float, ...] = ()
    gamma = None
    for n in range(1, config.max_iter + 1):
        for i in range(N):
            phis[i] = offsets[i] + kernel.transform_full(i, phis)
        sum_phi = np.zeros(())
        for phi in phis:
            sum_phi = np.add.outer(sum_phi, phi)
        gamma = np.exp((sum_phi - problem.cost.values) / eps + base)
        sums = [axis_sums(gamma, i) for i in range(N)]
        res = tuple(math.fsum(np.abs(s - m.weights)) for s, m in zip(sums, problem.measures))
        sup = max(float(np.max(np.abs(s / m.weights - 1.0))) for s, m in zip(sums, problem.measures))
        if max(res) <= config.tol_marginal and sup <= 10.0 * config.tol_marginal:
            converged = True
            break
    pos = gamma > 0
    transport = math.fsum(problem.cost.values[pos] * gamma[pos])
    value = transport + eps * kl_divergence(gamma, 0.0, np.exp(base))
    pots = tuple(Potential(i, p) for i, p in enumerate(phis))
    return ReferenceSolve(pots, Coupling(gamma), value, converged, n, res)
