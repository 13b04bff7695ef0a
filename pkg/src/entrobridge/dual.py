"""Primal and dual objectives, KL divergences and optimality diagnostics.

Global reductions use :func:`math.fsum`, which is correctly rounded and hence
independent of summation order; relabelling the marginals of a problem does
not change any value reported here by a single bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    CostTensor,
    Coupling,
    DiscreteMeasure,
    NumericalInconsistencyError,
    Potential,
    Problem,
    ShapeMismatchError,
    SolverConfig,
    axis_sums,
    gibbs_log_kernel,
    log_product_weights,
)
from .transform import TransformKernel, _values

PRIMAL_FORMS_RTOL = 1e-10


class WeakDualityViolation(NumericalInconsistencyError):
    pass


def _mass(gamma) -> np.ndarray:
    return gamma.mass if isinstance(gamma, Coupling) else np.asarray(gamma, dtype=float)


def _potential_values(us, problem: Problem) -> list[np.ndarray]:
    if len(us) != problem.n_marginals:
        raise ShapeMismatchError(f"need {problem.n_marginals} potentials, got {len(us)}")
    return [_values(u, m.size, k) for k, (u, m) in enumerate(zip(us, problem.measures))]


def _outer_sum(vectors) -> np.ndarray:
    out = np.zeros(())
    for v in vectors:
        out = np.add.outer(out, v)
    return out


def log_coupling(us, problem: Problem) -> np.ndarray:
    """``(sum_i u_i(x_i) - c) / eps + log prod_i rho_i(x_i)`` as an N-d array."""
    vals = _potential_values(us, problem)
    eps = problem.epsilon
    return (_outer_sum(vals) - problem.cost.values) / eps + log_product_weights(problem.log_weights)


def _linear_term(vals, problem: Problem) -> float:
    return math.fsum(np.concatenate([u * m.weights for u, m in zip(vals, problem.measures)]))


def _exp_mass(log_gamma: np.ndarray) -> float:
    top = float(log_gamma.max())
    t = top + math.log(math.fsum(np.exp(log_gamma - top).ravel()))
    return math.exp(t) if t < 709.78 else math.inf


def kl_divergence(gamma, log_kernel_density, base) -> float:
    """``KL(gamma | k * base)`` in nats, with the convention ``0 log 0 = 0``.

    ``gamma`` is given by its masses, ``base`` by the product reference masses
    (an array, or a sequence of measures whose product is taken) and
    ``log_kernel_density`` is ``log k`` with respect to ``base``.
    """
    g = _mass(gamma)
    if not isinstance(base, np.ndarray):
        base = np.exp(log_product_weights([m.log_weights for m in base]))
    log_k = np.broadcast_to(np.asarray(log_kernel_density, dtype=float), g.shape)
    if base.shape != g.shape:
        raise ShapeMismatchError(f"coupling shape {g.shape} vs base shape {base.shape}")
    pos = g > 0
    if np.any(pos & (base <= 0)):
        return math.inf
    gp, bp = g[pos], base[pos]
    return math.fsum(gp * (np.log(gp) - np.log(bp) - log_k[pos]))


def primal_value(gamma, cost: CostTensor, measures: Sequence[DiscreteMeasure], epsilon: float) -> float:
    """``eps * KL(gamma | K)`` for the Gibbs kernel ``K = exp(-c/eps) prod rho_i``.

    Also evaluates ``int c dgamma + eps * KL(gamma | prod rho_i)`` and raises
    :class:`NumericalInconsistencyError` if the two forms disagree.
    """
    g = _mass(gamma)
    if g.shape != cost.shape:
        raise ShapeMismatchError(f"coupling shape {g.shape} vs cost shape {cost.shape}")
    lw = log_product_weights([m.log_weights for m in measures])
    if lw.shape != g.shape:
        raise ShapeMismatchError("measures do not match coupling shape")
    pos = g > 0
    gp = g[pos]
    log_density = np.log(gp) - lw[pos]
    kl_form = epsilon * kl_divergence(g, gibbs_log_kernel(cost, epsilon), np.exp(lw))
    split_form = math.fsum(cost.values[pos] * gp) + epsilon * math.fsum(gp * log_density)
    if abs(kl_form - split_form) > PRIMAL_FORMS_RTOL * max(1.0, abs(split_form)):
        raise NumericalInconsistencyError(
            f"primal forms disagree: KL form {kl_form!r}, cost+entropy form {split_form!r}"
        )
    return kl_form


def transport_and_entropy(gamma, problem: Problem) -> tuple[float, float]:
    """Split of the primal value into ``int c dgamma`` and ``eps * KL(gamma | prod rho)``."""
    g = _mass(gamma)
    lw = log_product_weights(problem.log_weights)
    pos = g > 0
    gp = g[pos]
    transport = math.fsum(problem.cost.values[pos] * gp)
    return transport, problem.epsilon * math.fsum(gp * (np.log(gp) - lw[pos]))


def dual_value(u, v, problem: Problem) -> float:
    """Two-marginal dual functional ``D_eps(u, v)``."""
    if problem.n_marginals != 2:
        raise ShapeMismatchError("dual_value needs a two-marginal problem; use dual_value_mm")
    rho1, rho2 = problem.measures
    u = _values(u, rho1.size, 0)
    v = _values(v, rho2.size, 1)
    eps = problem.epsilon
    log_gamma = (u[:, None] + v[None, :] - problem.cost.values) / eps + (
        rho1.log_weights[:, None] + rho2.log_weights[None, :]
    )
    return _linear_term([u, v], problem) - eps * _exp_mass(log_gamma)


def dual_value_mm(us, problem: Problem) -> float:
    """Multi-marginal dual functional ``D^N_eps(u_1, ..., u_N)``."""
    vals = _potential_values(us, problem)
    return _linear_term(vals, problem) - problem.epsilon * _exp_mass(log_coupling(vals, problem))


def coupling_from_potentials(us, problem: Problem) -> Coupling:
    """``exp((sum_i u_i - c)/eps) prod_i rho_i``; not renormalized."""
    return Coupling(np.exp(log_coupling(us, problem)))


def marginal_densities(gamma, measures: Sequence[DiscreteMeasure]) -> list[np.ndarray]:
    g = _mass(gamma)
    return [axis_sums(g, i) / m.weights for i, m in enumerate(measures)]


def fixed_point_gaps(us, problem: Problem) -> list[np.ndarray]:
    """``u_i - F_i(hat u_i)`` for every marginal."""
    vals = _potential_values(us, problem)
    kernel = TransformKernel.for_problem(problem)
    return [vals[i] - kernel.transform_full(i, vals) for i in range(problem.n_marginals)]


def fixed_point_residual(us, problem: Problem) -> float:
    return max(float(np.max(np.abs(d))) for d in fixed_point_gaps(us, problem))


def schrodinger_residual(us, problem: Problem) -> float:
    """``max_i || exp((u_i - F_i(hat u_i)) / eps) - 1 ||_inf``.

    Zero exactly when ``a_i = exp(u_i / eps)`` solve the Schrödinger system.
    """
    eps = problem.epsilon
    return max(float(np.max(np.abs(np.expm1(d / eps)))) for d in fixed_point_gaps(us, problem))


def validation_tolerance(config: SolverConfig, cost: CostTensor) -> float:
    """Tolerance at which a converged solve is expected to validate."""
    return 10.0 * config.tol_marginal * max(1.0, cost.sup_norm, config.epsilon)


@dataclass(frozen=True)
class OptimalityReport:
    """The four equivalent optimality conditions, measured.

    (1) ``dual_deficit``: best known dual value minus this one;
    (2) ``fixed_point_residual_linf``: ``max_i ||u_i - F_i(hat u_i)||``;
    (3) ``marginal_residual_l1``: distance of the induced coupling's marginals;
    (4) ``gap``: ``primal - (dual + eps)``.
    """

    dual_value: float
    primal_value: float
    gap: float
    schrodinger_residual_linf: float
    marginal_residual_l1: tuple[float, ...]
    fixed_point_residual_linf: float
    dual_deficit: float = 0.0
    weak_duality_margin: Optional[float] = None
    tol: float = 1e-10

    @property
    def optimal(self) -> bool:
        t = self.tol
        return (
            self.dual_deficit <= t
            and self.fixed_point_residual_linf <= t
            and self.schrodinger_residual_linf <= t
            and max(self.marginal_residual_l1) <= t
            and abs(self.gap) <= t
        )

    def as_dict(self) -> dict:
        return {
            "dual_value": self.dual_value,
            "primal_value": self.primal_value,
            "gap": self.gap,
            "schrodinger_residual_linf": self.schrodinger_residual_linf,
            "marginal_residual_l1": list(self.marginal_residual_l1),
            "fixed_point_residual_linf": self.fixed_point_residual_linf,
            "dual_deficit": self.dual_deficit,
            "weak_duality_margin": self.weak_duality_margin,
            "tol": self.tol,
            "optimal": self.optimal,
        }


def weak_duality_margin(gamma, us, problem: Problem) -> float:
    """``eps * KL(gamma | K) - (D_eps(u) + eps)``; nonnegative for feasible ``gamma``."""
    eps = problem.epsilon
    primal = primal_value(gamma, problem.cost, problem.measures, eps)
    return primal - (dual_value_mm(us, problem) + eps)


def check_complementarity(us, problem: Problem, tol: float = 1e-10,
                          best_dual: Optional[float] = None, gamma=None) -> OptimalityReport:
    """Evaluate every optimality condition for the potentials ``us``.

    If a feasible coupling ``gamma`` is supplied, the weak duality inequality
    ``eps*KL(gamma|K) >= D_eps(u) + eps - tol`` is asserted as well.
    """
    vals = _potential_values(us, problem)
    eps = problem.epsilon
    dual = dual_value_mm(vals, problem)
    induced = coupling_from_potentials(vals, problem)
    primal = primal_value(induced, problem.cost, problem.measures, eps)
    gaps = fixed_point_gaps(vals, problem)
    sums = [axis_sums(induced.mass, i) for i in range(problem.n_marginals)]
    residual_l1 = tuple(math.fsum(np.abs(s - m.weights)) for s, m in zip(sums, problem.measures))
    margin = None
    if gamma is not None:
        margin = weak_duality_margin(gamma, vals, problem)
        if margin < -tol:
            raise WeakDualityViolation(f"eps*KL(gamma|K) - (D + eps) = {margin!r} < -{tol}")
    return OptimalityReport(
        dual_value=dual,
        primal_value=primal,
        gap=primal - (dual + eps),
        schrodinger_residual_linf=max(float(np.max(np.abs(np.expm1(d / eps)))) for d in gaps),
        marginal_residual_l1=residual_l1,
        fixed_point_residual_linf=max(float(np.max(np.abs(d))) for d in gaps),
        dual_deficit=0.0 if best_dual is None else max(0.0, best_dual - dual),
        weak_duality_margin=margin,
        tol=tol,
    )


def kl_of_measures(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p | q)`` for weight vectors, ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return math.fsum(p[pos] * (np.log(p[pos]) - np.log(q[pos])))


def kl_decomposition(gamma, reference_weights: Sequence[np.ndarray]) -> tuple[float, float, list[float]]:
    """Both sides of ``KL(g | m_1 x ... x m_N) = KL(g | rho_1 x ... x rho_N) + sum_i KL(rho_i | m_i)``.

    ``rho_i`` are the actual marginals of ``gamma``. Returns
    ``(lhs, KL(g | prod rho), [KL(rho_i | m_i), ...])``.
    """
    g = _mass(gamma)
    refs = [np.asarray(m, dtype=float) for m in reference_weights]
    if tuple(r.size for r in refs) != g.shape:
        raise ShapeMismatchError("reference weights do not match coupling shape")
    margs = [axis_sums(g, i) for i in range(g.ndim)]
    lhs = kl_divergence(g, 0.0, _outer_product(refs))
    with np.errstate(divide="ignore"):
        base = _outer_product(margs)
    mid = kl_divergence(g, 0.0, base)
    return lhs, mid, [kl_of_measures(r, m) for r, m in zip(margs, refs)]


def _outer_product(vectors) -> np.ndarray:
    out = np.ones(())
    for v in vectors:
        out = np.multiply.outer(out, v)
    return out


@dataclass(frozen=True)
class ReferenceReduction:
    s_eps: float
    ot_eps: float
    kl_term: float
    s_converged: bool
    ot_converged: bool

    @property
    def residual(self) -> float:
        return self.s_eps - (self.ot_eps + self.kl_term)


def reference_reduction(problem: Problem, config: Optional[SolverConfig] = None,
                        tol: Optional[float] = None) -> ReferenceReduction:
    """Solve the problem against its references and against its marginals.

    Returns the reference-penalized value, the plain entropic value and
    ``eps * sum_i KL(rho_i | m_i)``; the first equals the sum of the others.
    With ``tol`` given, a larger discrepancy raises
    :class:`NumericalInconsistencyError`.
    """
    from .sinkhorn import sinkhorn_mm, sinkhorn_reference

    config = config or problem.config
    ref_w = problem.reference_weights()
    plain = Problem(problem.measures, problem.cost, config)
    ot = sinkhorn_mm(plain, config)
    s = sinkhorn_reference(problem, config)
    kl_term = config.epsilon * math.fsum(
        kl_of_measures(m.weights, w) for m, w in zip(problem.measures, ref_w)
    )
    out = ReferenceReduction(s.value, ot.primal, kl_term, s.converged, ot.converged)
    if tol is not None and abs(out.residual) > tol:
        raise NumericalInconsistencyError(
            f"S_eps - (OT_eps + eps*KL terms) = {out.residual!r} exceeds {tol}"
        )
    return out
