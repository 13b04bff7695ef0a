"""Independent reference solvers for small instances.

Nothing here calls the Sinkhorn machinery or the entropic transforms except
:func:`epsilon_sweep`, which is the harness comparing the two. The exact
solvers enumerate vertices of the transport polytope; the entropic ones
minimize the primal objective directly over the polytope.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import Coupling, EntroBridgeError, Problem, ShapeMismatchError, SolverConfig

PERMUTATION_MAX_N = 8
ASSIGNMENT_DP_MAX_N = 12
VERTEX_MAX_CELLS = 12
ENTROPIC_MAX_DIM = 4
TIE_RTOL = 1e-12
DEFAULT_GRID = {1: 1000, 2: 200, 3: 40, 4: 20}


class OracleSizeError(EntroBridgeError, ValueError):
    """The instance is too large for exhaustive search."""


def _is_uniform(w: np.ndarray) -> bool:
    return bool(np.all(np.abs(w - 1.0 / w.size) <= 1e-12))


def _lex_smaller(a: np.ndarray, b: np.ndarray, atol: float = 1e-15) -> bool:
    d = np.flatnonzero(np.abs(a.ravel() - b.ravel()) > atol)
    return bool(d.size) and a.ravel()[d[0]] < b.ravel()[d[0]]


def _ties(a: float, b: float) -> bool:
    if not (math.isfinite(a) and math.isfinite(b)):
        return False
    return abs(a - b) <= TIE_RTOL * max(1.0, abs(a), abs(b))


def _perm_coupling(perm: Sequence[int], n: int) -> np.ndarray:
    g = np.zeros((n, n))
    g[np.arange(n), list(perm)] = 1.0 / n
    return g


def _ot_permutations(c: np.ndarray) -> tuple[float, np.ndarray]:
    n = c.shape[0]
    best, best_perm = math.inf, None
    rows = range(n)
    # Descending lexicographic order of permutations is ascending order of
    # their coupling matrices, so the first optimum found wins ties.
    for perm in itertools.permutations(range(n - 1, -1, -1)):
        val = math.fsum(c[i, j] for i, j in zip(rows, perm)) / n
        if val < best and not _ties(val, best):
            best, best_perm = val, perm
    return best, _perm_coupling(best_perm, n)


def _ot_assignment_dp(c: np.ndarray) -> tuple[float, np.ndarray]:
    n = c.shape[0]
    full = (1 << n) - 1
    # g[mask]: cheapest completion of rows popcount(mask).. with unused columns
    g = [0.0] * (1 << n)
    for mask in range(full - 1, -1, -1):
        k = bin(mask).count("1")
        g[mask] = min(c[k, j] + g[mask | (1 << j)] for j in range(n) if not mask >> j & 1)
    perm, mask = [], 0
    for k in range(n):
        for j in range(n - 1, -1, -1):
            if not mask >> j & 1 and _ties(c[k, j] + g[mask | (1 << j)], g[mask]):
                perm.append(j)
                mask |= 1 << j
                break
    value = math.fsum(c[i, j] for i, j in enumerate(perm)) / n
    return value, _perm_coupling(perm, n)


def _ot_vertices(c: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> tuple[float, np.ndarray]:
    n, m = c.shape
    A = _constraint_matrix((n, m))[:-1]  # one marginal equation is redundant
    b = np.concatenate([r1, r2])[:-1]
    best, best_g = math.inf, None
    rank = n + m - 1
    for cells in itertools.combinations(range(n * m), rank):
        sub = A[:, cells]
        if np.linalg.matrix_rank(sub) < rank:
            continue
        x = np.linalg.solve(sub, b)
        if np.any(x < -1e-14):
            continue
        g = np.zeros(n * m)
        g[list(cells)] = np.maximum(x, 0.0)
        g = g.reshape(n, m)
        val = math.fsum((c * g).ravel())
        if best_g is None or (val < best and not _ties(val, best)) or (
            _ties(val, best) and _lex_smaller(g, best_g)
        ):
            best, best_g = min(val, best), g
    return best, best_g


def brute_force_ot(problem: Problem) -> tuple[float, Coupling]:
    """Exact ``min int c dgamma`` over two-marginal couplings by enumeration.

    Uniform marginals with equal atom counts are solved over permutation
    matrices (all permutations up to n = 8, a subset dynamic program up to
    n = 12); otherwise every basic feasible solution is enumerated, which
    needs ``n * m <= 12``. Ties go to the lexicographically smallest coupling.
    """
    if problem.n_marginals != 2:
        raise OracleSizeError("brute_force_ot handles two marginals only")
    r1, r2 = (m.weights for m in problem.measures)
    n, m = problem.shape
    c = problem.cost.values
    if n == m and _is_uniform(r1) and _is_uniform(r2) and n <= ASSIGNMENT_DP_MAX_N:
        value, g = _ot_permutations(c) if n <= PERMUTATION_MAX_N else _ot_assignment_dp(c)
    elif n * m <= VERTEX_MAX_CELLS:
        value, g = _ot_vertices(c, r1, r2)
    else:
        raise OracleSizeError(
            f"{n}x{m} instance too large for exhaustive search: need uniform marginals with "
            f"n = m <= {ASSIGNMENT_DP_MAX_N}, or n*m <= {VERTEX_MAX_CELLS}"
        )
    return value, Coupling(g)


def _constraint_matrix(shape: tuple[int, ...]) -> np.ndarray:
    """Rows map a flattened array to its concatenated axis sums."""
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    rows = []
    for i, n_i in enumerate(shape):
        moved = np.moveaxis(idx, i, 0).reshape(n_i, -1)
        for a in range(n_i):
            row = np.zeros(size)
            row[moved[a]] = 1.0
            rows.append(row)
    return np.array(rows)


class _Objective:
    """``int c dgamma + eps*KL(gamma | prod rho)`` on flattened arrays."""

    def __init__(self, problem: Problem):
        self.c = problem.cost.values.ravel()
        base = np.ones(())
        for m in problem.measures:
            base = np.multiply.outer(base, m.weights)
        self.log_base = np.log(base.ravel())
        self.eps = problem.epsilon

    def __call__(self, g: np.ndarray) -> np.ndarray:
        """Vectorized over leading axes; ``inf`` outside the nonnegative orthant."""
        g = np.asarray(g, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(g > 0, g * (np.log(g) - self.log_base), 0.0)
        val = (g * self.c).sum(axis=-1) + self.eps * ent.sum(axis=-1)
        return np.where(np.all(g >= 0, axis=-1), val, np.inf)

    def exact(self, g: np.ndarray) -> float:
        pos = g > 0
        return math.fsum(self.c[pos] * g[pos]) + self.eps * math.fsum(
            g[pos] * (np.log(g[pos]) - self.log_base[pos])
        )


def _golden(f, lo: float, hi: float, tol: float = 1e-15, max_iter: int = 200) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1, x2 = b - invphi * (b - a), a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    return x1 if f1 <= f2 else x2


def _newton_polish(obj: _Objective, g0: np.ndarray, basis: np.ndarray,
                   max_iter: int = 100) -> np.ndarray:
    """Damped Newton on the affine slice ``g0 + basis @ t`` with golden line search.

    ``g0`` must be strictly positive; iterates stay strictly positive.
    """
    g = g0.copy()
    eps = obj.eps
    for _ in range(max_iter):
        grad = obj.c + eps * (np.log(g) - obj.log_base + 1.0)
        hess = (basis.T * (eps / g)) @ basis
        rhs = basis.T @ grad
        step = -np.linalg.solve(hess, rhs)
        decrement = float(-rhs @ step)
        if decrement <= 1e-28:
            break
        d = basis @ step
        neg = d < 0
        a_max = min(1.0, 0.99 * float(np.min(-g[neg] / d[neg]))) if np.any(neg) else 1.0
        if a_max >= 1.0 and decrement < 1e-12:
            # quadratic regime: objective differences are below rounding,
            # so take the full step and stop on the decrement alone
            g = g + d
            continue
        alpha = _golden(lambda a: float(obj(g + a * d)), 0.0, a_max, tol=1e-12)
        g_new = g + alpha * d
        if obj.exact(g_new) > obj.exact(g) + 1e-16 or np.any(g_new <= 0):
            break
        g = g_new
    return g


def _null_basis(shape: tuple[int, ...]) -> np.ndarray:
    A = _constraint_matrix(shape)
    _, s, vt = np.linalg.svd(A)
    rank = int(np.sum(s > 1e-10 * s[0]))
    return vt[rank:].T


def _free_coordinates(problem: Problem):
    """Map between free block ``gamma[:-1, :-1]`` and full two-marginal couplings."""
    r1, r2 = (m.weights for m in problem.measures)
    n, m = problem.shape

    def full(t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        lead = t.shape[:-1]
        block = t.reshape(lead + (n - 1, m - 1))
        last_col = r1[:-1] - block.sum(axis=-1)
        top = np.concatenate([block, last_col[..., None]], axis=-1)
        last_row = r2 - top.sum(axis=-2)
        return np.concatenate([top, last_row[..., None, :]], axis=-2).reshape(lead + (n * m,))

    return full


def brute_force_entropic(problem: Problem, grid_resolution: Optional[int] = None) -> tuple[float, Coupling]:
    """Direct minimization of ``int c dgamma + eps*KL(gamma | rho1 x rho2)``.

    The free coordinates are ``gamma[i, j]`` for ``i < n-1, j < m-1``. An
    exhaustive grid over their box is followed by cyclic golden-section
    coordinate searches and a final damped Newton polish on the polytope.
    """
    if problem.n_marginals != 2:
        raise OracleSizeError("brute_force_entropic handles two marginals; use brute_force_entropic_mm")
    n, m = problem.shape
    dim = (n - 1) * (m - 1)
    if dim > ENTROPIC_MAX_DIM:
        raise OracleSizeError(f"transport polytope has {dim} free parameters, limit is {ENTROPIC_MAX_DIM}")
    obj = _Objective(problem)
    full = _free_coordinates(problem)
    if dim == 0:
        g = full(np.zeros(0))
        return obj.exact(g), Coupling(g.reshape(n, m))
    r1, r2 = (w.weights for w in problem.measures)
    res = grid_resolution or DEFAULT_GRID[dim]
    if res < 2:
        raise ValueError("grid_resolution must be at least 2")
    ub = np.minimum.outer(r1[:-1], r2[:-1]).ravel()
    axes = [np.linspace(0.0, b, res + 2)[1:-1] for b in ub]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    vals = obj(full(grid))
    t = grid[int(np.argmin(vals))].copy()
    f_t = float(obj(full(t)))

    for _ in range(500):
        before = t.copy()
        for k in range(dim):
            lo, hi = _coordinate_range(full, t, k, ub[k])
            def along(x, k=k):
                s = t.copy()
                s[k] = x
                return float(obj(full(s)))
            t[k] = _golden(along, lo, hi)
        f_new = float(obj(full(t)))
        if np.max(np.abs(t - before)) <= 1e-13 or f_t - f_new <= 1e-16:
            f_t = f_new
            break
        f_t = f_new
    g = full(t)
    if np.all(g > 0):
        g = _newton_polish(obj, g, _null_basis((n, m)))
    return obj.exact(g), Coupling(g.reshape(n, m))


def _coordinate_range(full, t: np.ndarray, k: int, ub: float) -> tuple[float, float]:
    # Each dependent entry is affine in t[k] with slope 0 or +-1.
    probe0, probe1 = t.copy(), t.copy()
    probe0[k], probe1[k] = 0.0, 1.0
    g0, g1 = full(probe0), full(probe1)
    slope = g1 - g0
    lo, hi = 0.0, ub
    for a, s in zip(g0, slope):
        if s > 0.5:
            lo = max(lo, -a)
        elif s < -0.5:
            hi = min(hi, a)
    return lo, hi


def brute_force_entropic_mm(problem: Problem) -> tuple[float, Coupling]:
    """Direct primal minimization for N marginals by damped Newton on the polytope.

    Starts at the product coupling and moves along a basis of the null space
    of the marginal constraints. Limited to ``3`` marginals of ``3`` atoms.
    """
    shape = problem.shape
    if problem.n_marginals > 3 or max(shape) > 3:
        raise OracleSizeError(f"brute_force_entropic_mm supports up to 3 marginals x 3 atoms, got {shape}")
    obj = _Objective(problem)
    g0 = np.exp(obj.log_base)
    basis = _null_basis(shape)
    if basis.shape[1] == 0:
        return obj.exact(g0), Coupling(g0.reshape(shape))
    g = _newton_polish(obj, g0, basis, max_iter=500)
    return obj.exact(g), Coupling(g.reshape(shape))


@dataclass(frozen=True)
class SweepResult:
    epsilons: tuple[float, ...]
    entropic_values: tuple[float, ...]
    exact_value: float
    gaps: tuple[float, ...]
    iterations: tuple[int, ...]
    converged: tuple[bool, ...]
    envelope_ok: tuple[bool, ...]
    cold_values: Optional[tuple[float, ...]] = None
    cold_converged: Optional[tuple[bool, ...]] = None

    @property
    def cold_match(self) -> Optional[tuple[bool, ...]]:
        """Warm and cold values agree within 1e-9 (only meaningful where both converged)."""
        if self.cold_values is None:
            return None
        return tuple(abs(a - b) <= 1e-9 for a, b in zip(self.entropic_values, self.cold_values))

    @property
    def ok(self) -> bool:
        cold_ok = self.cold_values is None or (all(self.cold_converged) and all(self.cold_match))
        return all(self.converged) and all(self.envelope_ok) and cold_ok


def envelope_bound(epsilon: float, shape: tuple[int, int]) -> float:
    """``eps * log(min(n, m))``: entropic minus exact cost is at most this."""
    return epsilon * math.log(min(shape))


def epsilon_sweep(problem: Problem, epsilons: Sequence[float], config: Optional[SolverConfig] = None,
                  cold_check: bool = False) -> SweepResult:
    """Entropic values along a descending ``eps`` schedule against the exact cost.

    Each solve warm-starts from the previous potentials. ``cold_check`` also
    solves every ``eps`` from zero potentials and keeps those values. Cold
    starts can need far more sweeps at small ``eps``: when the optimal
    coupling has entries of order ``exp(-1/eps)`` the residual from a zero
    start decays only like ``1/n``.
    """
    from .sinkhorn import sinkhorn_2m

    eps_list = [float(e) for e in epsilons]
    if not eps_list:
        raise ValueError("epsilon list is empty")
    if any(not (math.isfinite(e) and e > 0) for e in eps_list):
        raise ValueError(f"epsilons must be positive, got {eps_list}")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError(f"epsilons must be strictly descending, got {eps_list}")
    if problem.n_marginals != 2:
        raise ShapeMismatchError("epsilon_sweep needs a two-marginal problem")
    exact, _ = brute_force_ot(problem)
    base = config or problem.config
    values, gaps, iters, conv, env, cold, cold_conv = [], [], [], [], [], [], []
    init = None
    for e in eps_list:
        cfg = base.with_epsilon(e)
        rep = sinkhorn_2m(problem, cfg, init=init)
        init = rep.potentials
        gap = rep.primal - exact
        values.append(rep.primal)
        gaps.append(gap)
        iters.append(rep.iterations)
        conv.append(rep.converged)
        env.append(-1e-9 <= gap <= envelope_bound(e, problem.shape) + 1e-6)
        if cold_check:
            cold_rep = sinkhorn_2m(problem, cfg)
            cold.append(cold_rep.primal)
            cold_conv.append(cold_rep.converged)
    return SweepResult(tuple(eps_list), tuple(values), exact, tuple(gaps), tuple(iters),
                       tuple(conv), tuple(env), tuple(cold) if cold_check else None,
                       tuple(cold_conv) if cold_check else None)
