"""Domain types and problem construction.

Everything here is immutable after construction: arrays are copied and
flagged read-only, and the dataclasses are frozen.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WEIGHT_SUM_ATOL = 1e-12
COUPLING_MASS_ATOL = 1e-10
DEFAULT_ENTRY_CAP = 10**7


class EntroBridgeError(Exception):
    """Base class for all input/contract errors raised by this package."""


class ShapeMismatchError(EntroBridgeError, ValueError):
    pass


class NonFiniteCostError(EntroBridgeError, ValueError):
    pass


class NonPositiveWeightError(EntroBridgeError, ValueError):
    def __init__(self, atom_id: int, weight: float, what: str = "measure"):
        self.atom_id = atom_id
        self.weight = weight
        kind = "zero" if weight == 0 else "non-positive"
        super().__init__(f"{what} has {kind} weight {weight!r} at atom id {atom_id}")


class InvalidEpsilonError(EntroBridgeError, ValueError):
    pass


class InvalidConfigError(EntroBridgeError, ValueError):
    pass


class DuplicateAtomError(EntroBridgeError, ValueError):
    pass


class SupportError(EntroBridgeError, ValueError):
    """A reference measure does not charge some atom of its marginal."""


class CostTooLargeError(EntroBridgeError, ValueError):
    pass


class MarginalIndexError(EntroBridgeError, ValueError):
    pass


class NumericalInconsistencyError(EntroBridgeError, ArithmeticError):
    """Two mathematically equal evaluations disagreed beyond tolerance."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Atom:
    id: int
    coords: Optional[tuple[float, ...]] = None


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure with strictly positive weights.

    Weights are renormalized to sum to one at construction. Zero weights are
    rejected here; use :func:`strip_zero_atoms` on raw input to drop them.
    """

    atoms: tuple[Atom, ...]
    weights: np.ndarray

    def __post_init__(self):
        atoms = tuple(self.atoms)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if len(atoms) != w.size:
            raise ShapeMismatchError(f"{len(atoms)} atoms but {w.size} weights")
        if w.size == 0:
            raise ShapeMismatchError("a measure needs at least one atom")
        ids = [a.id for a in atoms]
        if len(set(ids)) != len(ids):
            raise DuplicateAtomError(f"duplicate atom ids in {ids}")
        for a, wi in zip(atoms, w):
            if not math.isfinite(wi) or wi <= 0:
                raise NonPositiveWeightError(a.id, float(wi))
        w = w / math.fsum(w)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "log_weights", _frozen(np.log(w)))

    @classmethod
    def from_weights(cls, weights, ids=None, coords=None) -> "DiscreteMeasure":
        weights = list(weights)
        if ids is None:
            ids = range(len(weights))
        ids = list(ids)
        if coords is None:
            coords = [None] * len(weights)
        if len(ids) != len(weights) or len(coords) != len(weights):
            raise ShapeMismatchError("ids/coords/weights length mismatch")
        atoms = tuple(
            Atom(int(i), None if x is None else tuple(float(t) for t in np.atleast_1d(x)))
            for i, x in zip(ids, coords)
        )
        return cls(atoms, weights)

    @classmethod
    def uniform(cls, n: int, coords=None) -> "DiscreteMeasure":
        return cls.from_weights(np.full(n, 1.0 / n), coords=coords)

    @property
    def size(self) -> int:
        return len(self.atoms)

    @property
    def ids(self) -> list[int]:
        return [a.id for a in self.atoms]

    def coordinates(self) -> np.ndarray:
        """Return an (n, d) coordinate array; every atom must carry coords."""
        missing = [a.id for a in self.atoms if a.coords is None]
        if missing:
            raise ShapeMismatchError(f"atoms {missing} have no coordinates")
        dims = {len(a.coords) for a in self.atoms}
        if len(dims) != 1:
            raise ShapeMismatchError(f"atoms have mixed coordinate dimensions {sorted(dims)}")
        return np.array([a.coords for a in self.atoms], dtype=float)


def strip_zero_atoms(weights, ids=None, label: str = "measure"):
    """Indices of atoms to keep after dropping zero weights.

    Negative or non-finite weights raise :class:`NonPositiveWeightError`;
    exact zeros are dropped with a warning.
    """
    w = np.asarray(weights, dtype=float)
    ids = list(range(w.size)) if ids is None else list(ids)
    keep = []
    for k, (i, wi) in enumerate(zip(ids, w)):
        if not math.isfinite(wi) or wi < 0:
            raise NonPositiveWeightError(i, float(wi), label)
        if wi == 0:
            warnings.warn(f"{label}: dropping zero-weight atom id {i}", stacklevel=2)
        else:
            keep.append(k)
    if not keep:
        raise NonPositiveWeightError(ids[0] if ids else -1, 0.0, label)
    return keep


@dataclass(frozen=True, eq=False)
class CostTensor:
    """Dense finite cost over the product of the marginals' atom sets."""

    values: np.ndarray
    entry_cap: int = DEFAULT_ENTRY_CAP

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim < 2:
            raise ShapeMismatchError(f"cost must have rank >= 2, got rank {v.ndim}")
        if v.size > self.entry_cap:
            raise CostTooLargeError(f"cost has {v.size} entries, cap is {self.entry_cap}")
        if not np.all(np.isfinite(v)):
            bad = tuple(int(k) for k in np.argwhere(~np.isfinite(v))[0])
            raise NonFiniteCostError(f"cost entry {bad} is {v[bad]!r}")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "sup_norm", float(np.max(np.abs(v))))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def rank(self) -> int:
        return self.values.ndim

    def transposed(self, axes: Sequence[int]) -> "CostTensor":
        return CostTensor(np.transpose(self.values, axes), self.entry_cap)


@dataclass(frozen=True, eq=False)
class Potential:
    """Dual potential ``u_i`` living on marginal ``marginal_index``.

    The scaling used by the multiplicative IPFP form is ``exp(values / eps)``;
    see :meth:`scaling`.
    """

    marginal_index: int
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(np.asarray(self.values, dtype=float).reshape(-1))
        if not np.all(np.isfinite(v)):
            raise ValueError("potential entries must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def scaling(self, epsilon: float) -> np.ndarray:
        return np.exp(self.values / epsilon)


@dataclass(frozen=True, eq=False)
class Coupling:
    """Nonnegative array over the product of atom sets.

    Couplings built from arbitrary potentials are not normalized; use
    :attr:`total_mass` / :meth:`is_probability` to check.
    """

    mass: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mass)
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ValueError("coupling entries must be finite and nonnegative")
        object.__setattr__(self, "mass", m)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mass.shape

    @property
    def total_mass(self) -> float:
        return math.fsum(self.mass.ravel())

    def is_probability(self, atol: float = COUPLING_MASS_ATOL) -> bool:
        return abs(self.total_mass - 1.0) <= atol


class Gauge(str, enum.Enum):
    PAIR_RECENTER = "pair_recenter"
    PROJECTION_P = "projection_P"
    NONE = "none"


@dataclass(frozen=True)
class SolverConfig:
    """Solver parameters.

    ``gauge=None`` selects the default: pair recentering for two marginals,
    the projection ``P`` otherwise.
    """

    epsilon: float
    max_iter: int = 100_000
    tol_marginal: float = 1e-9
    tol_dual_increment: float = 1e-12
    gauge: Optional[Gauge] = None
    record_trace_every: int = 1

    def __post_init__(self):
        eps = self.epsilon
        if not (isinstance(eps, (int, float)) and math.isfinite(eps) and eps > 0):
            raise InvalidEpsilonError(f"epsilon must be a positive finite real, got {eps!r}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise InvalidConfigError(f"max_iter must be a positive integer, got {self.max_iter!r}")
        for name in ("tol_marginal", "tol_dual_increment"):
            t = getattr(self, name)
            if not (math.isfinite(t) and t > 0):
                raise InvalidConfigError(f"{name} must be positive, got {t!r}")
        if int(self.record_trace_every) != self.record_trace_every or self.record_trace_every < 1:
            raise InvalidConfigError("record_trace_every must be a positive integer")
        if self.gauge is not None:
            object.__setattr__(self, "gauge", Gauge(self.gauge))
        object.__setattr__(self, "epsilon", float(eps))

    def resolved_gauge(self, n_marginals: int) -> Gauge:
        if self.gauge is not None:
            return self.gauge
        return Gauge.PAIR_RECENTER if n_marginals == 2 else Gauge.PROJECTION_P

    def with_epsilon(self, epsilon: float) -> "SolverConfig":
        return SolverConfig(
            epsilon, self.max_iter, self.tol_marginal, self.tol_dual_increment,
            self.gauge, self.record_trace_every,
        )


@dataclass(frozen=True, eq=False)
class Problem:
    measures: tuple[DiscreteMeasure, ...]
    cost: CostTensor
    config: SolverConfig
    references: Optional[tuple[DiscreteMeasure, ...]] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_marginals(self) -> int:
        return len(self.measures)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cost.shape

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    @property
    def log_weights(self) -> list[np.ndarray]:
        return [m.log_weights for m in self.measures]

    def with_config(self, config: SolverConfig) -> "Problem":
        return Problem(self.measures, self.cost, config, self.references)

    def transposed(self) -> "Problem":
        """Two-marginal problem with the roles of the marginals swapped."""
        if self.n_marginals != 2:
            raise ShapeMismatchError("transposed() is defined for two marginals only")
        refs = None if self.references is None else self.references[::-1]
        return Problem(self.measures[::-1], self.cost.transposed((1, 0)), self.config, refs)

    def reference_weights(self) -> list[np.ndarray]:
        """Reference weights aligned to each marginal's atoms (by atom id).

        Reference atoms outside the marginal's support are dropped (they carry
        no coupling mass), so the aligned arrays may sum to less than one.
        """
        if self.references is None:
            raise SupportError("problem has no reference measures")
        if "ref_w" not in self._cache:
            out = []
            for k, (rho, m) in enumerate(zip(self.measures, self.references)):
                lookup = dict(zip(m.ids, m.weights))
                missing = [i for i in rho.ids if i not in lookup]
                if missing:
                    raise SupportError(
                        f"reference {k} does not charge atom ids {missing} of marginal {k}"
                    )
                out.append(_frozen([lookup[i] for i in rho.ids]))
            self._cache["ref_w"] = out
        return self._cache["ref_w"]


def build_problem(
    measures: Sequence[DiscreteMeasure],
    cost: CostTensor | np.ndarray,
    config: SolverConfig,
    references: Optional[Sequence[DiscreteMeasure]] = None,
) -> Problem:
    """Validate and assemble an immutable problem instance."""
    if not isinstance(cost, CostTensor):
        cost = CostTensor(cost)
    if not isinstance(config, SolverConfig):
        raise InvalidConfigError("config must be a SolverConfig")
    measures = tuple(measures)
    if len(measures) != cost.rank:
        raise ShapeMismatchError(f"{len(measures)} measures for a rank-{cost.rank} cost")
    sizes = tuple(m.size for m in measures)
    if sizes != cost.shape:
        raise ShapeMismatchError(f"measure sizes {sizes} do not match cost shape {cost.shape}")
    if references is not None:
        references = tuple(references)
        if len(references) != len(measures):
            raise ShapeMismatchError("need one reference measure per marginal")
    problem = Problem(measures, cost, config, references)
    if references is not None:
        problem.reference_weights()
    return problem


def gibbs_log_kernel(cost: CostTensor | np.ndarray, epsilon: float) -> np.ndarray:
    """Entrywise ``-c / eps``: the log-density of the Gibbs kernel."""
    if not (math.isfinite(epsilon) and epsilon > 0):
        raise InvalidEpsilonError(f"epsilon must be positive, got {epsilon!r}")
    values = cost.values if isinstance(cost, CostTensor) else np.asarray(cost, dtype=float)
    return _frozen(-values / epsilon)


def axis_sums(mass: np.ndarray, i: int) -> np.ndarray:
    """Sum of ``mass`` over every axis but ``i``.

    The reduction always runs over a contiguous trailing block so the result
    does not depend on where axis ``i`` sits in memory.
    """
    rows = np.ascontiguousarray(np.moveaxis(mass, i, 0)).reshape(mass.shape[i], -1)
    return rows.sum(axis=1)


def log_product_weights(log_weights: Sequence[np.ndarray]) -> np.ndarray:
    """Log-density of the product measure, as an N-dimensional array."""
    out = np.zeros(())
    for lw in log_weights:
        out = np.add.outer(out, lw)
    return out


def product_weights(measures: Sequence[DiscreteMeasure]) -> np.ndarray:
    out = np.ones(())
    for m in measures:
        out = np.multiply.outer(out, m.weights)
    return out
