"""Command-line interface: ``entrobridge solve | sweep | validate``.

Exit codes: 0 converged / valid, 1 input error, 2 iteration budget
exhausted, 3 validation (or envelope) failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    CostTensor,
    DiscreteMeasure,
    EntroBridgeError,
    Gauge,
    Problem,
    SolverConfig,
    build_problem,
    strip_zero_atoms,
)
from .dual import check_complementarity, reference_reduction
from .oracle import OracleSizeError, epsilon_sweep
from .sinkhorn import SolveReport, solve

FORMAT_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_BUDGET, EXIT_INVALID = 0, 1, 2, 3
COUPLING_ENTRY_LIMIT = 10**5
DEFAULT_VALIDATE_TOL = 1e-8
GENERATORS = ("sqeuclidean", "euclidean", "pairwise_sqeuclidean_sum")
TRACE_HEADER = ["iter", "dual", "primal", "gap", "marginal_residual_l1", "wall_ms"]
SWEEP_HEADER = ["epsilon", "entropic_value", "exact_value", "gap", "iters", "converged"]

log = logging.getLogger("entrobridge")


class ProblemFileError(EntroBridgeError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class LoadedProblem:
    problem: Problem
    cost_spec: dict
    epsilon_from_file: Optional[float]
    raw: dict


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ProblemFileError(f"{where}.{key}" if where else key, "missing field")
    return d[key]


def _real(x, field: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ProblemFileError(field, f"expected a number, got {x!r}")
    return float(x)


def _parse_measure(spec, where: str):
    atoms = _require(spec, "atoms", where)
    weights = _require(spec, "weights", where)
    if not isinstance(atoms, list) or not isinstance(weights, list):
        raise ProblemFileError(where, "atoms and weights must be lists")
    if len(atoms) != len(weights):
        raise ProblemFileError(where, f"{len(atoms)} atoms but {len(weights)} weights")
    ids, coords = [], []
    for k, a in enumerate(atoms):
        aid = _require(a, "id", f"{where}.atoms[{k}]")
        if isinstance(aid, bool) or not isinstance(aid, int):
            raise ProblemFileError(f"{where}.atoms[{k}].id", f"expected an integer, got {aid!r}")
        ids.append(aid)
        xs = a.get("coords")
        if xs is not None:
            if not isinstance(xs, list):
                raise ProblemFileError(f"{where}.atoms[{k}].coords", "expected a list of reals")
            xs = [_real(t, f"{where}.atoms[{k}].coords") for t in xs]
        coords.append(xs)
    w = [_real(x, f"{where}.weights[{k}]") for k, x in enumerate(weights)]
    keep = strip_zero_atoms(w, ids, label=where)
    measure = DiscreteMeasure.from_weights(
        [w[k] for k in keep], [ids[k] for k in keep], [coords[k] for k in keep]
    )
    return measure, keep


def generate_cost(kind: str, coords: list[np.ndarray], scale: float = 1.0) -> np.ndarray:
    """Cost tensor from per-marginal coordinate arrays of shape ``(n_i, d)``."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator {kind!r}; choose from {GENERATORS}")
    if len({x.shape[1] for x in coords}) != 1:
        raise ValueError("all marginals need coordinates of the same dimension")
    if kind in ("sqeuclidean", "euclidean"):
        if len(coords) != 2:
            raise ValueError(f"generator {kind} needs exactly two marginals")
        x, y = coords
        diff = x[:, None, :] - y[None, :, :]
        c = (diff * diff).sum(axis=-1)
        if kind == "euclidean":
            c = np.sqrt(c)
    else:
        N = len(coords)
        c = np.zeros(tuple(x.shape[0] for x in coords))
        for i in range(N):
            for j in range(i + 1, N):
                shape_i = [1] * N
                shape_j = [1] * N
                shape_i[i] = coords[i].shape[0]
                shape_j[j] = coords[j].shape[0]
                d = coords[i].reshape(shape_i + [-1]) - coords[j].reshape(shape_j + [-1])
                c = c + 0.5 * (d * d).sum(axis=-1)
    return c * scale if scale != 1.0 else c


def load_problem(raw: dict, eps_override: Optional[float] = None, config_kwargs: Optional[dict] = None
                 ) -> LoadedProblem:
    if not isinstance(raw, dict):
        raise ProblemFileError("<root>", "expected a JSON object")
    version = _require(raw, "version", "")
    if version != FORMAT_VERSION:
        raise ProblemFileError("version", f"unsupported version {version!r}, expected {FORMAT_VERSION}")
    specs = _require(raw, "measures", "")
    if not isinstance(specs, list) or len(specs) < 2:
        raise ProblemFileError("measures", "need a list of at least two measures")
    parsed = [_parse_measure(s, f"measures[{k}]") for k, s in enumerate(specs)]
    measures = [m for m, _ in parsed]
    keeps = [k for _, k in parsed]

    cost_spec = _require(raw, "cost", "")
    if not isinstance(cost_spec, dict):
        raise ProblemFileError("cost", "expected an object with 'matrix' or 'generator'")
    if "matrix" in cost_spec:
        try:
            c = np.array(cost_spec["matrix"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise ProblemFileError("cost.matrix", f"not a rectangular numeric array ({exc})") from None
        sizes = tuple(len(k) for k in keeps)
        full_sizes = tuple(len(s["atoms"]) for s in specs)
        if c.shape != full_sizes:
            raise ProblemFileError("cost.matrix", f"shape {c.shape} does not match atom counts {full_sizes}")
        c = c[np.ix_(*keeps)] if sizes != full_sizes else c
    elif "generator" in cost_spec:
        kind = cost_spec["generator"]
        if kind not in GENERATORS:
            raise ProblemFileError("cost.generator", f"unknown generator {kind!r}; choose from {list(GENERATORS)}")
        scale = _real(cost_spec.get("scale", 1.0), "cost.scale")
        for k, m in enumerate(measures):
            missing = [a.id for a in m.atoms if a.coords is None]
            if missing:
                raise ProblemFileError(f"measures[{k}].atoms", f"generator needs coords; atom ids {missing} have none")
        try:
            c = generate_cost(kind, [m.coordinates() for m in measures], scale)
        except ValueError as exc:
            raise ProblemFileError("cost.generator", str(exc)) from None
    else:
        raise ProblemFileError("cost", "expected 'matrix' or 'generator'")

    file_eps = raw.get("epsilon")
    if file_eps is not None:
        file_eps = _real(file_eps, "epsilon")
    if eps_override is not None:
        if file_eps is not None and file_eps != eps_override:
            log.warning("epsilon %r from --eps overrides %r from the file", eps_override, file_eps)
        eps = eps_override
    elif file_eps is not None:
        eps = file_eps
    else:
        raise ProblemFileError("epsilon", "missing field (or pass --eps)")

    references = None
    if raw.get("references") is not None:
        ref_specs = raw["references"]
        if not isinstance(ref_specs, list) or len(ref_specs) != len(measures):
            raise ProblemFileError("references", "need one reference measure per marginal")
        references = [_parse_measure(s, f"references[{k}]")[0] for k, s in enumerate(ref_specs)]

    config = SolverConfig(eps, **(config_kwargs or {}))
    problem = build_problem(measures, CostTensor(c), config, references)
    return LoadedProblem(problem, cost_spec, file_eps, raw)


def _measure_json(m: DiscreteMeasure) -> dict:
    atoms = []
    for a in m.atoms:
        entry = {"id": a.id}
        if a.coords is not None:
            entry["coords"] = list(a.coords)
        atoms.append(entry)
    return {"atoms": atoms, "weights": m.weights.tolist()}


def problem_json(problem: Problem, cost_spec: Optional[dict] = None) -> dict:
    """Problem in the input file format, after validation and normalization."""
    if cost_spec is not None and "generator" in cost_spec:
        cost = dict(cost_spec)
    else:
        cost = {"matrix": problem.cost.values.tolist()}
    out = {
        "version": FORMAT_VERSION,
        "measures": [_measure_json(m) for m in problem.measures],
        "cost": cost,
        "epsilon": problem.epsilon,
    }
    if problem.references is not None:
        out["references"] = [_measure_json(m) for m in problem.references]
    return out


def report_json(report: SolveReport, problem: Problem, cost_spec: Optional[dict] = None,
                full_coupling: bool = False) -> dict:
    opt = report.optimality
    include = full_coupling or report.coupling.mass.size <= COUPLING_ENTRY_LIMIT
    return {
        "version": FORMAT_VERSION,
        "converged": report.converged,
        "stop_reason": report.stop_reason,
        "iterations": report.iterations,
        "epsilon": report.epsilon,
        "gauge": report.gauge.value,
        "dual": opt.dual_value,
        "primal": opt.primal_value,
        "gap": opt.gap,
        "residuals": {
            "marginal_l1": list(opt.marginal_residual_l1),
            "schrodinger_linf": opt.schrodinger_residual_linf,
            "fixed_point_linf": opt.fixed_point_residual_linf,
        },
        "parametrization": "u; multiplicative scaling a = exp(u / epsilon)",
        "potentials": [p.values.tolist() for p in report.potentials],
        "coupling": report.coupling.mass.tolist() if include else None,
        "coupling_omitted": not include,
        "tolerance": opt.tol,
        "problem": problem_json(problem, cost_spec),
    }


def write_trace(report: SolveReport, fh) -> None:
    fh.write(f"# entrobridge trace v{FORMAT_VERSION}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in report.trace:
        w.writerow([r.iter, repr(r.dual), repr(r.primal), repr(r.gap),
                    repr(r.marginal_residual_l1), f"{r.wall_ms:.3f}"])


def read_trace(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(lines)]


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ProblemFileError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ProblemFileError("<file>", f"invalid JSON in {path}: {exc}") from None


def _output(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def threads_from_env() -> int:
    """``ENTROBRIDGE_THREADS`` (0 = auto). The solvers are single-threaded
    NumPy code, so the value is validated but otherwise advisory."""
    raw = os.environ.get("ENTROBRIDGE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise EntroBridgeError(f"ENTROBRIDGE_THREADS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise EntroBridgeError(f"ENTROBRIDGE_THREADS must be a non-negative integer, got {raw!r}")
    return n


def cmd_solve(args) -> int:
    kwargs = {}
    if args.tol is not None:
        kwargs["tol_marginal"] = args.tol
    if args.max_iter is not None:
        kwargs["max_iter"] = args.max_iter
    if args.gauge is not None:
        kwargs["gauge"] = Gauge(args.gauge)
    if args.trace_every is not None:
        kwargs["record_trace_every"] = args.trace_every
    loaded = load_problem(_read_json(args.input), args.eps, kwargs)
    problem = loaded.problem
    report = solve(problem)
    doc = report_json(report, problem, loaded.cost_spec, args.full_coupling)
    _output(args.report_out, json.dumps(doc, indent=2) + "\n")
    if args.trace_out:
        buf = io.StringIO()
        write_trace(report, buf)
        _output(args.trace_out, buf.getvalue())
    status = "converged" if report.converged else "NOT converged (max_iter)"
    print(f"{status} after {report.iterations} sweeps; primal={report.primal!r} "
          f"dual={report.dual!r} gap={report.gap:.3e}", file=sys.stderr)
    return EXIT_OK if report.converged else EXIT_BUDGET


def _parse_eps_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ProblemFileError("--eps-list", f"expected comma-separated reals, got {text!r}") from None
    if not vals:
        raise ProblemFileError("--eps-list", "empty list")
    return vals


def cmd_sweep(args) -> int:
    eps_list = _parse_eps_list(args.eps_list) if args.eps_list else None
    # the schedule replaces the file's epsilon, so no conflict warning here
    raw = dict(_read_json(args.input))
    if eps_list is not None:
        raw["epsilon"] = eps_list[0]
    kwargs = {}
    if args.max_iter is not None:
        kwargs["max_iter"] = args.max_iter
    if args.tol is not None:
        kwargs["tol_marginal"] = args.tol
    loaded = load_problem(raw, None, kwargs)
    problem = loaded.problem
    if eps_list is None:
        eps_list = [problem.epsilon]
    try:
        result = epsilon_sweep(problem, eps_list, cold_check=args.cold_check)
    except OracleSizeError as exc:
        print(f"entrobridge: sweep needs an exact reference value; {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        raise ProblemFileError("--eps-list", str(exc)) from None
    buf = io.StringIO()
    buf.write(f"# entrobridge sweep v{FORMAT_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    header = SWEEP_HEADER + (["cold_value", "cold_converged"] if args.cold_check else [])
    w.writerow(header)
    for k, e in enumerate(result.epsilons):
        row = [repr(e), repr(result.entropic_values[k]), repr(result.exact_value),
               repr(result.gaps[k]), result.iterations[k], int(result.converged[k])]
        if args.cold_check:
            row += [repr(result.cold_values[k]), int(result.cold_converged[k])]
        w.writerow(row)
    _output(args.out, buf.getvalue())
    if not all(result.converged):
        bad = [e for e, ok in zip(result.epsilons, result.converged) if not ok]
        print(f"entrobridge: inner solves did not converge at eps={bad}", file=sys.stderr)
        return EXIT_BUDGET
    if result.cold_converged is not None and not all(result.cold_converged):
        bad = [e for e, ok in zip(result.epsilons, result.cold_converged) if not ok]
        print(f"entrobridge: cold-start solves did not converge at eps={bad}", file=sys.stderr)
        return EXIT_BUDGET
    if not result.ok:
        bad = [e for e, ok in zip(result.epsilons, result.envelope_ok) if not ok]
        print(f"entrobridge: envelope violated at eps={bad} or warm/cold values differ", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_validate(args) -> int:
    raw = _read_json(args.input)
    doc = raw.get("problem", raw) if isinstance(raw, dict) else raw
    loaded = load_problem(doc, args.eps)
    problem = loaded.problem
    if "potentials" not in raw:
        raise ProblemFileError("potentials", "missing section; validate needs candidate potentials")
    pots = raw["potentials"]
    if not isinstance(pots, list) or len(pots) != problem.n_marginals:
        raise ProblemFileError("potentials", f"need {problem.n_marginals} lists of reals")
    vals = []
    for k, (p, m) in enumerate(zip(pots, problem.measures)):
        arr = np.array([_real(x, f"potentials[{k}]") for x in p]) if isinstance(p, list) else None
        if arr is None or arr.size != m.size:
            raise ProblemFileError(f"potentials[{k}]", f"expected {m.size} reals")
        vals.append(arr)
    tol = _real(raw.get("tolerance", DEFAULT_VALIDATE_TOL), "tolerance")
    rep = check_complementarity(vals, problem, tol=tol)
    for key, value in rep.as_dict().items():
        print(f"{key}: {value}")
    ok = rep.optimal
    if problem.references is not None:
        red = reference_reduction(problem)
        print(f"reference_s_eps: {red.s_eps!r}")
        print(f"reference_ot_eps_plus_kl: {red.ot_eps + red.kl_term!r}")
        print(f"reference_residual: {red.residual!r}")
        ok = ok and abs(red.residual) <= tol
    print("valid" if ok else "INVALID")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entrobridge",
                                     description="Entropic optimal transport / Schrödinger bridge solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run Sinkhorn/IPFP on a problem file")
    p.add_argument("input")
    p.add_argument("--eps", type=float, help="regularization (overrides the file)")
    p.add_argument("--tol", type=float, help="L1 marginal tolerance")
    p.add_argument("--max-iter", type=int, help="sweep budget")
    p.add_argument("--gauge", choices=[g.value for g in Gauge])
    p.add_argument("--trace-every", type=int, help="record every k-th sweep")
    p.add_argument("--trace-out", help="trace CSV path")
    p.add_argument("--report-out", help="report JSON path (default stdout)")
    p.add_argument("--full-coupling", action="store_true",
                   help=f"always include the coupling (omitted above {COUPLING_ENTRY_LIMIT} entries)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="epsilon sweep against the exact transport cost")
    p.add_argument("input")
    p.add_argument("--eps-list", help="descending comma-separated epsilons")
    p.add_argument("--cold-check", action="store_true", help="also solve each eps from a cold start")
    p.add_argument("--max-iter", type=int, help="sweep budget per solve")
    p.add_argument("--tol", type=float, help="L1 marginal tolerance per solve")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="check candidate potentials for optimality")
    p.add_argument("input")
    p.add_argument("--eps", type=float, help="regularization (overrides the file)")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="entrobridge: %(message)s", force=True)
    args = build_parser().parse_args(argv)
    try:
        threads_from_env()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                return args.func(args)
            finally:
                for w in caught:
                    log.warning("%s", w.message)
    except (EntroBridgeError, ValueError) as exc:
        print(f"entrobridge: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
