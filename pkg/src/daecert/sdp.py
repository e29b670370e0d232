"""Semidefinite-program model: variables, affine LMI constraints, audit.

A problem holds named scalar variables (optionally sign-constrained), named
matrix variables (symmetric / PSD / diagonal-PSD / skew-symmetric), and a
list of matrix-valued affine constraints, each required PSD or identically
zero.  The objective is linear in the scalar variables.

Matrix variables enter a constraint through ``MatrixTerm(left, right)``
contributing ``left @ V @ right + (left @ V @ right).T``, which keeps every
constraint symmetric by construction.

Solving lives in :mod:`daecert.ipm`; this module is the data model plus an
independent evaluator used to audit solutions (:func:`check_solution`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import min_eigenvalue_sym, symmetrize

__all__ = [
    "ScalarVar",
    "MatrixVar",
    "MatrixTerm",
    "LmiConstraint",
    "SdpProblem",
    "SdpSolution",
    "ConstraintCheck",
    "VerificationReport",
    "check_solution",
    "problem_to_json",
    "problem_from_json",
]

MATRIX_STRUCTURES = ("sym", "psd", "psd_diag", "skew")


@dataclass(frozen=True)
class ScalarVar:
    name: str
    nonneg: bool = False


@dataclass(frozen=True)
class MatrixVar:
    """Named matrix variable.

    structure:
        ``sym``      free symmetric,
        ``psd``      symmetric, constrained PSD,
        ``psd_diag`` diagonal, constrained entrywise nonnegative,
        ``skew``     free skew-symmetric (zero diagonal).
    """

    name: str
    dim: int
    structure: str = "sym"

    def __post_init__(self):
        if self.structure not in MATRIX_STRUCTURES:
            raise ValueError(f"unknown matrix structure {self.structure!r}")
        if self.dim < 1:
            raise ValueError("matrix variable dimension must be >= 1")

    @property
    def num_entries(self) -> int:
        d = self.dim
        if self.structure == "psd_diag":
            return d
        if self.structure == "skew":
            return d * (d - 1) // 2
        return d * (d + 1) // 2

    def entry_pairs(self) -> list[tuple[int, int]]:
        """Index pairs of the free entries, in storage order."""
        d = self.dim
        if self.structure == "psd_diag":
            return [(i, i) for i in range(d)]
        if self.structure == "skew":
            return [(i, j) for i in range(d) for j in range(i + 1, d)]
        return [(i, j) for i in range(d) for j in range(i, d)]

    def basis_matrix(self, k: int) -> np.ndarray:
        """Dense derivative of the matrix value w.r.t. free entry ``k``."""
        i, j = self.entry_pairs()[k]
        b = np.zeros((self.dim, self.dim))
        if self.structure == "skew":
            b[i, j] = 1.0
            b[j, i] = -1.0
        elif i == j:
            b[i, i] = 1.0
        else:
            b[i, j] = 1.0
            b[j, i] = 1.0
        return b

    def to_matrix(self, entries: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        for k, (i, j) in enumerate(self.entry_pairs()):
            if self.structure == "skew":
                out[i, j] = entries[k]
                out[j, i] = -entries[k]
            else:
                out[i, j] = entries[k]
                out[j, i] = entries[k]
        return out

    def from_matrix(self, m: np.ndarray) -> np.ndarray:
        return np.array([m[i, j] for i, j in self.entry_pairs()], dtype=float)


@dataclass(frozen=True)
class MatrixTerm:
    """Contribution ``left @ V @ right`` plus its transpose."""

    left: np.ndarray
    right: np.ndarray


@dataclass
class LmiConstraint:
    """Symmetric-matrix-valued affine map, required PSD (kind ``psd``)
    or identically zero (kind ``eq``)."""

    name: str
    dim: int
    constant: np.ndarray
    kind: str = "psd"
    scalar_coeffs: dict[str, np.ndarray] = field(default_factory=dict)
    matrix_terms: dict[str, list[MatrixTerm]] = field(default_factory=dict)

    def __post_init__(self):
        self.constant = np.asarray(self.constant, dtype=float)
        if self.constant.shape != (self.dim, self.dim):
            raise ValueError(f"constant block of {self.name!r} has wrong shape")
        if not np.allclose(self.constant, self.constant.T, atol=1e-12):
            raise ValueError(f"constant block of {self.name!r} is not symmetric")
        if self.kind not in ("psd", "eq"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")


@dataclass
class SdpProblem:
    scalar_vars: list[ScalarVar] = field(default_factory=list)
    matrix_vars: list[MatrixVar] = field(default_factory=list)
    constraints: list[LmiConstraint] = field(default_factory=list)
    # Linear objective over scalar variables; empty dict means feasibility.
    objective: dict[str, float] = field(default_factory=dict)

    def add_scalar(self, name: str, nonneg: bool = False) -> ScalarVar:
        v = ScalarVar(name, nonneg)
        self.scalar_vars.append(v)
        return v

    def add_matrix(self, name: str, dim: int, structure: str = "sym") -> MatrixVar:
        v = MatrixVar(name, dim, structure)
        self.matrix_vars.append(v)
        return v

    def scalar_names(self) -> list[str]:
        return [v.name for v in self.scalar_vars]

    def matrix_by_name(self, name: str) -> MatrixVar:
        for v in self.matrix_vars:
            if v.name == name:
                return v
        raise KeyError(name)

    def validate(self) -> None:
        names = set()
        for v in self.scalar_vars + self.matrix_vars:
            if v.name in names:
                raise ValueError(f"duplicate variable name {v.name!r}")
            names.add(v.name)
        if not names:
            raise ValueError("problem has no variables")
        scalar_names = {v.name for v in self.scalar_vars}
        for con in self.constraints:
            for s in con.scalar_coeffs:
                if s not in scalar_names:
                    raise ValueError(f"constraint {con.name!r} uses unknown scalar {s!r}")
            for m in con.matrix_terms:
                self.matrix_by_name(m)
        for s in self.objective:
            if s not in scalar_names:
                raise ValueError(f"objective uses unknown scalar {s!r}")

    def evaluate_constraint(
        self,
        con: LmiConstraint,
        scalar_values: dict[str, float],
        matrix_values: dict[str, np.ndarray],
    ) -> np.ndarray:
        """Evaluate the affine map at the given variable values."""
        out = con.constant.copy()
        for sname, coeff in con.scalar_coeffs.items():
            if sname not in scalar_values:
                raise ValueError(f"missing value for scalar variable {sname!r}")
            out = out + scalar_values[sname] * coeff
        for mname, terms in con.matrix_terms.items():
            if mname not in matrix_values:
                raise ValueError(f"missing value for matrix variable {mname!r}")
            v = np.asarray(matrix_values[mname], dtype=float)
            for t in terms:
                prod = t.left @ v @ t.right
                out = out + prod + prod.T
        return out


@dataclass
class SdpSolution:
    status: str  # optimal | feasible | infeasible | numerical_failure
    scalar_values: dict[str, float] = field(default_factory=dict)
    matrix_values: dict[str, np.ndarray] = field(default_factory=dict)
    objective_value: Optional[float] = None
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    duality_gap: float = np.inf
    iterations: int = 0
    # Dual multipliers: one PSD block per psd constraint / variable cone,
    # plus a vector for the flattened eq constraints.
    dual_blocks: dict[str, np.ndarray] = field(default_factory=dict)
    dual_eq: Optional[np.ndarray] = None
    dual_objective: Optional[float] = None
    infeasibility_certificate: Optional[dict] = None
    message: str = ""

    @property
    def is_satisfied(self) -> bool:
        return self.status in ("optimal", "feasible")


@dataclass
class ConstraintCheck:
    name: str
    kind: str  # psd | eq | scalar_sign | matrix_cone
    metric: float  # min eigenvalue (psd/cone/sign) or max |residual| (eq)
    passed: bool


@dataclass
class VerificationReport:
    checks: list[ConstraintCheck]
    duality_gap: Optional[float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "passed": self.passed,
            "duality_gap": self.duality_gap,
            "checks": [
                {"name": c.name, "kind": c.kind, "metric": c.metric, "passed": c.passed}
                for c in self.checks
            ],
        }


def check_solution(problem: SdpProblem, solution: SdpSolution, tol: float) -> VerificationReport:
    """Audit a solution against the problem, independent of the solver.

    Every PSD constraint is re-evaluated and its smallest eigenvalue compared
    against ``-tol``; equality constraints are checked entrywise; variable
    sign/cone constraints are checked directly.
    """
    checks: list[ConstraintCheck] = []
    sv, mv = solution.scalar_values, solution.matrix_values
    for var in problem.scalar_vars:
        if var.name not in sv:
            raise ValueError(f"missing value for scalar variable {var.name!r}")
        if var.nonneg:
            val = sv[var.name]
            checks.append(ConstraintCheck(f"sign:{var.name}", "scalar_sign", val, val >= -tol))
    for var in problem.matrix_vars:
        if var.name not in mv:
            raise ValueError(f"missing value for matrix variable {var.name!r}")
        if var.structure in ("psd", "psd_diag"):
            lam = min_eigenvalue_sym(np.atleast_2d(mv[var.name]))
            checks.append(ConstraintCheck(f"cone:{var.name}", "matrix_cone", lam, lam >= -tol))
    for con in problem.constraints:
        value = problem.evaluate_constraint(con, sv, mv)
        if con.kind == "psd":
            lam = min_eigenvalue_sym(value)
            checks.append(ConstraintCheck(con.name, "psd", lam, lam >= -tol))
        else:
            resid = float(np.max(np.abs(value))) if value.size else 0.0
            checks.append(ConstraintCheck(con.name, "eq", resid, resid <= tol))
    return VerificationReport(checks=checks, duality_gap=_audited_gap(problem, solution), tol=tol)


def _audited_gap(problem: SdpProblem, solution: SdpSolution) -> Optional[float]:
    """Recompute primal-minus-dual objective from the stored multipliers."""
    if solution.dual_objective is None or not problem.objective:
        return solution.duality_gap if np.isfinite(solution.duality_gap) else None
    pobj = sum(c * solution.scalar_values[n] for n, c in problem.objective.items())
    return abs(pobj - solution.dual_objective)


# ---------------------------------------------------------------------------
# JSON serialization (debugging and golden tests)
# ---------------------------------------------------------------------------


def _arr(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


def problem_to_json(problem: SdpProblem) -> str:
    doc = {
        "schema": 1,
        "scalars": [{"name": v.name, "nonneg": v.nonneg} for v in problem.scalar_vars],
        "matrices": [
            {"name": v.name, "dim": v.dim, "structure": v.structure}
            for v in problem.matrix_vars
        ],
        "objective": dict(sorted(problem.objective.items())),
        "constraints": [
            {
                "name": c.name,
                "kind": c.kind,
                "dim": c.dim,
                "constant": _arr(c.constant),
                "scalar_coeffs": {k: _arr(v) for k, v in sorted(c.scalar_coeffs.items())},
                "matrix_terms": {
                    k: [{"left": _arr(t.left), "right": _arr(t.right)} for t in terms]
                    for k, terms in sorted(c.matrix_terms.items())
                },
            }
            for c in problem.constraints
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def problem_from_json(text: str) -> SdpProblem:
    doc = json.loads(text)
    p = SdpProblem()
    for s in doc["scalars"]:
        p.add_scalar(s["name"], bool(s.get("nonneg", False)))
    for m in doc["matrices"]:
        p.add_matrix(m["name"], int(m["dim"]), m.get("structure", "sym"))
    p.objective = {k: float(v) for k, v in doc.get("objective", {}).items()}
    for c in doc["constraints"]:
        con = LmiConstraint(
            name=c["name"],
            dim=int(c["dim"]),
            constant=symmetrize(np.asarray(c["constant"], dtype=float)),
            kind=c.get("kind", "psd"),
            scalar_coeffs={
                k: np.asarray(v, dtype=float) for k, v in c.get("scalar_coeffs", {}).items()
            },
            matrix_terms={
                k: [
                    MatrixTerm(np.asarray(t["left"], dtype=float), np.asarray(t["right"], dtype=float))
                    for t in terms
                ]
                for k, terms in c.get("matrix_terms", {}).items()
            },
        )
        p.constraints.append(con)
    p.validate()
    return p
