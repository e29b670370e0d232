"""Differential-algebraic system models, supply rates, and audit oracles.

Linear semi-explicit DAE:

    x' = A x + B_v v + B_w w + B_xi xi
    0  = F x + G_v v + G_w w + G_xi xi
    y  = C x + D_v v

with state x (n), algebraic variable v (m), disturbance w (p), output y (q)
and uncertainty channel xi (l) produced by an operator on (x, v).  The
polynomial variant stores f, g, h as sparse multivariate polynomials.

The module also provides the independent audit tools used downstream:
time-domain simulation with an exact per-step algebraic solve, and a
frequency-sweep gain oracle for the w -> y channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar

from .poly import Polynomial

__all__ = [
    "LinearDae",
    "LinearOde",
    "PolynomialDae",
    "QuadraticSupplyRate",
    "IqcFilter",
    "MultiplierParam",
    "UncertaintySpec",
    "ValidationReport",
    "SingularAlgebraicError",
    "UnstableSystemError",
    "InconsistentInitialCondition",
    "make_supply_rate",
    "validate",
    "eliminate_algebraic",
    "simulate",
    "simulate_polynomial",
    "hinf_oracle",
    "transfer_matrix",
    "linear_to_polynomial",
]


class SingularAlgebraicError(ValueError):
    """The algebraic equation cannot be solved for v."""


class UnstableSystemError(RuntimeError):
    """Growth detected; frequency-domain gain is unbounded."""


class InconsistentInitialCondition(ValueError):
    """x0 admits no v(0) satisfying the algebraic equation."""


def _mat(a, rows, cols) -> np.ndarray:
    if a is None:
        return np.zeros((rows, cols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape != (rows, cols):
        raise ValueError(f"expected shape {(rows, cols)}, got {a.shape}")
    return a


@dataclass(frozen=True)
class LinearDae:
    a: np.ndarray
    b_v: np.ndarray
    b_w: np.ndarray
    b_xi: np.ndarray
    f: np.ndarray
    g_v: np.ndarray
    g_w: np.ndarray
    g_xi: np.ndarray
    c: np.ndarray
    d_v: np.ndarray

    @staticmethod
    def create(a, *, b_v=None, b_w=None, b_xi=None, f=None, g_v=None, g_w=None,
               g_xi=None, c=None, d_v=None, m=0, p=0, l=0, k=0, q=None) -> "LinearDae":
        """Build with zero-filled defaults; dims inferred from given blocks."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        n = a.shape[0]
        if b_v is not None:
            m = np.atleast_2d(b_v).shape[1]
        elif g_v is not None:
            m = np.atleast_2d(g_v).shape[1]
        if b_w is not None:
            p = np.atleast_2d(b_w).shape[1]
        elif g_w is not None:
            p = np.atleast_2d(g_w).shape[1]
        if b_xi is not None:
            l = np.atleast_2d(b_xi).shape[1]
        elif g_xi is not None:
            l = np.atleast_2d(g_xi).shape[1]
        if f is not None:
            k = np.atleast_2d(f).shape[0]
        elif g_v is not None:
            k = np.atleast_2d(g_v).shape[0]
        if c is not None:
            q = np.atleast_2d(c).shape[0]
        elif q is None:
            q = n
            c = np.eye(n)
        return LinearDae(
            a=_mat(a, n, n), b_v=_mat(b_v, n, m), b_w=_mat(b_w, n, p), b_xi=_mat(b_xi, n, l),
            f=_mat(f, k, n), g_v=_mat(g_v, k, m), g_w=_mat(g_w, k, p), g_xi=_mat(g_xi, k, l),
            c=_mat(c, q, n), d_v=_mat(d_v, q, m),
        )

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b_v.shape[1]

    @property
    def p(self) -> int:
        return self.b_w.shape[1]

    @property
    def q(self) -> int:
        return self.c.shape[0]

    @property
    def l(self) -> int:
        return self.b_xi.shape[1]

    @property
    def k(self) -> int:
        return self.f.shape[0]

    def dims(self) -> dict:
        return {"n": self.n, "m": self.m, "p": self.p, "q": self.q, "l": self.l, "k": self.k}

    def to_json_dict(self) -> dict:
        return {
            "kind": "linear_dae",
            "dims": self.dims(),
            "A": self.a.tolist(), "B_v": self.b_v.tolist(), "B_w": self.b_w.tolist(),
            "B_xi": self.b_xi.tolist(), "F": self.f.tolist(), "G_v": self.g_v.tolist(),
            "G_w": self.g_w.tolist(), "G_xi": self.g_xi.tolist(),
            "C": self.c.tolist(), "D_v": self.d_v.tolist(),
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "LinearDae":
        d = doc["dims"]
        n, m, p, q, l, k = (d[key] for key in ("n", "m", "p", "q", "l", "k"))
        return LinearDae(
            a=_mat(doc["A"], n, n), b_v=_mat(doc["B_v"], n, m), b_w=_mat(doc["B_w"], n, p),
            b_xi=_mat(doc["B_xi"], n, l), f=_mat(doc["F"], k, n), g_v=_mat(doc["G_v"], k, m),
            g_w=_mat(doc["G_w"], k, p), g_xi=_mat(doc["G_xi"], k, l),
            c=_mat(doc["C"], q, n), d_v=_mat(doc["D_v"], q, m),
        )


@dataclass(frozen=True)
class LinearOde:
    """Ordinary state-space system (algebraic variable eliminated)."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class PolynomialDae:
    state_vars: tuple[str, ...]
    alg_vars: tuple[str, ...]
    dist_vars: tuple[str, ...]
    unc_vars: tuple[str, ...]
    f: tuple[Polynomial, ...]
    g: tuple[Polynomial, ...]
    h: tuple[Polynomial, ...]
    v0: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n(self):
        return len(self.state_vars)

    @property
    def m(self):
        return len(self.alg_vars)

    def all_vars(self) -> tuple[str, ...]:
        return self.state_vars + self.alg_vars + self.dist_vars + self.unc_vars

    def to_json_dict(self) -> dict:
        return {
            "kind": "polynomial_dae",
            "state_vars": list(self.state_vars),
            "alg_vars": list(self.alg_vars),
            "dist_vars": list(self.dist_vars),
            "unc_vars": list(self.unc_vars),
            "f": [p.to_json_dict() for p in self.f],
            "g": [p.to_json_dict() for p in self.g],
            "h": [p.to_json_dict() for p in self.h],
            "v0": np.asarray(self.v0, dtype=float).tolist(),
        }

    @staticmethod
    def from_json_dict(doc: dict) -> "PolynomialDae":
        return PolynomialDae(
            state_vars=tuple(doc["state_vars"]),
            alg_vars=tuple(doc["alg_vars"]),
            dist_vars=tuple(doc.get("dist_vars", [])),
            unc_vars=tuple(doc.get("unc_vars", [])),
            f=tuple(Polynomial.from_json_dict(p) for p in doc["f"]),
            g=tuple(Polynomial.from_json_dict(p) for p in doc.get("g", [])),
            h=tuple(Polynomial.from_json_dict(p) for p in doc.get("h", [])),
            v0=np.asarray(doc.get("v0", []), dtype=float),
        )


# ---------------------------------------------------------------------------
# Supply rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSupplyRate:
    """s(w, y) = [y; w]' X [y; w], with derived blocks over (x, v, w).

    For the gain kind, ``gain_coeff`` holds dX/d(gamma^2) so assemblies can
    treat gamma^2 as a decision variable; the numeric ``x_tilde`` is the
    supply at the given gamma.
    """

    kind: str
    x_tilde: np.ndarray
    x_xx: np.ndarray
    x_xv: np.ndarray
    x_xw: np.ndarray
    x_vv: np.ndarray
    x_vw: np.ndarray
    x_ww: np.ndarray
    gamma: Optional[float] = None
    gain_coeff: Optional[np.ndarray] = None  # over (y, w), dX/d gamma^2


def _derive_blocks(x_tilde: np.ndarray, sys: LinearDae):
    n, m, p, q = sys.n, sys.m, sys.p, sys.q
    t = np.zeros((q + p, n + m + p))
    t[:q, :n] = sys.c
    t[:q, n : n + m] = sys.d_v
    t[q:, n + m :] = np.eye(p)
    full = t.T @ x_tilde @ t
    return {
        "x_xx": full[:n, :n],
        "x_xv": full[:n, n : n + m],
        "x_xw": full[:n, n + m :],
        "x_vv": full[n : n + m, n : n + m],
        "x_vw": full[n : n + m, n + m :],
        "x_ww": full[n + m :, n + m :],
    }


def make_supply_rate(kind: str, sys: LinearDae, gamma: Optional[float] = None,
                     x_tilde: Optional[np.ndarray] = None) -> QuadraticSupplyRate:
    """Build a supply rate: ``stability`` (s = 0), ``passivity`` (s = w'y),
    ``l2gain`` (s = gamma^2 w'w - y'y, the bound  int ||y||^2 <= gamma^2 int ||w||^2),
    or ``custom`` with an explicit (y, w)-form matrix."""
    p, q = sys.p, sys.q
    gain_coeff = None
    if kind == "stability":
        xt = np.zeros((q + p, q + p))
    elif kind == "passivity":
        if p != q:
            raise ValueError(f"passivity needs matching dims, got q={q}, p={p}")
        xt = np.zeros((q + p, q + p))
        xt[:q, q:] = 0.5 * np.eye(p)
        xt[q:, :q] = 0.5 * np.eye(p)
    elif kind == "l2gain":
        if gamma is None or gamma <= 0:
            raise ValueError("l2gain supply needs gamma > 0")
        xt = np.zeros((q + p, q + p))
        xt[:q, :q] = -np.eye(q)
        xt[q:, q:] = gamma**2 * np.eye(p)
        gain_coeff = np.zeros((q + p, q + p))
        gain_coeff[q:, q:] = np.eye(p)
    elif kind == "custom":
        if x_tilde is None:
            raise ValueError("custom supply needs x_tilde")
        xt = 0.5 * (np.asarray(x_tilde, dtype=float) + np.asarray(x_tilde, dtype=float).T)
        if xt.shape != (q + p, q + p):
            raise ValueError(f"x_tilde must be {(q+p, q+p)}")
    else:
        raise ValueError(f"unknown supply rate kind {kind!r}")
    blocks = _derive_blocks(xt, sys)
    return QuadraticSupplyRate(kind=kind, x_tilde=xt, gamma=gamma, gain_coeff=gain_coeff, **blocks)


def gain_supply_template(sys: LinearDae) -> QuadraticSupplyRate:
    """Gain supply with gamma^2 split out: x_tilde holds only -y'y and
    ``gain_coeff`` the w'w part, for assemblies that treat gamma^2 as a
    decision variable."""
    p, q = sys.p, sys.q
    xt = np.zeros((q + p, q + p))
    xt[:q, :q] = -np.eye(q)
    gain_coeff = np.zeros((q + p, q + p))
    gain_coeff[q:, q:] = np.eye(p)
    blocks = _derive_blocks(xt, sys)
    return QuadraticSupplyRate(kind="l2gain", x_tilde=xt, gamma=None, gain_coeff=gain_coeff, **blocks)


# ---------------------------------------------------------------------------
# Uncertainty descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IqcFilter:
    """Stable linear filter on (x, v, xi); identity when n_psi = 0."""

    a: np.ndarray  # n_psi x n_psi
    b: np.ndarray  # n_psi x (n + m + l)
    c: np.ndarray  # z_dim x n_psi
    d: np.ndarray  # z_dim x (n + m + l)

    @property
    def n_psi(self) -> int:
        return self.a.shape[0]

    @property
    def z_dim(self) -> int:
        return self.d.shape[0]

    @staticmethod
    def identity(in_dim: int) -> "IqcFilter":
        return IqcFilter(
            a=np.zeros((0, 0)), b=np.zeros((0, in_dim)),
            c=np.zeros((in_dim, 0)), d=np.eye(in_dim),
        )

    @staticmethod
    def static(d: np.ndarray) -> "IqcFilter":
        d = np.atleast_2d(np.asarray(d, dtype=float))
        return IqcFilter(
            a=np.zeros((0, 0)), b=np.zeros((0, d.shape[1])),
            c=np.zeros((d.shape[0], 0)), d=d,
        )

    def is_hurwitz(self) -> bool:
        if self.n_psi == 0:
            return True
        return bool(np.max(np.linalg.eigvals(self.a).real) < 0)


@dataclass(frozen=True)
class MultiplierParam:
    """One free multiplier block of a parameterized constraint matrix.

    The block variable (with the declared structure) enters M linearly as
    sum of ``left @ V @ right`` plus transposes, all in z coordinates.
    """

    name: str
    dim: int
    structure: str  # psd | skew | psd_diag | sym
    terms: tuple[tuple[np.ndarray, np.ndarray], ...]


@dataclass(frozen=True)
class UncertaintySpec:
    """Quadratic constraint on the uncertainty: hard (integral) or pointwise.

    The filter output z satisfies z' M z <= 0 pointwise, or its integral is
    nonpositive on every horizon for the hard kind.  M is a fixed symmetric
    matrix or a family linear in declared multiplier parameters.
    """

    kind: str  # none | pointwise | hard_iqc
    filter: Optional[IqcFilter] = None
    m_fixed: Optional[np.ndarray] = None
    m_family: tuple[MultiplierParam, ...] = ()

    def __post_init__(self):
        if self.kind not in ("none", "pointwise", "hard_iqc"):
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")
        if self.kind != "none":
            if self.filter is None:
                raise ValueError("uncertainty spec needs a filter (identity allowed)")
            if not self.filter.is_hurwitz():
                raise ValueError("IQC filter dynamics must be Hurwitz")
            if self.m_fixed is None and not self.m_family:
                raise ValueError("uncertainty spec needs M (fixed or parameterized)")
            if self.m_fixed is not None:
                m = np.asarray(self.m_fixed)
                if not np.allclose(m, m.T, atol=1e-12):
                    raise ValueError("M must be symmetric")

    @staticmethod
    def none() -> "UncertaintySpec":
        return UncertaintySpec(kind="none")

    @staticmethod
    def pointwise(m: Optional[np.ndarray] = None, in_dim: Optional[int] = None,
                  selector: Optional[np.ndarray] = None,
                  family: tuple[MultiplierParam, ...] = ()) -> "UncertaintySpec":
        if selector is not None:
            filt = IqcFilter.static(selector)
        else:
            if in_dim is None:
                raise ValueError("pointwise spec needs in_dim or selector")
            filt = IqcFilter.identity(in_dim)
        return UncertaintySpec(kind="pointwise", filter=filt, m_fixed=m, m_family=tuple(family))

    @staticmethod
    def hard_iqc(filt: IqcFilter, m: Optional[np.ndarray] = None,
                 family: tuple[MultiplierParam, ...] = ()) -> "UncertaintySpec":
        return UncertaintySpec(kind="hard_iqc", filter=filt, m_fixed=m, m_family=tuple(family))

    def to_json_dict(self) -> dict:
        doc: dict = {"kind": self.kind}
        if self.filter is not None:
            doc["filter"] = {
                "A": self.filter.a.tolist(), "B": self.filter.b.tolist(),
                "C": self.filter.c.tolist(), "D": self.filter.d.tolist(),
            }
        if self.m_fixed is not None:
            doc["M"] = np.asarray(self.m_fixed, dtype=float).tolist()
        if self.m_family:
            doc["M_family"] = [
                {
                    "name": p.name, "dim": p.dim, "structure": p.structure,
                    "terms": [{"left": np.asarray(l).tolist(), "right": np.asarray(r).tolist()}
                              for l, r in p.terms],
                }
                for p in self.m_family
            ]
        return doc

    @staticmethod
    def from_json_dict(doc: dict) -> "UncertaintySpec":
        kind = doc["kind"]
        if kind == "none":
            return UncertaintySpec.none()
        fd = doc["filter"]
        filt = IqcFilter(
            a=np.atleast_2d(np.asarray(fd["A"], dtype=float)) if len(fd["A"]) else np.zeros((0, 0)),
            b=np.asarray(fd["B"], dtype=float).reshape(len(fd["A"]), -1) if len(fd["A"]) else np.zeros((0, np.asarray(fd["D"]).shape[1])),
            c=np.asarray(fd["C"], dtype=float).reshape(-1, len(fd["A"])) if len(fd["A"]) else np.zeros((np.asarray(fd["D"]).shape[0], 0)),
            d=np.asarray(fd["D"], dtype=float),
        )
        m = np.asarray(doc["M"], dtype=float) if "M" in doc else None
        family = tuple(
            MultiplierParam(
                name=p["name"], dim=int(p["dim"]), structure=p["structure"],
                terms=tuple((np.asarray(t["left"], dtype=float), np.asarray(t["right"], dtype=float))
                            for t in p["terms"]),
            )
            for p in doc.get("M_family", [])
        )
        return UncertaintySpec(kind=kind, filter=filt, m_fixed=m, m_family=family)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    findings: list[str]
    dims_ok: bool
    index1: Optional[bool] = None
    equilibrium_ok: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "dims_ok": self.dims_ok,
            "index1": self.index1,
            "equilibrium_ok": self.equilibrium_ok,
            "findings": list(self.findings),
        }


def validate(sys: LinearDae | PolynomialDae) -> ValidationReport:
    """Dimension consistency plus an index-1 witness (linear) or
    equilibrium-at-origin check (polynomial).  Findings are reported, not
    raised."""
    findings: list[str] = []
    if isinstance(sys, LinearDae):
        dims_ok = True
        for name in ("a", "b_v", "b_w", "b_xi", "f", "g_v", "g_w", "g_xi", "c", "d_v"):
            if not np.all(np.isfinite(getattr(sys, name))):
                findings.append(f"block {name} has non-finite entries")
                dims_ok = False
        index1: Optional[bool] = None
        if sys.k > 0:
            if sys.k != sys.m:
                index1 = False
                findings.append("algebraic equation is not square in v")
            else:
                sv = np.linalg.svd(sys.g_v, compute_uv=False)
                index1 = bool(sv[-1] > 1e-10 * max(sv[0], 1.0))
                if not index1:
                    findings.append("G_v is singular; v is not locally solvable")
        return ValidationReport(findings, dims_ok, index1=index1)

    dims_ok = len(sys.f) == sys.n and len(sys.v0) == sys.m
    if not dims_ok:
        findings.append("field lengths inconsistent with declared variables")
    subs = {v: 0.0 for v in sys.state_vars + sys.dist_vars + sys.unc_vars}
    subs.update({v: float(val) for v, val in zip(sys.alg_vars, sys.v0)})
    eq_ok = True
    for i, p in enumerate(sys.f):
        val = p(**{v: subs.get(v, 0.0) for v in p.vars})
        if abs(val) > 1e-9:
            eq_ok = False
            findings.append(f"f[{i}](0, v0, 0, 0) = {val:g} != 0")
    for i, p in enumerate(sys.g):
        val = p(**{v: subs.get(v, 0.0) for v in p.vars})
        if abs(val) > 1e-9:
            eq_ok = False
            findings.append(f"g[{i}](0, v0, 0, 0) = {val:g} != 0")
    return ValidationReport(findings, dims_ok, equilibrium_ok=eq_ok)


# ---------------------------------------------------------------------------
# Elimination, simulation, gain oracle
# ---------------------------------------------------------------------------


def _solve_gv(sys: LinearDae):
    if sys.k != sys.m or sys.k == 0:
        raise SingularAlgebraicError("algebraic equation must be square and nonempty")
    sv = np.linalg.svd(sys.g_v, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise SingularAlgebraicError("G_v is numerically singular; keep the DAE form")
    return sla.lu_factor(sys.g_v)


def eliminate_algebraic(sys: LinearDae) -> LinearOde:
    """Substitute v = -G_v^{-1}(F x + G_w w); requires invertible G_v, no xi."""
    if sys.l != 0:
        raise ValueError("cannot eliminate with an uncertainty channel present")
    lu = _solve_gv(sys)
    gv_f = sla.lu_solve(lu, sys.f)
    gv_w = sla.lu_solve(lu, sys.g_w)
    return LinearOde(
        a=sys.a - sys.b_v @ gv_f,
        b=sys.b_w - sys.b_v @ gv_w,
        c=sys.c - sys.d_v @ gv_f,
        d=-sys.d_v @ gv_w,
    )


@dataclass
class SimulationResult:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    y: np.ndarray
    int_y2: np.ndarray
    int_w2: np.ndarray
    algebraic_residual_max: float


def simulate(sys: LinearDae, w: np.ndarray, x0: np.ndarray, dt: float, t_end: float) -> SimulationResult:
    """Trapezoidal integration with the algebraic equation solved exactly
    at every step; returns trajectories and running energy integrals."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if sys.l != 0:
        raise ValueError("simulation requires xi = 0 (no uncertainty channel)")
    steps = int(round(t_end / dt))
    t = np.arange(steps + 1) * dt
    p = sys.p
    w = np.zeros((steps + 1, p)) if p == 0 else np.atleast_2d(np.asarray(w, dtype=float))
    if w.shape[0] < steps + 1:
        raise ValueError(f"need {steps + 1} disturbance samples, got {w.shape[0]}")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))

    if sys.k > 0:
        lu = _solve_gv(sys)

        def alg_solve(xk, wk):
            return -sla.lu_solve(lu, sys.f @ xk + sys.g_w @ wk)

        ode = eliminate_algebraic(sys)
        a_eff, b_eff = ode.a, ode.b
    else:
        def alg_solve(xk, wk):
            return np.zeros(0)

        a_eff, b_eff = sys.a, sys.b_w

    n = sys.n
    lhs = np.eye(n) - 0.5 * dt * a_eff
    rhs = np.eye(n) + 0.5 * dt * a_eff
    lhs_lu = sla.lu_factor(lhs)

    x = np.zeros((steps + 1, n))
    v = np.zeros((steps + 1, sys.m))
    x[0] = x0
    v[0] = alg_solve(x0, w[0])
    for kk in range(steps):
        forcing = 0.5 * dt * b_eff @ (w[kk] + w[kk + 1])
        x[kk + 1] = sla.lu_solve(lhs_lu, rhs @ x[kk] + forcing)
        v[kk + 1] = alg_solve(x[kk + 1], w[kk + 1])

    y = x @ sys.c.T + v @ sys.d_v.T
    resid = 0.0
    if sys.k > 0:
        r = x @ sys.f.T + v @ sys.g_v.T + w[: steps + 1] @ sys.g_w.T
        resid = float(np.max(np.abs(r)))

    y2 = np.sum(y**2, axis=1)
    w2 = np.sum(w[: steps + 1] ** 2, axis=1)
    int_y2 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (y2[1:] + y2[:-1]))])
    int_w2 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (w2[1:] + w2[:-1]))])
    return SimulationResult(t, x, v, y, int_y2, int_w2, resid)


def simulate_polynomial(sys: PolynomialDae, x0: np.ndarray, dt: float, t_end: float,
                        newton_tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """RK4 on x' = f(x, v(x)) with v(x) from a per-stage Newton solve of g = 0.

    Autonomous use only (w = xi = 0); returns (t, x, v) samples.
    """
    names = sys.all_vars()
    zeros = {vn: 0.0 for vn in sys.dist_vars + sys.unc_vars}
    g_jac = [[gi.grad()[list(gi.vars).index(av)] if av in gi.vars else Polynomial.zero(gi.vars)
              for av in sys.alg_vars] for gi in sys.g]

    def solve_v(xk, v_guess):
        v_val = v_guess.copy()
        for _ in range(50):
            env = dict(zeros)
            env.update({vn: xv for vn, xv in zip(sys.state_vars, xk)})
            env.update({vn: vv for vn, vv in zip(sys.alg_vars, v_val)})
            r = np.array([gi(**{vn: env.get(vn, 0.0) for vn in gi.vars}) for gi in sys.g])
            if np.max(np.abs(r), initial=0.0) < newton_tol:
                return v_val
            jac = np.array([[g_jac[i][j](**{vn: env.get(vn, 0.0) for vn in g_jac[i][j].vars})
                             for j in range(sys.m)] for i in range(len(sys.g))])
            v_val = v_val - np.linalg.solve(jac, r)
        raise InconsistentInitialCondition("algebraic Newton solve did not converge")

    def rhs(xk, v_guess):
        v_val = solve_v(xk, v_guess)
        env = dict(zeros)
        env.update({vn: xv for vn, xv in zip(sys.state_vars, xk)})
        env.update({vn: vv for vn, vv in zip(sys.alg_vars, v_val)})
        dx = np.array([fi(**{vn: env.get(vn, 0.0) for vn in fi.vars}) for fi in sys.f])
        return dx, v_val

    steps = int(round(t_end / dt))
    t = np.arange(steps + 1) * dt
    x = np.zeros((steps + 1, sys.n))
    v = np.zeros((steps + 1, sys.m))
    x[0] = np.asarray(x0, dtype=float)
    v_guess = sys.v0.copy() if sys.v0.size else np.zeros(sys.m)
    _, v[0] = rhs(x[0], v_guess)
    for kk in range(steps):
        vk = v[kk]
        k1, _ = rhs(x[kk], vk)
        k2, _ = rhs(x[kk] + 0.5 * dt * k1, vk)
        k3, _ = rhs(x[kk] + 0.5 * dt * k2, vk)
        k4, _ = rhs(x[kk] + dt * k3, vk)
        x[kk + 1] = x[kk] + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        _, v[kk + 1] = rhs(x[kk + 1], vk)
    return t, x, v


def transfer_matrix(sys: LinearDae, omega: float) -> np.ndarray:
    """Frequency response of the w -> y channel at a single frequency."""
    n, m = sys.n, sys.m
    jw = 1j * omega
    if sys.k == 0:
        x = np.linalg.solve(jw * np.eye(n) - sys.a, sys.b_w)
        return sys.c @ x
    big = np.zeros((n + sys.k, n + m), dtype=complex)
    big[:n, :n] = jw * np.eye(n) - sys.a
    big[:n, n:] = -sys.b_v
    big[n:, :n] = sys.f
    big[n:, n:] = sys.g_v
    rhs = np.concatenate([sys.b_w, -sys.g_w], axis=0)
    sol = np.linalg.solve(big, rhs)
    return sys.c @ sol[:n] + sys.d_v @ sol[n:]


def _check_stability(sys: LinearDae) -> None:
    if sys.k == 0:
        eigs = np.linalg.eigvals(sys.a)
    else:
        n = sys.n
        pencil_a = np.block([[sys.a, sys.b_v], [sys.f, sys.g_v]])
        pencil_e = np.zeros_like(pencil_a)
        pencil_e[:n, :n] = np.eye(n)
        alpha, beta = sla.eig(pencil_a, pencil_e, right=False, homogeneous_eigvals=True)
        finite = np.abs(beta) > 1e-9 * np.abs(alpha)
        eigs = (alpha[finite] / beta[finite])
    if eigs.size and np.max(eigs.real) >= -1e-12:
        raise UnstableSystemError(
            f"system is not asymptotically stable (max Re eig = {np.max(eigs.real):.3e})"
        )


@dataclass
class HinfResult:
    gamma: float
    omega: float


def hinf_oracle(sys: LinearDae, *, grid: int = 400, refine: int = 4) -> HinfResult:
    """Peak singular value of the w -> y response over a log frequency grid
    with local refinement.  Independent of the LMI machinery by design."""
    if sys.l != 0:
        raise ValueError("gain oracle requires xi = 0")
    if sys.p == 0 or sys.q == 0:
        return HinfResult(0.0, 0.0)
    _check_stability(sys)
    omegas = np.concatenate([[0.0], np.logspace(-4, 5, grid)])
    gains = np.array([np.linalg.svd(transfer_matrix(sys, w), compute_uv=False)[0] for w in omegas])
    order = np.argsort(gains)[::-1]
    best_gain, best_omega = gains[order[0]], omegas[order[0]]

    def neg_gain(logw):
        return -np.linalg.svd(transfer_matrix(sys, 10.0**logw), compute_uv=False)[0]

    for idx in order[:refine]:
        w0 = omegas[idx]
        if w0 == 0.0:
            lo, hi = -8.0, np.log10(omegas[1])
        else:
            j = int(idx)
            lo = np.log10(omegas[max(j - 1, 1)] if j > 1 else w0 / 10)
            hi = np.log10(omegas[min(j + 1, len(omegas) - 1)] if j + 1 < len(omegas) else w0 * 10)
        res = minimize_scalar(neg_gain, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        if -res.fun > best_gain:
            best_gain, best_omega = -res.fun, 10.0**res.x
    # The response at omega = 0 is often the peak; keep it exactly.
    g0 = np.linalg.svd(transfer_matrix(sys, 0.0), compute_uv=False)[0]
    if g0 >= best_gain:
        best_gain, best_omega = g0, 0.0
    return HinfResult(float(best_gain), float(best_omega))


def linear_to_polynomial(sys: LinearDae) -> PolynomialDae:
    """Express a linear DAE with polynomial right-hand sides (for cross checks)."""
    sv = tuple(f"x{i+1}" for i in range(sys.n))
    av = tuple(f"v{i+1}" for i in range(sys.m))
    dv = tuple(f"w{i+1}" for i in range(sys.p))
    uv = tuple(f"xi{i+1}" for i in range(sys.l))
    names = sv + av + dv + uv

    def row_poly(coeffs_blocks):
        terms = {}
        col = 0
        for block in coeffs_blocks:
            block = np.atleast_2d(block)
            for j in range(block.shape[1]):
                cval = float(block[0, j])
                if cval != 0.0:
                    e = [0] * len(names)
                    e[col + j] = 1
                    terms[tuple(e)] = cval
            col += block.shape[1]
        return Polynomial(names, terms)

    f = tuple(row_poly([sys.a[i:i+1], sys.b_v[i:i+1], sys.b_w[i:i+1], sys.b_xi[i:i+1]])
              for i in range(sys.n))
    g = tuple(row_poly([sys.f[i:i+1], sys.g_v[i:i+1], sys.g_w[i:i+1], sys.g_xi[i:i+1]])
              for i in range(sys.k))
    h = tuple(row_poly([sys.c[i:i+1], sys.d_v[i:i+1], np.zeros((1, sys.p)), np.zeros((1, sys.l))])
              for i in range(sys.q))
    return PolynomialDae(sv, av, dv, uv, f, g, h, v0=np.zeros(sys.m))
