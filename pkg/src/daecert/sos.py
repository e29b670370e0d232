"""Sum-of-squares compiler: polynomial nonnegativity programs over the SDP solver.

An :class:`SosProgram` holds polynomial constraints that are affine in a set
of unknowns (coefficients of unknown polynomials, sign-constrained scalars,
and symmetric matrix unknowns), each required to be a sum of squares.

Compilation parameterizes every SOS constraint with a Gram matrix over a
pruned half-degree monomial basis and matches coefficients through equality
constraints:

    p(z) = m(z)' Q m(z),   Q PSD.

The pruning pass drops basis monomials whose square cannot occur in the
constraint's support closure (a removed diagonal forces the whole Gram
row/column to vanish, so this is lossless).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .dae import PolynomialDae, UncertaintySpec
from .ipm import SolverOptions, solve
from .linalg import min_eigenvalue_sym
from .poly import Polynomial, monomial_basis
from .sdp import LmiConstraint, MatrixTerm, SdpProblem, SdpSolution

__all__ = [
    "SosProgram",
    "SosConstraint",
    "SosCertificate",
    "SosBackMap",
    "OddDegreeError",
    "ReconstructionError",
    "compile_sos",
    "build_dissipativity_sos_program",
    "make_polynomial_supply",
    "extract_certificate",
    "solve_sos",
]

UnknownKey = tuple  # ("poly", name, mono_index) | ("scalar", name) | ("matrix", name, flat_index)


class OddDegreeError(ValueError):
    """A constraint has a constant odd-degree leading term: it cannot be SOS."""


class ReconstructionError(RuntimeError):
    """Gram reconstruction residual exceeded tolerance."""


@dataclass
class SosConstraint:
    """base(z) + sum_k u_k * linear[k](z) required to be SOS."""

    name: str
    base: Polynomial
    linear: dict[UnknownKey, Polynomial] = field(default_factory=dict)

    def all_vars(self) -> tuple[str, ...]:
        polys = [self.base] + list(self.linear.values())
        seen: list[str] = []
        for p in polys:
            for v in p.vars:
                if v not in seen and any(e[p.vars.index(v)] > 0 for e in p.terms):
                    seen.append(v)
        return tuple(sorted(seen))


@dataclass
class SosProgram:
    # name -> (variables, monomial support) of each unknown polynomial
    poly_unknowns: dict[str, tuple[tuple[str, ...], list[tuple[int, ...]]]] = field(default_factory=dict)
    scalar_unknowns: list[tuple[str, bool]] = field(default_factory=list)  # (name, nonneg)
    matrix_unknowns: list[tuple[str, int, str]] = field(default_factory=list)  # (name, dim, structure)
    constraints: list[SosConstraint] = field(default_factory=list)

    def add_poly_unknown(self, name: str, vars: tuple[str, ...], monos: list[tuple[int, ...]]):
        self.poly_unknowns[name] = (tuple(vars), list(monos))

    def unknown_poly(self, name: str) -> dict[UnknownKey, Polynomial]:
        """The unknown polynomial as a linear map from its coefficients."""
        vars, monos = self.poly_unknowns[name]
        return {
            ("poly", name, i): Polynomial(vars, {mono: 1.0})
            for i, mono in enumerate(monos)
        }


@dataclass
class SosBackMap:
    """Mapping from SDP variables back to the SOS program pieces."""

    gram: dict[str, tuple[str, tuple[str, ...], list[tuple[int, ...]]]]  # sdp var -> (constraint, vars, basis)
    poly_coeff_vars: dict[UnknownKey, str]
    program: SosProgram
    sdp_size: dict[str, int] = field(default_factory=dict)
    # coefficient-matching equality rows, in solver row order
    eq_monomials: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)


@dataclass
class SosCertificate:
    v_polynomials: dict[str, Polynomial]
    scalars: dict[str, float]
    matrices: dict[str, np.ndarray]
    gram: dict[str, tuple[list[tuple[int, ...]], np.ndarray]]  # constraint -> (basis, Q)
    reconstruction_residual: float
    gram_min_eig: float
    solution: Optional[SdpSolution] = None

    def to_json_dict(self) -> dict:
        return {
            "polynomials": {k: p.to_json_dict() for k, p in sorted(self.v_polynomials.items())},
            "scalars": dict(sorted(self.scalars.items())),
            "matrices": {k: np.asarray(v).tolist() for k, v in sorted(self.matrices.items())},
            "gram": {
                k: {"basis": [list(b) for b in basis], "Q": q.tolist()}
                for k, (basis, q) in sorted(self.gram.items())
            },
            "reconstruction_residual": self.reconstruction_residual,
            "gram_min_eig": self.gram_min_eig,
        }


# ---------------------------------------------------------------------------
# Basis selection
# ---------------------------------------------------------------------------


def _support_union(con: SosConstraint, vars: tuple[str, ...]) -> set[tuple[int, ...]]:
    polys = [con.base.on_vars(vars)] + [p.on_vars(vars) for p in con.linear.values()]
    out: set[tuple[int, ...]] = set()
    for p in polys:
        out.update(p.terms.keys())
    return out


def prune_half_basis(basis: list[tuple[int, ...]], support: set[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Diagonal-consistency fixpoint: keep b only if z^(2b) can occur.

    A basis monomial whose square is neither in the support nor expressible
    as a cross product of two other retained monomials would force its Gram
    diagonal (hence row and column) to zero.
    """
    kept = list(basis)
    changed = True
    while changed:
        changed = False
        kept_set = set(kept)
        new_kept = []
        for b in kept:
            two_b = tuple(2 * e for e in b)
            if two_b in support:
                new_kept.append(b)
                continue
            ok = False
            for b1 in kept_set:
                if b1 == b:
                    continue
                b2 = tuple(t - e1 for t, e1 in zip(two_b, b1))
                if any(e < 0 for e in b2):
                    continue
                if tuple(b2) in kept_set and tuple(b2) != b1:
                    ok = True
                    break
            if ok:
                new_kept.append(b)
            else:
                changed = True
        kept = new_kept
    return kept


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


MARGIN_VAR = "sos_margin"


def compile_sos(program: SosProgram, *, degree_cap: int = 12,
                eq_band: float = 0.0) -> tuple[SdpProblem, SosBackMap]:
    """Translate the program into an SDP with one Gram block per constraint.

    Feasibility is posed in max-margin form: maximize t such that every Gram
    matrix satisfies Q - t*I PSD.  The margin formulation is always strictly
    feasible (take t very negative), so the interior-point method has a
    central path even when every exact SOS representation is singular, and
    SOS membership is decided by the sign of the optimal margin.

    ``eq_band > 0`` relaxes each coefficient-matching equality to the band
    |residual| <= eq_band.  Boundary-feasible programs (optimal margin
    exactly zero) regain a strict interior this way, which lets the final
    certificate carry positive-definite Gram matrices while the matching
    error stays below the band.
    """
    problem = SdpProblem()
    poly_coeff_vars: dict[UnknownKey, str] = {}
    for name, (vars, monos) in program.poly_unknowns.items():
        for i, mono in enumerate(monos):
            vname = f"{name}[{i}]"
            problem.add_scalar(vname, nonneg=False)
            poly_coeff_vars[("poly", name, i)] = vname
    for name, nonneg in program.scalar_unknowns:
        problem.add_scalar(name, nonneg=nonneg)
    for name, dim, structure in program.matrix_unknowns:
        problem.add_matrix(name, dim, structure)
    problem.add_scalar(MARGIN_VAR)
    problem.objective = {MARGIN_VAR: -1.0}
    # Cap the margin: scalable unknowns (e.g. a storage function with a free
    # overall scale) would otherwise push it to infinity.
    problem.constraints.append(
        LmiConstraint(
            name="margin_cap",
            dim=1,
            constant=np.array([[1.0]]),
            scalar_coeffs={MARGIN_VAR: np.array([[-1.0]])},
        )
    )

    gram_map: dict[str, tuple[str, tuple[str, ...], list[tuple[int, ...]]]] = {}
    sdp_size: dict[str, int] = {}
    all_eq_monomials: list[tuple[str, tuple[int, ...]]] = []

    for con in program.constraints:
        vars = con.all_vars()
        base = con.base.on_vars(vars)
        linear = {k: p.on_vars(vars) for k, p in con.linear.items()}
        support = _support_union(con, vars)
        max_deg = max((sum(e) for e in support), default=0)
        if max_deg % 2 == 1:
            top = [e for e in base.terms if sum(e) == max_deg]
            # Unknown-carried top terms are forced to zero by matching; a
            # constant odd leading term is hopeless.
            carried = {
                e for p in linear.values() for e in p.terms if sum(e) == max_deg
            }
            hard = [e for e in top if e not in carried]
            if hard:
                raise OddDegreeError(
                    f"constraint {con.name!r} has constant odd-degree leading term "
                    f"{hard[0]} of degree {max_deg}: not a sum of squares"
                )
            max_deg -= 1
        half = max_deg // 2
        if half > degree_cap:
            raise ValueError(
                f"constraint {con.name!r} needs Gram basis degree {half} > cap {degree_cap}"
            )
        basis = prune_half_basis(monomial_basis(vars, half), support)
        if not basis:
            basis = [tuple([0] * len(vars))]
        gname = f"Q[{con.name}]"
        dim = len(basis)
        problem.add_matrix(gname, dim, "sym")
        problem.constraints.append(
            LmiConstraint(
                name=f"margin[{con.name}]",
                dim=dim,
                constant=np.zeros((dim, dim)),
                scalar_coeffs={MARGIN_VAR: -np.eye(dim)},
                matrix_terms={gname: [MatrixTerm(0.5 * np.eye(dim), np.eye(dim))]},
            )
        )
        gram_map[gname] = (con.name, vars, basis)
        sdp_size[con.name] = dim

        # Coefficient matching over the closure of products plus the support.
        products: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for i in range(dim):
            for j in range(i, dim):
                mono = tuple(a + bb for a, bb in zip(basis[i], basis[j]))
                products.setdefault(mono, []).append((i, j))
        monomials = sorted(set(products) | support, key=lambda e: (sum(e), tuple(-k for k in e)))
        eq_monomials_local = [(con.name, mono) for mono in monomials]
        for mono in monomials:
            terms = []
            for (i, j) in products.get(mono, []):
                li = np.zeros((1, dim))
                # z'Qz picks up Q_ii once and Q_ij (i < j) twice.
                li[0, i] = 0.5 if i == j else 1.0
                rj = np.zeros((dim, 1))
                rj[j, 0] = 1.0
                terms.append(MatrixTerm(li, rj))
            scalar_coeffs = {}
            matrix_terms = {gname: terms} if terms else {}
            for key, p in linear.items():
                cval = p.coefficient(mono)
                if cval == 0.0:
                    continue
                if key[0] == "poly":
                    scalar_coeffs[poly_coeff_vars[key]] = np.array([[-cval]])
                elif key[0] == "scalar":
                    scalar_coeffs[key[1]] = np.array([[-cval]])
                else:
                    _, mname, flat = key
                    var = problem.matrix_by_name(mname)
                    i, j = var.entry_pairs()[flat]
                    left = np.zeros((1, var.dim))
                    left[0, i] = -cval / 2.0
                    right = np.zeros((var.dim, 1))
                    right[j, 0] = 1.0
                    matrix_terms.setdefault(mname, []).append(MatrixTerm(left, right))
            if eq_band <= 0.0:
                problem.constraints.append(LmiConstraint(
                    name=f"match[{con.name}]{mono}",
                    dim=1,
                    constant=np.array([[-base.coefficient(mono)]]),
                    kind="eq",
                    scalar_coeffs=scalar_coeffs,
                    matrix_terms=matrix_terms,
                ))
            else:
                for sign, tag in ((1.0, "lo"), (-1.0, "hi")):
                    problem.constraints.append(LmiConstraint(
                        name=f"match_{tag}[{con.name}]{mono}",
                        dim=1,
                        constant=np.array([[eq_band - sign * base.coefficient(mono)]]),
                        scalar_coeffs={k: sign * v for k, v in scalar_coeffs.items()},
                        matrix_terms={
                            k: [MatrixTerm(sign * t.left, t.right) for t in terms2]
                            for k, terms2 in matrix_terms.items()
                        },
                    ))
        all_eq_monomials.extend(eq_monomials_local)

    backmap = SosBackMap(gram=gram_map, poly_coeff_vars=poly_coeff_vars,
                         program=program, sdp_size=sdp_size,
                         eq_monomials=all_eq_monomials)
    return problem, backmap


# ---------------------------------------------------------------------------
# Dissipativity program for polynomial DAE systems
# ---------------------------------------------------------------------------


def make_polynomial_supply(kind: str, sys: PolynomialDae, gamma: Optional[float] = None) -> Polynomial:
    """Supply rate s(w, y) with y = h(x, v) substituted, as a polynomial."""
    zero = Polynomial.zero(sys.all_vars())
    if kind == "stability":
        return zero
    wvars = [Polynomial.variable(sys.all_vars(), w) for w in sys.dist_vars]
    hs = [h.on_vars(sys.all_vars()) for h in sys.h]
    if kind == "passivity":
        if len(wvars) != len(hs):
            raise ValueError("passivity needs matching disturbance/output dims")
        s = zero
        for wv, hv in zip(wvars, hs):
            s = s + wv * hv
        return s
    if kind == "l2gain":
        if gamma is None or gamma <= 0:
            raise ValueError("l2gain supply needs gamma > 0")
        s = zero
        for wv in wvars:
            s = s + (gamma**2) * wv * wv
        for hv in hs:
            s = s - hv * hv
        return s
    raise ValueError(f"unknown supply kind {kind!r}")


def build_dissipativity_sos_program(
    sys: PolynomialDae,
    supply: Polynomial,
    unc: Optional[UncertaintySpec] = None,
    deg_v: int = 4,
    epsilon: float = 1e-3,
) -> SosProgram:
    """Storage-function search: V - eps*|x|^2 SOS and the dissipation
    inequality's slack SOS, with unknowns V, lambda, tau, P_Delta.

    The slack polynomial is
        s + lambda*g'g + tau*z'Mz - grad(V)'f - d/dt(psi' P_Delta psi),
    all in the stacked variables (x, v, w, xi, psi).
    """
    if deg_v % 2 != 0 or deg_v < 2:
        raise ValueError("deg_v must be even and >= 2")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    unc = unc or UncertaintySpec.none()
    prog = SosProgram()

    xvars = sys.state_vars
    v_monos = [e for e in monomial_basis(xvars, deg_v) if sum(e) >= 1]
    prog.add_poly_unknown("V", xvars, v_monos)
    v_map = prog.unknown_poly("V")

    # Positive definiteness: V - eps * x'x is SOS.
    eps_poly = Polynomial.zero(xvars)
    for xv in xvars:
        xp = Polynomial.variable(xvars, xv)
        eps_poly = eps_poly + xp * xp
    prog.constraints.append(
        SosConstraint(name="positivity", base=eps_poly.scale(-epsilon), linear=dict(v_map))
    )

    # Dissipation slack.
    all_vars = sys.all_vars()
    grad_keys: dict[UnknownKey, Polynomial] = {}
    f_aligned = [fi.on_vars(all_vars) for fi in sys.f]
    for key, mono_poly in v_map.items():
        contrib = Polynomial.zero(all_vars)
        grads = mono_poly.grad()
        for i, xv in enumerate(xvars):
            gi = grads[mono_poly.vars.index(xv)].on_vars(all_vars)
            contrib = contrib + gi * f_aligned[i]
        grad_keys[key] = contrib.scale(-1.0)

    base = supply.on_vars(all_vars)
    linear: dict[UnknownKey, Polynomial] = dict(grad_keys)

    if sys.g:
        gtg = Polynomial.zero(all_vars)
        for gi in sys.g:
            ga = gi.on_vars(all_vars)
            gtg = gtg + ga * ga
        prog.scalar_unknowns.append(("lambda", True))
        linear[("scalar", "lambda")] = gtg

    if unc.kind != "none":
        if unc.m_fixed is None:
            raise ValueError("SOS path requires a fixed constraint matrix M")
        filt = unc.filter
        n_psi = filt.n_psi
        psi_vars = tuple(f"psi{i+1}" for i in range(n_psi))
        stacked_vars = all_vars + psi_vars
        u_vec = [Polynomial.variable(stacked_vars, v)
                 for v in sys.state_vars + sys.alg_vars + sys.unc_vars]
        psi_vec = [Polynomial.variable(stacked_vars, v) for v in psi_vars]
        z_vec = []
        for r in range(filt.z_dim):
            zr = Polynomial.zero(stacked_vars)
            for c_idx, uv in enumerate(u_vec):
                if filt.d[r, c_idx] != 0.0:
                    zr = zr + uv.scale(float(filt.d[r, c_idx]))
            for c_idx, pv in enumerate(psi_vec):
                if n_psi and filt.c[r, c_idx] != 0.0:
                    zr = zr + pv.scale(float(filt.c[r, c_idx]))
            z_vec.append(zr)
        m = np.asarray(unc.m_fixed, dtype=float)
        ztmz = Polynomial.zero(stacked_vars)
        for r in range(filt.z_dim):
            for c_col in range(filt.z_dim):
                if m[r, c_col] != 0.0:
                    ztmz = ztmz + (z_vec[r] * z_vec[c_col]).scale(float(m[r, c_col]))
        prog.scalar_unknowns.append(("tau", True))
        linear[("scalar", "tau")] = ztmz

        if n_psi > 0:
            prog.matrix_unknowns.append(("P_delta", n_psi, "psd"))
            psi_dot = []
            for r in range(n_psi):
                pr = Polynomial.zero(stacked_vars)
                for c_idx, pv in enumerate(psi_vec):
                    if filt.a[r, c_idx] != 0.0:
                        pr = pr + pv.scale(float(filt.a[r, c_idx]))
                for c_idx, uv in enumerate(u_vec):
                    if filt.b[r, c_idx] != 0.0:
                        pr = pr + uv.scale(float(filt.b[r, c_idx]))
                psi_dot.append(pr)
            pairs = [(i, j) for i in range(n_psi) for j in range(i, n_psi)]
            for flat, (i, j) in enumerate(pairs):
                if i == j:
                    contrib = (psi_vec[i] * psi_dot[i]).scale(-2.0)
                else:
                    contrib = (psi_vec[i] * psi_dot[j] + psi_vec[j] * psi_dot[i]).scale(-2.0)
                linear[("matrix", "P_delta", flat)] = contrib

    prog.constraints.append(SosConstraint(name="dissipation", base=base, linear=linear))
    return prog


# ---------------------------------------------------------------------------
# Extraction / audit
# ---------------------------------------------------------------------------


def extract_certificate(backmap: SosBackMap, solution: SdpSolution,
                        tol: float = 1e-6) -> SosCertificate:
    """Rebuild each constraint polynomial from its Gram matrix and compare
    coefficients; the residual must stay below ``tol``."""
    if not solution.is_satisfied:
        raise ValueError(f"solution status is {solution.status!r}; nothing to extract")
    program = backmap.program
    polys = {}
    for name, (vars, monos) in program.poly_unknowns.items():
        terms = {}
        for i, mono in enumerate(monos):
            coeff = solution.scalar_values[backmap.poly_coeff_vars[("poly", name, i)]]
            terms[mono] = coeff
        polys[name] = Polynomial(vars, terms)
    scalars = {name: solution.scalar_values[name] for name, _ in program.scalar_unknowns}
    matrices = {name: solution.matrix_values[name] for name, _, _ in program.matrix_unknowns}

    worst_resid = 0.0
    worst_eig = np.inf
    grams = {}
    for gname, (con_name, vars, basis) in backmap.gram.items():
        q = solution.matrix_values[gname]
        grams[con_name] = (basis, q)
        worst_eig = min(worst_eig, min_eigenvalue_sym(q))
        con = next(c for c in program.constraints if c.name == con_name)
        target = con.base.on_vars(vars)
        for key, p in con.linear.items():
            if key[0] == "poly":
                val = solution.scalar_values[backmap.poly_coeff_vars[key]]
            elif key[0] == "scalar":
                val = solution.scalar_values[key[1]]
            else:
                _, mname, flat = key
                mvar_val = solution.matrix_values[mname]
                d = mvar_val.shape[0]
                pairs = [(a, b) for a in range(d) for b in range(a, d)]
                a, b = pairs[flat]
                val = float(mvar_val[a, b])
            target = target + p.on_vars(vars).scale(val)
        recon: dict[tuple[int, ...], float] = {}
        dim = len(basis)
        for i in range(dim):
            for j in range(dim):
                mono = tuple(a + bb for a, bb in zip(basis[i], basis[j]))
                recon[mono] = recon.get(mono, 0.0) + q[i, j]
        all_monos = set(recon) | set(target.terms)
        resid = max(
            (abs(recon.get(mn, 0.0) - target.coefficient(mn)) for mn in all_monos),
            default=0.0,
        )
        worst_resid = max(worst_resid, resid)

    if worst_resid > tol:
        raise ReconstructionError(
            f"Gram reconstruction residual {worst_resid:.3e} exceeds {tol:.1e}"
        )
    return SosCertificate(
        v_polynomials=polys,
        scalars=scalars,
        matrices=matrices,
        gram=grams,
        reconstruction_residual=worst_resid,
        gram_min_eig=worst_eig,
        solution=solution,
    )


@dataclass
class SosResult:
    """Outcome of an SOS feasibility run.

    ``margin`` is the optimal Gram margin t* (every Gram is PSD up to
    ``-margin``); the program is SOS-feasible iff t* >= 0 up to tolerance.
    For infeasible programs ``separating_functional`` maps monomials to a
    linear functional y with y nonnegative on the SOS cone and y(p) < 0.
    """

    feasible: bool
    margin: float
    certificate: Optional[SosCertificate]
    separating_functional: Optional[dict[str, dict[tuple[int, ...], float]]]
    solution: SdpSolution


def _separating_functional(backmap: SosBackMap, sol: SdpSolution):
    """Equality duals as a linear functional on polynomial coefficients,
    oriented so that y(p) < 0 certifies non-membership in the SOS cone."""
    if sol.dual_eq is None:
        return None
    out: dict[str, dict[tuple[int, ...], float]] = {}
    for (con_name, mono), val in zip(backmap.eq_monomials, sol.dual_eq):
        out.setdefault(con_name, {})[mono] = -float(val)
    return out


def solve_sos(program: SosProgram, *, options: Optional[SolverOptions] = None,
              degree_cap: int = 12,
              reconstruction_tol: float = 1e-6,
              feas_tol: float = 1e-5) -> SosResult:
    """Compile in max-margin form, solve, and classify by the margin sign.

    Feasible programs come back with the audited :class:`SosCertificate`;
    infeasible ones carry the separating functional read off the equality
    duals at the margin optimum.
    """
    problem, backmap = compile_sos(program, degree_cap=degree_cap)
    opts = options or SolverOptions()

    def run(prob):
        s = solve(prob, opts)
        if s.status == "numerical_failure" and opts.tol < 1e-6:
            s2 = solve(prob, SolverOptions(tol=1e-6, max_iters=opts.max_iters))
            if s2.status != "numerical_failure":
                return s2
        return s

    sol = run(problem)
    if sol.status == "infeasible":
        # Matching equalities inconsistent: no polynomial identity possible.
        return SosResult(False, -np.inf, None, None, sol)
    if sol.status == "numerical_failure":
        return SosResult(False, np.nan, None, None, sol)
    margin = sol.scalar_values[MARGIN_VAR]
    if margin < -feas_tol:
        return SosResult(False, margin, None, _separating_functional(backmap, sol), sol)
    if margin < 1e-6:
        # Boundary-feasible: polish with banded matching so the final Gram
        # matrices are positive definite within the band.
        banded, backmap_b = compile_sos(program, degree_cap=degree_cap,
                                        eq_band=reconstruction_tol / 10.0)
        sol_b = run(banded)
        if sol_b.is_satisfied and sol_b.scalar_values[MARGIN_VAR] > margin:
            cert = extract_certificate(backmap_b, sol_b, tol=reconstruction_tol)
            return SosResult(True, sol_b.scalar_values[MARGIN_VAR], cert, None, sol_b)
    cert = extract_certificate(backmap, sol, tol=reconstruction_tol)
    return SosResult(True, margin, cert, None, sol)
