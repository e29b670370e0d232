"""Dissipation LMIs for linear DAE systems and gain minimization.

Three assemblies, each building its matrix inequality directly:

``assemble_nominal_lmi``
    No uncertainty channel; necessary and sufficient for dissipativity of
    the linear DAE (single quadratic constraint, lossless S-procedure).
    Blocks (x, v, w).

``assemble_pointwise_qc_lmi``
    Uncertainty bounded by a pointwise quadratic constraint z' M z <= 0 on
    z = D [x; v; xi].  Blocks (x, v, xi, w).

``assemble_filtered_iqc_lmi``
    Uncertainty bounded by a hard IQC through a stable filter; adds the
    filter state block and the storage coupling P_Delta.  Blocks
    (x, v, xi, w, psi).  With an identity filter it reduces entrywise to
    the pointwise assembly; with no uncertainty channel to the nominal one.

All assemblies put the inequality in the "slack" orientation: the built
constraint is (supply form) + lambda * R'R + (multiplier form) - (storage
derivative form)  PSD, over the stacked coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .dae import (
    IqcFilter,
    LinearDae,
    MultiplierParam,
    QuadraticSupplyRate,
    UncertaintySpec,
    gain_supply_template,
    make_supply_rate,
)
from .ipm import SolverOptions, solve
from .sdp import (
    LmiConstraint,
    MatrixTerm,
    SdpProblem,
    SdpSolution,
    VerificationReport,
    check_solution,
)

__all__ = [
    "Certificate",
    "Infeasibility",
    "NumericalFailure",
    "UncertifiableGainError",
    "ImplicitController",
    "assemble_nominal_lmi",
    "assemble_pointwise_qc_lmi",
    "assemble_filtered_iqc_lmi",
    "assemble_implicit_nn_lmi",
    "build_nn_closed_loop",
    "certify",
    "min_l2_gain",
    "DEFAULT_EPS",
]

DEFAULT_EPS = 1e-6


class NumericalFailure(RuntimeError):
    """Solver did not converge; consider rescaling the model data."""


class UncertifiableGainError(RuntimeError):
    """No finite gain is certifiable for the modeled uncertainty set."""


@dataclass
class Certificate:
    """Storage-function data plus multipliers, as returned by ``certify``."""

    p: np.ndarray
    p_delta: Optional[np.ndarray]
    lam: float
    tau: float
    qc_params: dict[str, np.ndarray] = field(default_factory=dict)
    gamma: Optional[float] = None
    verification: Optional[VerificationReport] = None
    solution: Optional[SdpSolution] = None

    def to_json_dict(self) -> dict:
        return {
            "P": self.p.tolist(),
            "P_delta": self.p_delta.tolist() if self.p_delta is not None else None,
            "lambda": self.lam,
            "tau": self.tau,
            "qc_params": {k: np.asarray(v).tolist() for k, v in sorted(self.qc_params.items())},
            "gamma": self.gamma,
            "verification": self.verification.to_dict() if self.verification else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


@dataclass
class Infeasibility:
    """Typed negative result: the requested dissipativity is not certifiable."""

    reason: str
    certificate: Optional[dict] = None

    def to_json_dict(self) -> dict:
        out = {"reason": self.reason}
        if self.certificate is not None:
            out["violation"] = float(self.certificate.get("violation", np.nan))
        return out


# ---------------------------------------------------------------------------
# Assembly helpers
# ---------------------------------------------------------------------------


def _selectors(sizes: list[int]) -> list[np.ndarray]:
    total = sum(sizes)
    sels = []
    at = 0
    for sz in sizes:
        s = np.zeros((total, sz))
        s[at : at + sz, :] = np.eye(sz)
        sels.append(s)
        at += sz
    return sels


def _supply_constant(sup: QuadraticSupplyRate, sx, sv, sw) -> np.ndarray:
    out = sx @ sup.x_xx @ sx.T + sv @ sup.x_vv @ sv.T + sw @ sup.x_ww @ sw.T
    out += sx @ sup.x_xv @ sv.T + sv @ sup.x_xv.T @ sx.T
    out += sx @ sup.x_xw @ sw.T + sw @ sup.x_xw.T @ sx.T
    out += sv @ sup.x_vw @ sw.T + sw @ sup.x_vw.T @ sv.T
    return out


def _storage_terms(sys: LinearDae, sx, sv, sxi, sw) -> list[MatrixTerm]:
    # -(x' P x_dot + x_dot' P x) with x_dot = A x + B_v v + B_xi xi + B_w w.
    right = sys.a @ sx.T + sys.b_v @ sv.T + sys.b_w @ sw.T
    if sxi is not None:
        right = right + sys.b_xi @ sxi.T
    return [MatrixTerm(-sx, right)]


def _lambda_gram(sys: LinearDae, sx, sv, sxi, sw) -> np.ndarray:
    rows = sys.f @ sx.T + sys.g_v @ sv.T + sys.g_w @ sw.T
    if sxi is not None:
        rows = rows + sys.g_xi @ sxi.T
    return rows.T @ rows


def _z_map(unc: UncertaintySpec, sx, sv, sxi, spsi) -> np.ndarray:
    """Linear map from stacked coordinates to the filter output z."""
    filt = unc.filter
    in_sel = np.concatenate([sx.T, sv.T, sxi.T], axis=0)  # (n+m+l, total)
    h = filt.d @ in_sel
    if spsi is not None and filt.n_psi > 0:
        h = h + filt.c @ spsi.T
    return h


def _add_multiplier(problem: SdpProblem, con: LmiConstraint, unc: UncertaintySpec,
                    h: np.ndarray, tau_name: Optional[str]) -> None:
    """Add tau * z'Mz (fixed M) or the parameterized family with tau = 1."""
    if unc.m_fixed is not None:
        coeff = h.T @ np.asarray(unc.m_fixed, dtype=float) @ h
        if tau_name is None:
            con.constant = con.constant + coeff
        else:
            problem.add_scalar(tau_name, nonneg=True)
            con.scalar_coeffs[tau_name] = 0.5 * (coeff + coeff.T)
    for param in unc.m_family:
        if not any(v.name == param.name for v in problem.matrix_vars):
            problem.add_matrix(param.name, param.dim, param.structure)
        terms = con.matrix_terms.setdefault(param.name, [])
        for left, right in param.terms:
            terms.append(MatrixTerm(h.T @ left, right @ h))


def _gain_variable_coeff(sup: QuadraticSupplyRate, sys: LinearDae, sx, sv, sw) -> np.ndarray:
    from .dae import _derive_blocks  # shared derivation of (x, v, w) blocks

    blocks = _derive_blocks(sup.gain_coeff, sys)
    tmp = QuadraticSupplyRate(kind="gain_coeff", x_tilde=sup.gain_coeff, gamma=None, **blocks)
    return _supply_constant(tmp, sx, sv, sw)


# ---------------------------------------------------------------------------
# The three assemblies
# ---------------------------------------------------------------------------


def assemble_nominal_lmi(sys: LinearDae, sup: QuadraticSupplyRate, *,
                         eps: float = DEFAULT_EPS,
                         gamma_sq_var: Optional[str] = None) -> SdpProblem:
    """Dissipation LMI for the uncertainty-free linear DAE (blocks x, v, w).

    Feasibility is equivalent to dissipativity w.r.t. the quadratic supply
    rate.  When ``gamma_sq_var`` is given the supply's gamma^2 coefficient
    becomes that (nonnegative) decision variable.
    """
    if sys.l != 0:
        raise ValueError("nominal assembly requires no uncertainty channel")
    n, m, p = sys.n, sys.m, sys.p
    sx, sv, sw = _selectors([n, m, p])
    problem = SdpProblem()
    problem.add_matrix("P", n, "sym")
    problem.constraints.append(
        LmiConstraint("P_pd", n, -eps * np.eye(n), matrix_terms={"P": [MatrixTerm(0.5 * np.eye(n), np.eye(n))]})
    )
    con = LmiConstraint(
        "dissipation", n + m + p,
        _supply_constant(sup, sx, sv, sw),
        matrix_terms={"P": _storage_terms(sys, sx, sv, None, sw)},
    )
    if sys.k > 0:
        problem.add_scalar("lambda", nonneg=True)
        con.scalar_coeffs["lambda"] = _lambda_gram(sys, sx, sv, None, sw)
    if gamma_sq_var is not None:
        problem.add_scalar(gamma_sq_var, nonneg=True)
        con.scalar_coeffs[gamma_sq_var] = _gain_variable_coeff(sup, sys, sx, sv, sw)
    problem.constraints.append(con)
    return problem


def assemble_pointwise_qc_lmi(sys: LinearDae, sup: QuadraticSupplyRate, unc: UncertaintySpec, *,
                              eps: float = DEFAULT_EPS,
                              gamma_sq_var: Optional[str] = None) -> SdpProblem:
    """Dissipation LMI under a pointwise quadratic constraint (blocks x, v, xi, w)."""
    if unc.kind != "pointwise":
        raise ValueError("uncertainty spec must be pointwise")
    if unc.filter.n_psi != 0:
        raise ValueError("pointwise constraint uses a static (state-free) map")
    n, m, l, p = sys.n, sys.m, sys.l, sys.p
    sx, sv, sxi, sw = _selectors([n, m, l, p])
    problem = SdpProblem()
    problem.add_matrix("P", n, "sym")
    problem.constraints.append(
        LmiConstraint("P_pd", n, -eps * np.eye(n), matrix_terms={"P": [MatrixTerm(0.5 * np.eye(n), np.eye(n))]})
    )
    con = LmiConstraint(
        "dissipation", n + m + l + p,
        _supply_constant(sup, sx, sv, sw),
        matrix_terms={"P": _storage_terms(sys, sx, sv, sxi, sw)},
    )
    if sys.k > 0:
        problem.add_scalar("lambda", nonneg=True)
        con.scalar_coeffs["lambda"] = _lambda_gram(sys, sx, sv, sxi, sw)
    h = _z_map(unc, sx, sv, sxi, None)
    _add_multiplier(problem, con, unc, h, tau_name="tau" if unc.m_fixed is not None else None)
    if gamma_sq_var is not None:
        problem.add_scalar(gamma_sq_var, nonneg=True)
        con.scalar_coeffs[gamma_sq_var] = _gain_variable_coeff(sup, sys, sx, sv, sw)
    problem.constraints.append(con)
    return problem


def assemble_filtered_iqc_lmi(sys: LinearDae, sup: QuadraticSupplyRate, unc: UncertaintySpec, *,
                              eps: float = DEFAULT_EPS,
                              gamma_sq_var: Optional[str] = None) -> SdpProblem:
    """Dissipation LMI under a hard IQC with filter state (blocks x, v, xi, w, psi)."""
    if unc.kind not in ("hard_iqc", "pointwise"):
        raise ValueError("uncertainty spec must carry a quadratic constraint")
    filt = unc.filter
    if not filt.is_hurwitz():
        raise ValueError("IQC filter dynamics must be Hurwitz")
    n, m, l, p, npsi = sys.n, sys.m, sys.l, sys.p, filt.n_psi
    sx, sv, sxi, sw, spsi = _selectors([n, m, l, p, npsi])
    problem = SdpProblem()
    problem.add_matrix("P", n, "sym")
    problem.constraints.append(
        LmiConstraint("P_pd", n, -eps * np.eye(n), matrix_terms={"P": [MatrixTerm(0.5 * np.eye(n), np.eye(n))]})
    )
    con = LmiConstraint(
        "dissipation", n + m + l + p + npsi,
        _supply_constant(sup, sx, sv, sw),
        matrix_terms={"P": _storage_terms(sys, sx, sv, sxi, sw)},
    )
    if sys.k > 0:
        problem.add_scalar("lambda", nonneg=True)
        con.scalar_coeffs["lambda"] = _lambda_gram(sys, sx, sv, sxi, sw)
    if npsi > 0:
        problem.add_matrix("P_delta", npsi, "psd")
        in_sel = np.concatenate([sx.T, sv.T, sxi.T], axis=0)
        con.matrix_terms["P_delta"] = [MatrixTerm(-spsi, filt.a @ spsi.T + filt.b @ in_sel)]
    h = _z_map(unc, sx, sv, sxi, spsi if npsi > 0 else None)
    _add_multiplier(problem, con, unc, h, tau_name="tau" if unc.m_fixed is not None else None)
    if gamma_sq_var is not None:
        problem.add_scalar(gamma_sq_var, nonneg=True)
        con.scalar_coeffs[gamma_sq_var] = _gain_variable_coeff(sup, sys, sx, sv, sw)
    problem.constraints.append(con)
    return problem


# ---------------------------------------------------------------------------
# Certification drivers
# ---------------------------------------------------------------------------


def _assemble_for(sys: LinearDae, sup: QuadraticSupplyRate, unc: UncertaintySpec,
                  eps: float, gamma_sq_var: Optional[str] = None) -> SdpProblem:
    if unc.kind == "none":
        return assemble_nominal_lmi(sys, sup, eps=eps, gamma_sq_var=gamma_sq_var)
    if unc.kind == "pointwise":
        return assemble_pointwise_qc_lmi(sys, sup, unc, eps=eps, gamma_sq_var=gamma_sq_var)
    return assemble_filtered_iqc_lmi(sys, sup, unc, eps=eps, gamma_sq_var=gamma_sq_var)


def _certificate_from_solution(problem: SdpProblem, sol: SdpSolution, tol: float,
                               gamma: Optional[float] = None) -> Certificate:
    report = check_solution(problem, sol, 10.0 * tol)
    qc_params = {
        name: val for name, val in sol.matrix_values.items() if name not in ("P", "P_delta")
    }
    return Certificate(
        p=sol.matrix_values["P"],
        p_delta=sol.matrix_values.get("P_delta"),
        lam=sol.scalar_values.get("lambda", 0.0),
        tau=sol.scalar_values.get("tau", 1.0 if qc_params else 0.0),
        qc_params=qc_params,
        gamma=gamma,
        verification=report,
        solution=sol,
    )


def _solve_with_fallback(problem: SdpProblem, opts: SolverOptions) -> tuple[SdpSolution, float]:
    """Solve at the requested tolerance, then once more at a coarser one.

    Gain-minimization LMIs are degenerate at the optimum (the dissipation
    block loses rank), where double precision floors the achievable KKT
    merit near 1e-7.  The fallback tolerance is recorded and used for the
    certificate audit, so nothing is reported tighter than it was solved.
    """
    sol = solve(problem, opts)
    achieved = opts.tol
    if sol.status == "numerical_failure" and opts.tol < 1e-6:
        coarse = SolverOptions(tol=1e-6, max_iters=opts.max_iters, verbose=opts.verbose)
        sol2 = solve(problem, coarse)
        if sol2.status != "numerical_failure":
            sol2.message += " (converged at fallback tolerance 1e-6)"
            return sol2, 1e-6
    return sol, achieved


def certify(sys: LinearDae, sup: QuadraticSupplyRate, unc: Optional[UncertaintySpec] = None, *,
            eps: float = DEFAULT_EPS,
            options: Optional[SolverOptions] = None) -> Union[Certificate, Infeasibility]:
    """Assemble the matching LMI, solve, audit, and return the result."""
    unc = unc or UncertaintySpec.none()
    opts = options or SolverOptions()
    problem = _assemble_for(sys, sup, unc, eps)
    sol, achieved_tol = _solve_with_fallback(problem, opts)
    if sol.status in ("optimal", "feasible"):
        return _certificate_from_solution(problem, sol, achieved_tol, gamma=sup.gamma)
    if sol.status == "infeasible":
        return Infeasibility(reason=sol.message, certificate=sol.infeasibility_certificate)
    raise NumericalFailure(sol.message)


def min_l2_gain(sys: LinearDae, unc: Optional[UncertaintySpec] = None, *,
                eps: float = DEFAULT_EPS,
                options: Optional[SolverOptions] = None) -> tuple[float, Certificate]:
    """Minimize gamma^2 subject to the selected dissipation LMI.

    A feasibility probe at gamma = 1e6 distinguishes "no finite gain as
    modeled" from numerical failure of the minimization.
    """
    unc = unc or UncertaintySpec.none()
    opts = options or SolverOptions()
    probe = certify(sys, make_supply_rate("l2gain", sys, gamma=1e6), unc, eps=eps, options=opts)
    if isinstance(probe, Infeasibility):
        raise UncertifiableGainError(
            "gain LMI infeasible even at gamma = 1e6; the uncertain system is "
            "not certifiably stable as modeled"
        )
    sup = gain_supply_template(sys)
    problem = _assemble_for(sys, sup, unc, eps, gamma_sq_var="gamma_sq")
    problem.objective = {"gamma_sq": 1.0}
    sol, achieved_tol = _solve_with_fallback(problem, opts)
    if sol.status == "infeasible":
        raise UncertifiableGainError("gain minimization reported infeasible after a feasible probe")
    if sol.status != "optimal":
        raise NumericalFailure(sol.message)
    gamma_sq = max(sol.scalar_values["gamma_sq"], 0.0)
    gamma = float(np.sqrt(gamma_sq))
    cert = _certificate_from_solution(problem, sol, achieved_tol, gamma=gamma)
    return gamma, cert


# ---------------------------------------------------------------------------
# Implicit neural-network controller interconnection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImplicitController:
    """LTI core interconnected with elementwise sector-[0,1] activations.

    A nonzero ``d_vxi`` makes the activation input v depend on the
    activation output xi through a fixed-point equation; the closed loop is
    then a genuine DAE.  Well-posedness of that equation is the caller's
    responsibility (it holds e.g. when the singular values of d_vxi are
    below one); nothing here inverts d_vxi.
    """

    a_k: np.ndarray
    b_xi: np.ndarray
    b_y: np.ndarray
    c_u: np.ndarray
    d_uxi: np.ndarray
    d_uy: np.ndarray
    c_v: np.ndarray
    d_vxi: np.ndarray
    d_vy: np.ndarray

    @property
    def n_k(self) -> int:
        return self.a_k.shape[0]

    @property
    def n_act(self) -> int:
        return self.c_v.shape[0]


def build_nn_closed_loop(a_p: np.ndarray, b_u: np.ndarray, b_w: np.ndarray,
                         c_p: np.ndarray, ctrl: ImplicitController) -> LinearDae:
    """Interconnect plant and implicit controller into a DAE.

    State x = (x_p, x_k); algebraic variable v is the activation input with
    0 = Cc x - v + Dc xi; xi is the activation output channel.
    """
    a_p = np.atleast_2d(a_p)
    n_p = a_p.shape[0]
    n_k, n_act = ctrl.n_k, ctrl.n_act
    for name, blk, shape in (
        ("a_k", ctrl.a_k, (n_k, n_k)), ("b_xi", ctrl.b_xi, (n_k, n_act)),
        ("b_y", ctrl.b_y, (n_k, c_p.shape[0])), ("c_u", ctrl.c_u, (b_u.shape[1], n_k)),
        ("d_uxi", ctrl.d_uxi, (b_u.shape[1], n_act)), ("d_uy", ctrl.d_uy, (b_u.shape[1], c_p.shape[0])),
        ("c_v", ctrl.c_v, (n_act, n_k)), ("d_vxi", ctrl.d_vxi, (n_act, n_act)),
        ("d_vy", ctrl.d_vy, (n_act, c_p.shape[0])),
    ):
        if np.atleast_2d(blk).shape != shape:
            raise ValueError(f"controller block {name} has shape {np.atleast_2d(blk).shape}, expected {shape}")

    a_cl = np.block([
        [a_p + b_u @ ctrl.d_uy @ c_p, b_u @ ctrl.c_u],
        [ctrl.b_y @ c_p, ctrl.a_k],
    ])
    b_w_cl = np.vstack([b_w, np.zeros((n_k, b_w.shape[1]))])
    b_xi_cl = np.vstack([b_u @ ctrl.d_uxi, ctrl.b_xi])
    c_mix = np.hstack([ctrl.d_vy @ c_p, ctrl.c_v])
    return LinearDae.create(
        a=a_cl, b_w=b_w_cl, b_xi=b_xi_cl,
        b_v=np.zeros((n_p + n_k, n_act)),
        f=c_mix, g_v=-np.eye(n_act), g_xi=ctrl.d_vxi,
        c=np.hstack([c_p, np.zeros((c_p.shape[0], n_k))]),
    )


def sector_family(n_act: int, z_dim_offsets: tuple[int, int], z_dim: int,
                  name: str = "Lambda") -> MultiplierParam:
    """Sector-[0,1] multiplier [[0, -L/2], [-L/2, L]] over (v, xi) inside z.

    ``z_dim_offsets`` gives the starting rows of v and xi within z.
    """
    v_at, xi_at = z_dim_offsets
    sel_v = np.zeros((z_dim, n_act))
    sel_v[v_at : v_at + n_act] = np.eye(n_act)
    sel_xi = np.zeros((z_dim, n_act))
    sel_xi[xi_at : xi_at + n_act] = np.eye(n_act)
    terms = (
        (0.5 * sel_xi, sel_xi.T),        # + Lambda at (xi, xi)
        (-0.5 * sel_v, sel_xi.T),        # - Lambda/2 at (v, xi) and (xi, v)
    )
    return MultiplierParam(name=name, dim=n_act, structure="psd_diag", terms=terms)


def sector_uncertainty(sys: LinearDae) -> UncertaintySpec:
    """Pointwise sector-[0,1] constraint on (v, xi) with free diagonal scaling."""
    n, m, l = sys.n, sys.m, sys.l
    if m != l:
        raise ValueError("sector constraint pairs v with xi elementwise")
    in_dim = n + m + l
    fam = sector_family(m, (n, n + m), in_dim)
    return UncertaintySpec.pointwise(in_dim=in_dim, family=(fam,))


def assemble_implicit_nn_lmi(a_p: np.ndarray, b_u: np.ndarray, b_w: np.ndarray,
                             c_p: np.ndarray, ctrl: ImplicitController, gamma: float, *,
                             gain_orientation: str = "bound",
                             eps: float = DEFAULT_EPS) -> SdpProblem:
    """Gain LMI for the plant/implicit-controller interconnection.

    ``gain_orientation``:
        ``bound``       s = gamma^2 w'w - y'y (repo convention; feasibility
                        is monotone in gamma),
        ``reciprocal``  s = w'w - gamma^2 y'y (gamma acts as an inverse
                        bound; feasibility is anti-monotone in gamma).
    """
    closed = build_nn_closed_loop(a_p, b_u, b_w, c_p, ctrl)
    if gain_orientation == "bound":
        sup = make_supply_rate("l2gain", closed, gamma=gamma)
    elif gain_orientation == "reciprocal":
        q, p = closed.q, closed.p
        xt = np.zeros((q + p, q + p))
        xt[:q, :q] = -(gamma**2) * np.eye(q)
        xt[q:, q:] = np.eye(p)
        sup = make_supply_rate("custom", closed, x_tilde=xt)
    else:
        raise ValueError(f"unknown gain orientation {gain_orientation!r}")
    unc = sector_uncertainty(closed)
    return assemble_pointwise_qc_lmi(closed, sup, unc, eps=eps)
