"""Primal-dual interior-point solver for the problems built in this package.

The solver works on the linear-matrix-inequality form

    minimize    c' x
    subject to  F_b(x) := F0_b + sum_i x_i F_{b,i}  PSD   for each block b
                E x = d

where ``x`` stacks all scalar variables and the free entries of all matrix
variables.  Variable cones (nonnegative scalars, PSD matrix variables) are
compiled into extra diagonal/identity blocks.  Equality-kind constraints are
flattened into rows of ``E``.

Algorithm: infeasible-start Mehrotra predictor-corrector with the dual
HKM direction.  With slack blocks ``S_b`` and multiplier blocks ``Z_b``,
one Newton step solves

    [ M   E' ] [dx]   [ q - r_d ]        M_ij = sum_b <F_i, S^-1 F_j Z>
    [ E   0  ] [-dnu] [  -r_e   ]

with dS = sum_i dx_i F_i + R_p and dZ = sigma*mu*S^-1 - Z - sym(S^-1 dS Z)
(- the Mehrotra corrector term).  ``M`` is symmetric positive semidefinite;
a small diagonal regularization covers variables that appear in equalities
only.

Infeasibility is certified by the diverging dual ray: a normalized pair
(Z, nu) with A*(Z) + E' nu ~ 0 and d' nu - <F0, Z> > 0 proves that no
feasible point exists, and is attached to the returned solution.

Problems are equilibrated (per-block and per-variable scaling) before the
iteration; statuses are invariant under positive rescaling of any single
constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .linalg import symmetrize
from .sdp import LmiConstraint, SdpProblem, SdpSolution

__all__ = ["SolverOptions", "solve"]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 200


@dataclass
class SolverOptions:
    tol: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    step_fraction: float = 0.98
    verbose: bool = False


# ---------------------------------------------------------------------------
# Compilation: problem -> flat vector form
# ---------------------------------------------------------------------------


@dataclass
class _VarSlot:
    name: str
    kind: str  # "scalar" | "matrix"
    offset: int
    size: int


@dataclass
class _Block:
    name: str
    dim: int
    f0: np.ndarray
    var_idx: np.ndarray  # (nnz,) indices into x
    coeffs: np.ndarray  # (nnz, dim, dim)
    scale: float = 1.0


@dataclass
class _Compiled:
    n: int
    c: np.ndarray
    blocks: list[_Block]
    eq_mat: Optional[np.ndarray]
    eq_rhs: Optional[np.ndarray]
    slots: dict[str, _VarSlot]
    var_scale: np.ndarray
    problem: SdpProblem
    eq_row_scale: Optional[np.ndarray] = None
    eq_keep: Optional[np.ndarray] = None  # kept-row indices in original order
    eq_total: int = 0
    presolve_certificate: Optional[dict] = None


def _accumulate_constraint(
    problem: SdpProblem,
    con: LmiConstraint,
    slots: dict[str, _VarSlot],
    n: int,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Dense coefficient matrices dF/dx_i for one constraint."""
    coeffs: dict[int, np.ndarray] = {}

    def bump(idx: int, mat: np.ndarray):
        if idx in coeffs:
            coeffs[idx] += mat
        else:
            coeffs[idx] = mat.copy()

    for sname, cmat in con.scalar_coeffs.items():
        cmat = symmetrize(np.asarray(cmat, dtype=float))
        bump(slots[sname].offset, cmat)
    for mname, terms in con.matrix_terms.items():
        var = problem.matrix_by_name(mname)
        slot = slots[mname]
        for t in terms:
            left = np.asarray(t.left, dtype=float)
            right = np.asarray(t.right, dtype=float)
            for k, (i, j) in enumerate(var.entry_pairs()):
                # d(L V R)/dV_k = L B_k R with B_k the sparse basis matrix.
                li, lj = left[:, i], left[:, j]
                ri, rj = right[i, :], right[j, :]
                if var.structure == "skew":
                    prod = np.outer(li, rj) - np.outer(lj, ri)
                elif i == j:
                    prod = np.outer(li, ri)
                else:
                    prod = np.outer(li, rj) + np.outer(lj, ri)
                bump(slot.offset + k, prod + prod.T)
    return con.constant.astype(float).copy(), coeffs


def _compile(problem: SdpProblem) -> _Compiled:
    problem.validate()
    slots: dict[str, _VarSlot] = {}
    offset = 0
    for v in problem.scalar_vars:
        slots[v.name] = _VarSlot(v.name, "scalar", offset, 1)
        offset += 1
    for v in problem.matrix_vars:
        slots[v.name] = _VarSlot(v.name, "matrix", offset, v.num_entries)
        offset += v.num_entries
    n = offset

    c = np.zeros(n)
    for sname, coef in problem.objective.items():
        c[slots[sname].offset] = float(coef)

    blocks: list[_Block] = []
    eq_rows: list[np.ndarray] = []
    eq_rhs: list[float] = []

    for con in problem.constraints:
        f0, coeffs = _accumulate_constraint(problem, con, slots, n)
        if con.kind == "psd":
            idx = np.array(sorted(coeffs), dtype=int)
            tensor = np.stack([coeffs[i] for i in idx]) if len(idx) else np.zeros((0, con.dim, con.dim))
            blocks.append(_Block(con.name, con.dim, f0, idx, tensor))
        else:
            # Flatten the symmetric map into one row per upper-triangle entry.
            for a in range(con.dim):
                for b in range(a, con.dim):
                    row = np.zeros(n)
                    for i, mat in coeffs.items():
                        row[i] = mat[a, b]
                    eq_rows.append(row)
                    eq_rhs.append(-f0[a, b])

    # Variable cones -> extra blocks.
    for v in problem.scalar_vars:
        if v.nonneg:
            i = slots[v.name].offset
            blocks.append(
                _Block(f"cone:{v.name}", 1, np.zeros((1, 1)), np.array([i]), np.ones((1, 1, 1)))
            )
    for v in problem.matrix_vars:
        if v.structure in ("psd", "psd_diag"):
            slot = slots[v.name]
            idx = np.arange(slot.offset, slot.offset + slot.size)
            tensor = np.stack([v.basis_matrix(k) for k in range(slot.size)])
            blocks.append(_Block(f"cone:{v.name}", v.dim, np.zeros((v.dim, v.dim)), idx, tensor))

    eq_mat = np.array(eq_rows) if eq_rows else None
    eq_rhs_arr = np.array(eq_rhs) if eq_rows else None

    comp = _Compiled(n, c, blocks, eq_mat, eq_rhs_arr, slots, np.ones(n), problem)
    if eq_mat is not None:
        comp.eq_row_scale = np.ones(eq_mat.shape[0])
        comp.eq_keep = np.arange(eq_mat.shape[0])
        comp.eq_total = eq_mat.shape[0]
    _equilibrate(comp)
    _reduce_equalities(comp)
    return comp


def _equilibrate(comp: _Compiled) -> None:
    """Two-pass Ruiz-style scaling of variables and constraint blocks."""
    n = comp.n
    for _ in range(2):
        col = np.zeros(n)
        for b in comp.blocks:
            if len(b.var_idx) == 0:
                continue
            norms = np.sqrt(np.einsum("iab,iab->i", b.coeffs, b.coeffs))
            np.maximum.at(col, b.var_idx, norms)
        if comp.eq_mat is not None:
            np.maximum.at(col, np.arange(n), np.max(np.abs(comp.eq_mat), axis=0))
        col[col == 0] = 1.0
        d = 1.0 / np.sqrt(np.clip(col, 1e-10, 1e10))
        comp.var_scale *= d
        comp.c *= d
        for b in comp.blocks:
            if len(b.var_idx):
                b.coeffs *= d[b.var_idx][:, None, None]
        if comp.eq_mat is not None:
            comp.eq_mat *= d[None, :]
        # Block scaling: bring each constraint to unit max norm.
        for b in comp.blocks:
            norms = [np.linalg.norm(b.f0)]
            if len(b.var_idx):
                norms.append(float(np.max(np.sqrt(np.einsum("iab,iab->i", b.coeffs, b.coeffs)))))
            s = max(norms)
            if s > 0:
                b.f0 /= s
                b.coeffs /= s
                b.scale *= s
        if comp.eq_mat is not None:
            rn = np.max(np.abs(comp.eq_mat), axis=1)
            rn = np.where(rn > 0, rn, 1.0)
            comp.eq_mat /= rn[:, None]
            comp.eq_rhs /= rn
            comp.eq_row_scale *= rn


def _reduce_equalities(comp: _Compiled) -> None:
    """Drop linearly dependent equality rows (keeping a consistent subset).

    An inconsistent dependent row yields an immediate Farkas certificate:
    nu supported on that row and its spanning set, with E' nu = 0 and
    d' nu != 0.
    """
    if comp.eq_mat is None or comp.eq_mat.shape[0] == 0:
        return
    e, rhs = comp.eq_mat, comp.eq_rhs
    _, r, piv = sla.qr(e.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(e.shape) * np.finfo(float).eps * (diag[0] if diag.size else 1.0)
    rank = int(np.sum(diag > tol))
    if rank == e.shape[0]:
        return
    keep, dropped = piv[:rank], piv[rank:]
    kept_mat, kept_rhs = e[keep], rhs[keep]
    for rd in dropped:
        w, *_ = np.linalg.lstsq(kept_mat.T, e[rd], rcond=None)
        viol = rhs[rd] - w @ kept_rhs
        if abs(viol) > 1e-9 * (1.0 + abs(rhs[rd])):
            nu = np.zeros(e.shape[0])
            nu[rd] = 1.0
            nu[keep] -= w
            nu *= np.sign(viol)
            nu_orig = nu / comp.eq_row_scale
            nu_orig /= np.linalg.norm(nu_orig)
            comp.presolve_certificate = {
                "kind": "dual_improving_ray",
                "blocks": {b.name: np.zeros((b.dim, b.dim)) for b in comp.blocks},
                "eq_multipliers": nu_orig,
                "violation": abs(viol) / np.linalg.norm(nu),
                "adjoint_residual": float(np.linalg.norm(e.T @ nu) / np.linalg.norm(nu)),
            }
            return
    comp.eq_mat, comp.eq_rhs = kept_mat, kept_rhs
    comp.eq_row_scale = comp.eq_row_scale[keep]
    comp.eq_keep = comp.eq_keep[keep]


# ---------------------------------------------------------------------------
# Iteration helpers
# ---------------------------------------------------------------------------


def _eval_blocks(comp: _Compiled, x: np.ndarray) -> list[np.ndarray]:
    out = []
    for b in comp.blocks:
        m = b.f0.copy()
        if len(b.var_idx):
            m = m + np.einsum("iab,i->ab", b.coeffs, x[b.var_idx])
        out.append(symmetrize(m))
    return out


def _adjoint(comp: _Compiled, z_blocks: list[np.ndarray]) -> np.ndarray:
    """A*(Z): gradient of sum_b <F_b(x), Z_b> w.r.t. x."""
    g = np.zeros(comp.n)
    for b, z in zip(comp.blocks, z_blocks):
        if len(b.var_idx):
            g[b.var_idx] += np.einsum("iab,ab->i", b.coeffs, z)
    return g


def _step_to_boundary(s: np.ndarray, ds: np.ndarray, chol: np.ndarray) -> float:
    """sup{a : s + a*ds PSD} given chol(s) lower-triangular."""
    w = sla.solve_triangular(chol, ds, lower=True)
    w = sla.solve_triangular(chol, w.T, lower=True).T
    lam = np.linalg.eigvalsh(symmetrize(w))[0]
    if lam >= -1e-14:
        return np.inf
    return -1.0 / lam


def _safe_step(mats: list[np.ndarray], dirs: list[np.ndarray], alpha: float) -> float:
    """Largest halving of alpha keeping every block Cholesky-factorable."""
    for _ in range(40):
        ok = True
        for mb, db in zip(mats, dirs):
            try:
                np.linalg.cholesky(symmetrize(mb + alpha * db))
            except np.linalg.LinAlgError:
                ok = False
                break
        if ok:
            return alpha
        alpha *= 0.5
    return 0.0


@dataclass
class _IterState:
    x: np.ndarray
    nu: np.ndarray
    s: list[np.ndarray]
    z: list[np.ndarray]


def _farkas_violation(comp: _Compiled, z: list[np.ndarray], nu: np.ndarray) -> tuple[float, float]:
    """(certificate violation, adjoint residual) of normalized (Z, nu)."""
    norm = sum(np.linalg.norm(zb) for zb in z) + np.linalg.norm(nu)
    if norm < 1e-300:
        return -np.inf, np.inf
    adj = _adjoint(comp, z)
    if comp.eq_mat is not None:
        adj = adj + comp.eq_mat.T @ nu
    res = np.linalg.norm(adj) / norm
    viol = -sum(float(np.sum(b.f0 * zb)) for b, zb in zip(comp.blocks, z))
    if comp.eq_rhs is not None:
        viol += float(comp.eq_rhs @ nu)
    return viol / norm, res


# ---------------------------------------------------------------------------
# Main solve
# ---------------------------------------------------------------------------


def solve(problem: SdpProblem, options: Optional[SolverOptions] = None) -> SdpSolution:
    """Solve an :class:`SdpProblem`; see module docstring for the method."""
    opts = options or SolverOptions()
    comp = _compile(problem)
    if comp.presolve_certificate is not None:
        return _finish_infeasible(comp, comp.presolve_certificate, None, 0,
                                  "inconsistent equality constraints")

    n = comp.n
    has_obj = bool(np.any(comp.c))
    ndim_total = sum(b.dim for b in comp.blocks)

    x = np.zeros(n)
    nu = np.zeros(comp.eq_mat.shape[0]) if comp.eq_mat is not None else np.zeros(0)
    s = [np.eye(b.dim) * max(1.0, 1.5 * np.linalg.norm(b.f0, 2)) for b in comp.blocks]
    z = [np.eye(b.dim) for b in comp.blocks]

    best_cert = None
    best_ratio = 0.0
    best_merit = np.inf
    best_state = None
    stalled_since = 0
    tiny_steps = 0

    for it in range(1, opts.max_iters + 1):
        f_val = _eval_blocks(comp, x)
        r_p = [fv - sb for fv, sb in zip(f_val, s)]
        r_e = (comp.eq_mat @ x - comp.eq_rhs) if comp.eq_mat is not None else np.zeros(0)
        adj_z = _adjoint(comp, z)
        r_d = comp.c - adj_z
        if comp.eq_mat is not None:
            r_d = r_d - comp.eq_mat.T @ nu

        gap = sum(float(np.sum(sb * zb)) for sb, zb in zip(s, z))
        mu = gap / max(ndim_total, 1)
        pobj = float(comp.c @ x)
        dobj = -sum(float(np.sum(b.f0 * zb)) for b, zb in zip(comp.blocks, z))
        if comp.eq_rhs is not None:
            dobj += float(comp.eq_rhs @ nu)

        # Relative KKT residuals, normalized by the iterate magnitudes.
        pinf = max(
            [np.linalg.norm(rp) / (1.0 + np.linalg.norm(b.f0) + np.linalg.norm(sb))
             for rp, sb, b in zip(r_p, s, comp.blocks)]
            + ([float(np.max(np.abs(r_e))) / (1.0 + float(np.max(np.abs(comp.eq_rhs)))) ] if comp.eq_mat is not None and comp.eq_mat.size else [0.0])
        )
        dinf = float(np.linalg.norm(r_d, np.inf)) / (
            1.0 + float(np.linalg.norm(comp.c, np.inf)) + float(np.linalg.norm(adj_z, np.inf))
        )
        gap_rel = gap / (1.0 + abs(pobj) + abs(dobj))

        if opts.verbose:
            print(f"  it {it:3d}  mu {mu:9.2e}  pinf {pinf:9.2e}  dinf {dinf:9.2e}  gap {gap_rel:9.2e}")

        merit = max(pinf, dinf, gap_rel)
        if merit < 0.9 * best_merit:
            best_merit = merit
            best_state = (x.copy(), nu.copy(), [zb.copy() for zb in z], pinf, dinf, it)
            stalled_since = 0
        else:
            stalled_since += 1

        if pinf <= opts.tol and dinf <= opts.tol and gap_rel <= opts.tol:
            return _finish_converged(comp, x, nu, z, it, has_obj, pinf, dinf)

        if stalled_since >= 40:
            break  # merit floor reached; fall through to best-iterate logic

        viol, res = _farkas_violation(comp, z, nu)
        if viol >= 10 * opts.tol:
            ratio = viol / max(res, 1e-300)
            if ratio > best_ratio:
                best_ratio = ratio
                best_cert = _package_certificate(comp, z, nu, viol, res)
            if ratio >= 1e6:
                return _finish_infeasible(comp, best_cert, x, it, "dual improving ray found")

        # --- Schur complement ------------------------------------------
        # Every S^-1 product goes through triangular solves with chol(S);
        # forming the explicit inverse would cost O(eps * cond(S)) accuracy,
        # which is fatal near degenerate optima.  With G_i = L^-1 F_i the
        # Schur matrix is M_ij = <G_i, G_j Z>.
        m_mat = np.zeros((n, n))
        chol_s, whitened = [], []
        for b, sb, zb in zip(comp.blocks, s, z):
            lb = np.linalg.cholesky(sb)
            chol_s.append(lb)
            if len(b.var_idx) == 0:
                whitened.append(None)
                continue
            nb = b.dim
            flat = b.coeffs.transpose(1, 0, 2).reshape(nb, -1)
            g_blk = sla.solve_triangular(lb, flat, lower=True)
            g_blk = g_blk.reshape(nb, -1, nb).transpose(1, 0, 2)
            whitened.append(g_blk)
            t = np.matmul(g_blk, zb)
            mb = np.tensordot(g_blk, t, axes=([1, 2], [1, 2]))
            m_mat[np.ix_(b.var_idx, b.var_idx)] += 0.5 * (mb + mb.T)

        m_mat[np.diag_indices(n)] += 1e-12 * (1.0 + np.abs(np.diag(m_mat)))

        me = comp.eq_mat.shape[0] if comp.eq_mat is not None else 0
        kkt = np.zeros((n + me, n + me))
        kkt[:n, :n] = m_mat
        if me:
            kkt[:n, n:] = comp.eq_mat.T
            kkt[n:, :n] = comp.eq_mat
            kkt[n:, n:] = -1e-12 * np.eye(me)
        try:
            lu = sla.lu_factor(kkt)
        except Exception:
            return _finish_failure(comp, x, z, nu, it, "KKT factorization failed")

        def sinv_apply(lb: np.ndarray, mat: np.ndarray) -> np.ndarray:
            return sla.cho_solve((lb, True), mat)

        def schur_apply(dx: np.ndarray) -> np.ndarray:
            """Exact M @ dx in the same whitened arithmetic as m_mat."""
            out = np.zeros(n)
            for b, lb, g_blk, zb in zip(comp.blocks, chol_s, whitened, z):
                if g_blk is None:
                    continue
                d_s = np.einsum("iab,i->ab", b.coeffs, dx[b.var_idx])
                u = sla.solve_triangular(lb, d_s, lower=True) @ zb
                out[b.var_idx] += np.tensordot(g_blk, u, axes=([1, 2], [0, 1]))
            return out

        def newton(sigma_mu: float, corr: Optional[list[np.ndarray]]):
            q = np.zeros(n)
            w_mats = []
            for bi, (b, lb, zb, rp) in enumerate(zip(comp.blocks, chol_s, z, r_p)):
                w = sigma_mu * sinv_apply(lb, np.eye(b.dim)) - zb - symmetrize(sinv_apply(lb, rp) @ zb)
                if corr is not None:
                    w = w - symmetrize(sinv_apply(lb, corr[bi]))
                w_mats.append(w)
                if len(b.var_idx):
                    q[b.var_idx] += np.einsum("iab,ab->i", b.coeffs, w)
            rhs_top = q - r_d
            rhs = np.concatenate([rhs_top, -r_e]) if me else rhs_top
            sol = sla.lu_solve(lu, rhs)

            def true_residual(cand):
                dx_c, dw_c = cand[:n], cand[n:]
                res_top = rhs_top - schur_apply(dx_c)
                if me:
                    res_top = res_top - comp.eq_mat.T @ dw_c
                    return np.concatenate([res_top, -r_e - comp.eq_mat @ dx_c])
                return res_top

            # Monotone refinement; keep a correction only if it helps.
            res = true_residual(sol)
            for _ in range(2):
                if np.max(np.abs(res)) < 1e-13 * (1.0 + np.max(np.abs(rhs))):
                    break
                cand = sol + sla.lu_solve(lu, res)
                res_cand = true_residual(cand)
                if np.max(np.abs(res_cand)) < 0.5 * np.max(np.abs(res)):
                    sol, res = cand, res_cand
                else:
                    break
            dx = sol[:n]
            dnu = -sol[n:] if me else np.zeros(0)
            ds, dz = [], []
            for bi, (b, lb, zb, rp, w) in enumerate(zip(comp.blocks, chol_s, z, r_p, w_mats)):
                if len(b.var_idx):
                    d_x_part = np.einsum("iab,i->ab", b.coeffs, dx[b.var_idx])
                    d_s = symmetrize(rp + d_x_part)
                    # dZ = W - sym(S^-1 (dS - R_p) Z), reusing the W pieces.
                    g = w - symmetrize(sinv_apply(lb, d_x_part) @ zb)
                else:
                    d_s = symmetrize(rp)
                    g = w
                ds.append(d_s)
                dz.append(g)
            return dx, dnu, ds, dz

        # Predictor.
        dx_a, dnu_a, ds_a, dz_a = newton(0.0, None)
        chol_z = [np.linalg.cholesky(zb) for zb in z]
        ap_a = min([1.0] + [_step_to_boundary(sb, dsb, lb) for sb, dsb, lb in zip(s, ds_a, chol_s)])
        ad_a = min([1.0] + [_step_to_boundary(zb, dzb, lb) for zb, dzb, lb in zip(z, dz_a, chol_z)])
        gap_aff = sum(
            float(np.sum((sb + ap_a * dsb) * (zb + ad_a * dzb)))
            for sb, dsb, zb, dzb in zip(s, ds_a, z, dz_a)
        )
        sigma = float(np.clip((max(gap_aff, 0.0) / max(gap, 1e-300)) ** 3, 1e-8, 0.9999))
        if pinf > 100 * opts.tol or dinf > 100 * opts.tol:
            sigma = max(sigma, 0.1)  # keep centering while still infeasible

        # Corrector: second-order term sym(dZ_a dS_a S^-1), passed as dS_a dZ_a
        # so that sym(S^-1 (dS_a dZ_a)) reproduces it.
        corr = [dsb @ dzb for dsb, dzb in zip(ds_a, dz_a)]
        dx, dnu, ds, dz = newton(sigma * mu, corr)

        frac = opts.step_fraction
        ap = min([1.0] + [frac * _step_to_boundary(sb, dsb, lb) for sb, dsb, lb in zip(s, ds, chol_s)])
        ad = min([1.0] + [frac * _step_to_boundary(zb, dzb, lb) for zb, dzb, lb in zip(z, dz, chol_z)])
        if min(ap, ad) < 0.1 * min(ap_a, ad_a):
            # Corrector degraded the step badly; fall back to a centered step.
            dx, dnu, ds, dz = newton(max(sigma, 0.5) * mu, None)
            ap = min([1.0] + [frac * _step_to_boundary(sb, dsb, lb) for sb, dsb, lb in zip(s, ds, chol_s)])
            ad = min([1.0] + [frac * _step_to_boundary(zb, dzb, lb) for zb, dzb, lb in zip(z, dz, chol_z)])
        if not np.isfinite(ap):
            ap = 1.0
        if not np.isfinite(ad):
            ad = 1.0

        # Rounding can push a 0.98-of-boundary step outside the cone; back off.
        ap = _safe_step(s, ds, ap)
        ad = _safe_step(z, dz, ad)

        if max(ap, ad) < 1e-10:
            tiny_steps += 1
            if tiny_steps >= 3:
                if best_cert is not None and best_ratio >= 1e3:
                    return _finish_infeasible(comp, best_cert, x, it, "stalled on dual improving ray")
                return _finish_failure(comp, x, z, nu, it, "step size collapsed")
        else:
            tiny_steps = 0

        x = x + ap * dx
        nu = nu + ad * dnu
        s = [symmetrize(sb + ap * dsb) for sb, dsb in zip(s, ds)]
        z = [symmetrize(zb + ad * dzb) for zb, dzb in zip(z, dz)]

        if any(not np.all(np.isfinite(sb)) for sb in s) or not np.all(np.isfinite(x)):
            return _finish_failure(comp, x, z, nu, it, "iterates diverged")

    if best_cert is not None and best_ratio >= 1e3:
        return _finish_infeasible(comp, best_cert, x, opts.max_iters, "iteration limit with dual improving ray")
    if best_state is not None and best_merit <= opts.tol:
        bx, bnu, bz, bpinf, bdinf, bit = best_state
        return _finish_converged(comp, bx, bnu, bz, bit, has_obj, bpinf, bdinf)
    return _finish_failure(comp, x, z, nu, opts.max_iters, "iteration limit reached without convergence")


# ---------------------------------------------------------------------------
# Solution assembly
# ---------------------------------------------------------------------------


def _unpack_values(comp: _Compiled, x_scaled: np.ndarray) -> tuple[dict, dict]:
    x = x_scaled * comp.var_scale
    scalars, matrices = {}, {}
    for v in comp.problem.scalar_vars:
        scalars[v.name] = float(x[comp.slots[v.name].offset])
    for v in comp.problem.matrix_vars:
        slot = comp.slots[v.name]
        matrices[v.name] = v.to_matrix(x[slot.offset : slot.offset + slot.size])
    return scalars, matrices


def _finish_converged(comp, x, nu, z, iters, has_obj, pinf, dinf) -> SdpSolution:
    scalars, matrices = _unpack_values(comp, x)
    prob = comp.problem
    pobj = sum(c * scalars[nm] for nm, c in prob.objective.items()) if prob.objective else 0.0
    # Unscale duals: the scaled constraint is F/scale, so Z_orig = Z/scale.
    dual_blocks = {b.name: zb / b.scale for b, zb in zip(comp.blocks, z)}
    # <F0_orig, Z_orig> = <F0_scaled, Z_scaled>; same cancellation for d'nu.
    dobj = -sum(float(np.sum(b.f0 * zb)) for b, zb in zip(comp.blocks, z))
    if comp.eq_rhs is not None:
        dobj += float(comp.eq_rhs @ nu)
    sol = SdpSolution(
        status="optimal" if has_obj else "feasible",
        scalar_values=scalars,
        matrix_values=matrices,
        objective_value=pobj if has_obj else None,
        primal_residual=pinf,
        dual_residual=dinf,
        duality_gap=abs(pobj - dobj) if has_obj else 0.0,
        iterations=iters,
        dual_blocks=dual_blocks,
        dual_eq=nu.copy() if nu.size else None,
        dual_objective=dobj if has_obj else None,
        message="converged",
    )
    if nu.size:
        full = np.zeros(comp.eq_total)
        full[comp.eq_keep] = nu / comp.eq_row_scale
        sol.dual_eq = full
    return sol


def _package_certificate(comp, z, nu, viol, res) -> dict:
    """Express the Farkas pair in original problem coordinates."""
    z_orig = [zb / b.scale for b, zb in zip(comp.blocks, z)]
    if nu.size:
        nu_orig = np.zeros(comp.eq_total)
        nu_orig[comp.eq_keep] = nu / comp.eq_row_scale
    else:
        nu_orig = nu
    norm = sum(np.linalg.norm(zb) for zb in z_orig) + np.linalg.norm(nu_orig)
    adj = _adjoint(comp, z)
    if comp.eq_mat is not None:
        adj = adj + comp.eq_mat.T @ nu
    # Pairings <F0, Z> and d'nu are scaling-invariant; the adjoint picks up
    # the per-variable scaling only.
    adj_orig = adj / comp.var_scale
    raw_viol = -sum(float(np.sum(b.f0 * zb)) for b, zb in zip(comp.blocks, z))
    if comp.eq_rhs is not None:
        raw_viol += float(comp.eq_rhs @ nu)
    return {
        "kind": "dual_improving_ray",
        "blocks": {b.name: zb / norm for b, zb in zip(comp.blocks, z_orig)},
        "eq_multipliers": nu_orig / norm if nu.size else None,
        "violation": raw_viol / norm,
        "adjoint_residual": float(np.linalg.norm(adj_orig)) / norm,
    }


def _finish_infeasible(comp, certificate, x, iters, msg) -> SdpSolution:
    scalars, matrices = _unpack_values(comp, x if x is not None else np.zeros(comp.n))
    return SdpSolution(
        status="infeasible",
        scalar_values=scalars,
        matrix_values=matrices,
        iterations=iters,
        infeasibility_certificate=certificate,
        message=msg,
    )


def _finish_failure(comp, x, z, nu, iters, msg) -> SdpSolution:
    scalars, matrices = _unpack_values(comp, x)
    return SdpSolution(
        status="numerical_failure",
        scalar_values=scalars,
        matrix_values=matrices,
        iterations=iters,
        message=msg + " (consider rescaling the problem data)",
    )
