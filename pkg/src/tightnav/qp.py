"""Dense convex QP solver (dual active-set method).

Solves
    minimize    0.5 x'Hx + f'x
    subject to  C x = d,   A x <= b

for symmetric positive-definite H.  The method starts from the unconstrained
minimizer, adds the equality constraints in one batched QR factorization, and
then adds violated inequalities one at a time while keeping dual feasibility
(Goldfarb-Idnani scheme).  Infeasible problems are detected through an
unbounded dual ray.  All linear algebra is dense; the target problems are MPC
subproblems with a few hundred variables.

Multiplier conventions at the solution:
    Hx + f + A' lam + C' nu = 0,   lam >= 0,   lam_i (A x - b)_i = 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, qr, solve_triangular

logger = logging.getLogger(__name__)

_SLACK_TOL = 1e-10
_DEP_TOL = 1e-11


@dataclass
class QpSolution:
    status: str  # "optimal" | "infeasible" | "max_iterations"
    x: np.ndarray
    lam: np.ndarray  # inequality multipliers, >= 0
    nu: np.ndarray  # equality multipliers, free sign
    iterations: int
    objective: float
    active_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class QpError(ValueError):
    pass


def _factor_spd(H: np.ndarray) -> np.ndarray:
    """Cholesky factor of H, adding a tiny ridge if H is only semidefinite."""
    scale = max(float(np.trace(H)) / max(H.shape[0], 1), 1.0)
    ridge = 0.0
    for _ in range(8):
        try:
            return cholesky(H + ridge * np.eye(H.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            ridge = scale * 1e-12 if ridge == 0.0 else ridge * 100.0
    raise QpError("Hessian is not positive definite even after regularization")


def solve_qp(
    H: np.ndarray,
    f: np.ndarray,
    A: np.ndarray | None = None,
    b: np.ndarray | None = None,
    C: np.ndarray | None = None,
    d: np.ndarray | None = None,
    warm_rows: np.ndarray | None = None,
    max_iter: int | None = None,
) -> QpSolution:
    """Solve the QP; see module docstring for conventions.

    warm_rows: optional inequality-row indices tried first when scanning for
    violated constraints (active-set hint from a previous related solve).
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float).ravel()
    n = f.shape[0]
    if H.shape != (n, n):
        raise QpError(f"H shape {H.shape} does not match f length {n}")
    A = np.zeros((0, n)) if A is None else np.asarray(A, dtype=float).reshape(-1, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    C = np.zeros((0, n)) if C is None else np.asarray(C, dtype=float).reshape(-1, n)
    d = np.zeros(0) if d is None else np.asarray(d, dtype=float).ravel()
    if A.shape[0] != b.shape[0] or C.shape[0] != d.shape[0]:
        raise QpError("constraint matrix/vector size mismatch")
    mi, me = A.shape[0], C.shape[0]

    lam_out = np.zeros(mi)
    nu_out = np.zeros(me)

    # Normalize rows; zero rows are resolved immediately.
    def _normalize(M, rhs):
        norms = np.linalg.norm(M, axis=1)
        keep = norms > _DEP_TOL
        return M[keep] / norms[keep, None], rhs[keep] / norms[keep], keep, norms

    Ai, bi, keep_i, norms_i = _normalize(A, b)
    Ce, de, keep_e, norms_e = _normalize(C, d)
    x_dummy = np.zeros(n)
    if np.any(b[~keep_i] < -_SLACK_TOL) or np.any(np.abs(d[~keep_e]) > _SLACK_TOL):
        return QpSolution("infeasible", x_dummy, lam_out, nu_out, 0, 0.0)
    idx_i = np.flatnonzero(keep_i)
    idx_e = np.flatnonzero(keep_e)

    L = _factor_spd(H)
    # JT = inv(L); maintained so that JT rows [0:q] span the active-normal
    # subspace in factored coordinates: JT @ n_active = [R; 0] columns.
    JT = solve_triangular(L, np.eye(n), lower=True)
    x = -JT.T @ (JT @ f)
    R = np.zeros((n, n))
    q = 0

    # Internal >= convention: rows stored as (g, h) meaning g'x >= h.
    # Inequalities a'x <= b become (-a, -b).  Equalities keep their sign and
    # an unrestricted multiplier.
    n_eq, n_in = Ce.shape[0], Ai.shape[0]
    G = np.vstack([Ce, -Ai])
    h = np.concatenate([de, -bi])
    m_all = n_eq + n_in

    active: list[int] = []
    u = np.zeros(0)

    def _givens(a_val, b_val):
        r = np.hypot(a_val, b_val)
        if r <= 0.0:
            return 1.0, 0.0, 0.0
        return a_val / r, b_val / r, r

    # --- batched equality processing ---------------------------------------
    if n_eq:
        Dmat = JT @ Ce.T  # (n, n_eq)
        Qe, Re, piv = qr(Dmat, mode="full", pivoting=True)
        diag = np.abs(np.diag(Re[: min(n, n_eq), : min(n, n_eq)]))
        ref = diag[0] if diag.size else 0.0
        rank = int(np.sum(diag > max(ref, 1.0) * 1e-13)) if diag.size else 0
        order = piv[:rank]
        JT = Qe.T @ JT
        R[:rank, :rank] = Re[:rank, :rank]
        if rank:
            viol = de[order] - Ce[order] @ x
            x = x + JT[:rank].T @ solve_triangular(
                R[:rank, :rank].T, viol, lower=True
            )
        # Dependent equality rows must already be consistent.
        rest = piv[rank:]
        if rest.size and np.max(np.abs(Ce[rest] @ x - de[rest])) > 1e-8:
            return QpSolution("infeasible", x, lam_out, nu_out, 0, _obj(H, f, x))
        active = [int(j) for j in order]
        q = rank
        rhs = H @ x + f
        y = JT[:q] @ rhs if q else np.zeros(0)
        u = solve_triangular(R[:q, :q], y) if q else np.zeros(0)

    warm = np.zeros(n_in, dtype=bool)
    if warm_rows is not None:
        for j in np.asarray(warm_rows, dtype=int).ravel():
            pos = np.searchsorted(idx_i, j)
            if pos < idx_i.size and idx_i[pos] == j:
                warm[pos] = True

    limit = max_iter if max_iter is not None else 50 * (m_all + n + 1)
    iters = 0
    status = "max_iterations"

    while iters < limit:
        iters += 1
        slack = G[n_eq:] @ x - h[n_eq:] if n_in else np.zeros(0)
        in_set = np.zeros(n_in, dtype=bool)
        for j in active:
            if j >= n_eq:
                in_set[j - n_eq] = True
        violated = (slack < -_SLACK_TOL) & ~in_set
        if not np.any(violated):
            status = "optimal"
            break
        pool = violated & warm
        if not np.any(pool):
            pool = violated
        cand = np.flatnonzero(pool)
        pick = cand[np.argmin(slack[cand])]
        row = n_eq + int(pick)
        npl = G[row]
        s_val = slack[pick]
        u_plus = 0.0

        # Inner add/drop loop for the chosen constraint.
        while True:
            dvec = JT @ npl
            d2 = dvec[q:]
            nrm2 = float(d2 @ d2)
            if q:
                r_dir = solve_triangular(R[:q, :q], dvec[:q])
            else:
                r_dir = np.zeros(0)
            # Dual blocking step (only inequality members can hit zero).
            t1 = np.inf
            blocker = -1
            for pos in range(q):
                if active[pos] >= n_eq and r_dir[pos] > _SLACK_TOL:
                    ratio = u[pos] / r_dir[pos]
                    if ratio < t1 - 1e-14:
                        t1, blocker = ratio, pos
            t2 = -s_val / nrm2 if nrm2 > _DEP_TOL else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return QpSolution(
                    "infeasible", x, lam_out, nu_out, iters, _obj(H, f, x)
                )
            t = min(t1, t2)
            if np.isfinite(t2) and t > 0.0:
                z = d2 @ JT[q:]
                x = x + t * z
                s_val = npl @ x - h[row]
            if q:
                u = u - t * r_dir
            u_plus += t
            if t == t2 and np.isfinite(t2):
                # Add the constraint: one Householder reflection collapses d2.
                nrm = np.sqrt(nrm2)
                v = d2.copy()
                sign = 1.0 if d2[0] >= 0.0 else -1.0
                v[0] += sign * nrm
                vv = float(v @ v)
                if vv > 0.0:
                    w = v @ JT[q:]
                    JT[q:] -= np.outer((2.0 / vv) * v, w)
                R[:q, q] = dvec[:q]
                R[q, q] = -sign * nrm
                active.append(row)
                u = np.append(u, u_plus)
                q += 1
                break
            # Partial step: drop the blocking constraint and continue.
            drop = blocker
            active.pop(drop)
            u = np.delete(u, drop)
            R[:, drop : q - 1] = R[:, drop + 1 : q]
            R[:, q - 1] = 0.0
            for jj in range(drop, q - 1):
                cs, sn, rr = _givens(R[jj, jj], R[jj + 1, jj])
                if sn != 0.0:
                    rows = R[jj : jj + 2, jj : q - 1].copy()
                    R[jj, jj : q - 1] = cs * rows[0] + sn * rows[1]
                    R[jj + 1, jj : q - 1] = -sn * rows[0] + cs * rows[1]
                    jrows = JT[jj : jj + 2].copy()
                    JT[jj] = cs * jrows[0] + sn * jrows[1]
                    JT[jj + 1] = -sn * jrows[0] + cs * jrows[1]
            q -= 1
            R[q + 1 :, :] = 0.0

    # Map internal multipliers back to the caller's convention.
    for pos, j in enumerate(active):
        if j < n_eq:
            nu_out[idx_e[j]] = -u[pos] / norms_e[idx_e[j]]
        else:
            lam_out[idx_i[j - n_eq]] = u[pos] / norms_i[idx_i[j - n_eq]]
    act = np.array(
        sorted(idx_i[j - n_eq] for j in active if j >= n_eq), dtype=int
    )
    return QpSolution(status, x, lam_out, nu_out, iters, _obj(H, f, x), act)


def _obj(H, f, x) -> float:
    return float(0.5 * x @ (H @ x) + f @ x)


def kkt_residuals(H, f, A, b, C, d, sol: QpSolution):
    """Stationarity / feasibility / complementarity residuals (test helper)."""
    x = sol.x
    stat = H @ x + f
    if A is not None and len(A):
        stat = stat + np.asarray(A).T @ sol.lam
    if C is not None and len(C):
        stat = stat + np.asarray(C).T @ sol.nu
    r_stat = float(np.max(np.abs(stat)))
    r_prim = 0.0
    r_comp = 0.0
    if A is not None and len(A):
        s = np.asarray(A) @ x - np.asarray(b)
        r_prim = max(r_prim, float(np.max(s)))
        r_comp = float(np.max(np.abs(sol.lam * s)))
    if C is not None and len(C):
        r_prim = max(r_prim, float(np.max(np.abs(np.asarray(C) @ x - np.asarray(d)))))
    return r_stat, r_prim, r_comp
