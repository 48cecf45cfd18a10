"""Smooth equality-constrained NLP solver with box bounds.

    minimize f(w)   subject to   c(w) = 0,   lb <= w <= ub

Algorithm: primal-dual interior point. Bounds enter through a logarithmic
barrier with monotone reduction (factor 0.2); each barrier subproblem is
solved by damped Newton steps on the perturbed KKT system

    [ B + Sigma + dp*I   J^T  ] [dw]   [ -(grad f + J^T lam - mu/sL + mu/sU) ]
    [ J                -dd*I  ] [dl] = [ -c                                  ]

with a backtracking line search on an l1 merit function and a
fraction-to-boundary rule. Curvature of the Lagrangian is approximated, not
computed: either a problem-supplied Gauss-Newton matrix or a block-partitioned
damped BFGS (blocks default to the whole vector on small problems; structured
problems pass their natural partition so the approximation stays sparse).
Rank-deficient constraint Jacobians are absorbed by the dual regularization
dd; failed steps raise the primal regularization dp by factors of 10 up to
1e6 before the solve is declared a numerical failure. A Gauss-Newton
feasibility restoration runs when the line search stalls far from the
constraint set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class NlpProblem:
    n: int
    m: int
    objective: Callable  # w -> (f, grad)
    constraints: Callable  # w -> (c, J sparse or dense)
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    hess_approx: Optional[Callable] = None  # (w, lam) -> PSD matrix (sparse)
    quasi_newton_blocks: Optional[Sequence[np.ndarray]] = None
    name: str = ""


@dataclass
class NlpOptions:
    tol_stationarity: float = 1e-6
    tol_feasibility: float = 1e-8
    tol_complementarity: float = 1e-6
    max_iter: int = 500
    mu0: float = 0.1
    mu_factor: float = 0.2
    kappa_eps: float = 10.0
    delta_dual: float = 1e-8
    reg_growth: float = 10.0
    reg_max: float = 1e6
    armijo: float = 1e-4
    ls_min_alpha: float = 1e-12
    dense_limit: int = 500          # dense KKT factorization below this size
    dense_bfgs_limit: int = 600     # single full-vector BFGS block below this
    hessian_mode: str = "auto"      # auto | bfgs | gauss_newton | identity
    max_restorations: int = 3
    verbose: bool = False


@dataclass
class SolveReport:
    status: SolveStatus
    kkt_residual: float
    iterations: int
    solution: np.ndarray
    multipliers: np.ndarray
    bound_multipliers: np.ndarray
    objective: float
    hessian_mode: str
    log: list = field(default_factory=list)
    message: str = ""

    @property
    def success(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


def _as_csr(J):
    return J.tocsr() if sp.issparse(J) else sp.csr_matrix(np.atleast_2d(J))


class _BlockBfgs:
    """Powell-damped BFGS kept block-diagonal over a fixed partition."""

    def __init__(self, blocks, n, init=None):
        self.blocks = [np.asarray(b, dtype=int) for b in blocks]
        covered = np.concatenate(self.blocks) if self.blocks else np.array([], int)
        if len(np.unique(covered)) != n:
            raise ValueError("quasi-Newton blocks must partition the variables")
        self.B = []
        for b in self.blocks:
            if init is not None:
                Bb = np.asarray(init[np.ix_(b, b)].todense() if sp.issparse(init)
                                else init[np.ix_(b, b)], dtype=float)
                Bb = 0.5 * (Bb + Bb.T) + 1e-6 * np.eye(len(b))
            else:
                Bb = np.eye(len(b))
            self.B.append(Bb)

    def matrix(self) -> sp.csr_matrix:
        n = sum(len(b) for b in self.blocks)
        rows, cols, vals = [], [], []
        for b, Bb in zip(self.blocks, self.B):
            r, c = np.meshgrid(b, b, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(Bb.ravel())
        return sp.csr_matrix((np.concatenate(vals),
                              (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def update(self, s_full, y_full):
        for b, Bb in zip(self.blocks, self.B):
            s = s_full[b]
            y = y_full[b]
            sn = np.linalg.norm(s)
            if sn < 1e-12:
                continue
            Bs = Bb @ s
            sBs = float(s @ Bs)
            if sBs <= 0:
                continue
            sy = float(s @ y)
            if sy < 0.2 * sBs:
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1.0 - theta) * Bs
                sy = float(s @ y)
            if sy <= 1e-16 * sBs:
                continue
            Bb -= np.outer(Bs, Bs) / sBs
            Bb += np.outer(y, y) / sy
            Bb[:] = 0.5 * (Bb + Bb.T)


class _Kkt:
    """Factor and solve the regularized KKT system, dense or sparse."""

    def __init__(self, n, m, dense_limit):
        self.n, self.m = n, m
        self.dense = (n + m) < dense_limit

    def factor(self, W, J, delta_dual):
        n, m = self.n, self.m
        if self.dense:
            K = np.zeros((n + m, n + m))
            K[:n, :n] = W.toarray() if sp.issparse(W) else W
            if m:
                Jd = J.toarray() if sp.issparse(J) else J
                K[:n, n:] = Jd.T
                K[n:, :n] = Jd
                K[n:, n:] = -delta_dual * np.eye(m)
            self._lu = sla.lu_factor(K)
            return True
        blocks = [[W, J.T], [J, -delta_dual * sp.identity(m, format="csr")]] if m else [[W]]
        K = sp.bmat(blocks, format="csc")
        try:
            self._lu = spla.splu(K)
        except RuntimeError:
            return False
        return True

    def solve(self, rhs):
        if self.dense:
            return sla.lu_solve(self._lu, rhs)
        return self._lu.solve(rhs)


def _lsq_multipliers(J, rhs_vec):
    """argmin_lam || rhs_vec + J^T lam ||, via the normal equations."""
    m = J.shape[0]
    if m == 0:
        return np.zeros(0)
    JJt = (J @ J.T).toarray() if sp.issparse(J) else J @ J.T
    JJt = JJt + 1e-10 * np.eye(m)
    try:
        return sla.solve(JJt, -(J @ rhs_vec), assume_a="pos")
    except sla.LinAlgError:
        return np.zeros(m)


def solve(problem: NlpProblem, w0, options: NlpOptions | None = None) -> SolveReport:
    opts = options or NlpOptions()
    n, m = problem.n, problem.m
    w = np.asarray(w0, dtype=float).copy()
    if w.shape != (n,):
        raise ValueError(f"w0 must have shape ({n},)")

    lb = np.full(n, -np.inf) if problem.lb is None else np.asarray(problem.lb, float)
    ub = np.full(n, np.inf) if problem.ub is None else np.asarray(problem.ub, float)
    has_lb = np.isfinite(lb)
    has_ub = np.isfinite(ub)
    bounded = bool(has_lb.any() or has_ub.any())

    # Push the start strictly inside the box.
    if bounded:
        span = np.where(np.isfinite(ub - lb), ub - lb, 1.0)
        pad = np.maximum(1e-8, 1e-2 * np.abs(span))
        w = np.where(has_lb, np.maximum(w, lb + pad), w)
        w = np.where(has_ub, np.minimum(w, ub - pad), w)

    mu = opts.mu0 if bounded else 0.0
    zL = np.where(has_lb, mu / np.maximum(w - lb, 1e-8), 0.0) if bounded else np.zeros(n)
    zU = np.where(has_ub, mu / np.maximum(ub - w, 1e-8), 0.0) if bounded else np.zeros(n)

    f, grad = problem.objective(w)
    c, J = problem.constraints(w)
    c = np.atleast_1d(np.asarray(c, float))
    J = _as_csr(J)
    lam = _lsq_multipliers(J, grad - zL + zU)

    # Hessian strategy.
    mode = opts.hessian_mode
    if mode == "auto":
        if problem.quasi_newton_blocks is not None or n <= opts.dense_bfgs_limit:
            mode = "bfgs"
        elif problem.hess_approx is not None:
            mode = "gauss_newton"
        else:
            mode = "identity"
    bfgs = None
    if mode == "bfgs":
        blocks = problem.quasi_newton_blocks or [np.arange(n)]
        init = problem.hess_approx(w, lam) if problem.hess_approx else None
        bfgs = _BlockBfgs(blocks, n, init=init)

    kkt = _Kkt(n, m, opts.dense_limit)
    delta_p = 0.0
    nu = 1.0
    log = []
    restorations = 0
    status = SolveStatus.MAX_ITERATIONS
    message = ""
    it = 0
    merit_window = []
    small_steps = 0

    def barrier_terms(wv):
        t = 0.0
        if bounded and mu > 0:
            t -= mu * np.sum(np.log(wv[has_lb] - lb[has_lb]))
            t -= mu * np.sum(np.log(ub[has_ub] - wv[has_ub]))
        return t

    def kkt_errors(grad_, c_, zL_, zU_, mu_):
        dual = grad_ + J.T @ lam - zL_ + zU_
        e_stat = np.max(np.abs(dual)) if n else 0.0
        e_feas = np.max(np.abs(c_)) if m else 0.0
        comps = []
        if has_lb.any():
            comps.append(np.max(np.abs(zL_[has_lb] * (w[has_lb] - lb[has_lb]) - mu_)))
        if has_ub.any():
            comps.append(np.max(np.abs(zU_[has_ub] * (ub[has_ub] - w[has_ub]) - mu_)))
        nb = int(has_lb.sum() + has_ub.sum())
        sc = max(100.0, (np.sum(np.abs(zL_)) + np.sum(np.abs(zU_))) / max(1, nb)) / 100.0
        e_comp = (max(comps) / sc) if comps else 0.0
        return e_stat, e_feas, e_comp

    while it < opts.max_iter:
        e_stat, e_feas, e_comp = kkt_errors(grad, c, zL, zU, 0.0)
        kkt_res = max(e_stat, e_feas, e_comp)
        if (e_stat < opts.tol_stationarity and e_feas < opts.tol_feasibility
                and e_comp < opts.tol_complementarity):
            status = SolveStatus.OPTIMAL
            break

        if bounded and mu > 0:
            es, ef, ec = kkt_errors(grad, c, zL, zU, mu)
            if max(es, ef, ec) <= opts.kappa_eps * mu:
                mu = max(opts.mu_factor * mu, opts.tol_complementarity / 10.0)

        sL = np.where(has_lb, w - lb, 1.0)
        sU = np.where(has_ub, ub - w, 1.0)
        sigma = np.where(has_lb, zL / sL, 0.0) + np.where(has_ub, zU / sU, 0.0)

        if mode == "gauss_newton":
            B = _as_csr(problem.hess_approx(w, lam))
            delta_floor = 1e-8
        elif mode == "bfgs":
            B = bfgs.matrix()
            delta_floor = 0.0
        else:
            B = sp.identity(n, format="csr")
            delta_floor = 0.0

        grad_bar = grad.copy()
        if bounded and mu > 0:
            grad_bar -= np.where(has_lb, mu / sL, 0.0)
            grad_bar += np.where(has_ub, mu / sU, 0.0)

        # Regularization loop: factor, solve, sanity-check the step. The
        # dual part of the solution is the fresh multiplier estimate itself
        # (the rhs carries no J^T lam term), so multipliers never lag the
        # primal progress.
        delta_try = max(delta_p, delta_floor)
        delta_d = opts.delta_dual
        step = None
        while True:
            W = B + sp.diags(sigma + delta_try)
            ok = kkt.factor(W, J, delta_d)
            if ok:
                rhs = np.concatenate([-grad_bar, -c]) if m else -grad_bar
                sol = kkt.solve(rhs)
                dw = sol[:n]
                lam_plus = sol[n:] if m else np.zeros(0)
                curv = float(dw @ (W @ dw))
                if np.all(np.isfinite(sol)) and curv >= 1e-14 * float(dw @ dw):
                    step = (dw, lam_plus)
                    break
            delta_try = 1e-8 if delta_try == 0 else delta_try * opts.reg_growth
            delta_d *= opts.reg_growth
            if delta_try > opts.reg_max:
                return SolveReport(SolveStatus.NUMERICAL_FAILURE, kkt_res, it, w, lam,
                                   zL - zU, f, mode, log,
                                   "KKT factorization failed at max regularization")
        dw, lam_plus = step

        # Dual steps for the bound multipliers.
        dzL = np.where(has_lb, mu / sL - zL - (zL / sL) * dw, 0.0)
        dzU = np.where(has_ub, mu / sU - zU + (zU / sU) * dw, 0.0)

        # Fraction to the boundary.
        tau = max(0.99, 1.0 - mu) if bounded else 1.0
        alpha_max = 1.0
        if bounded:
            neg = dw < 0
            msk = has_lb & neg
            if msk.any():
                alpha_max = min(alpha_max, np.min(-tau * sL[msk] / dw[msk]))
            pos = dw > 0
            msk = has_ub & pos
            if msk.any():
                alpha_max = min(alpha_max, np.min(tau * sU[msk] / dw[msk]))
            alpha_z = 1.0
            for z, dz in ((zL, dzL), (zU, dzU)):
                neg = dz < 0
                mz = neg & (z > 0)
                if mz.any():
                    alpha_z = min(alpha_z, np.min(-tau * z[mz] / dz[mz]))
        else:
            alpha_z = 1.0

        # l1 merit line search, non-monotone over a short window, with an
        # early second-order correction when the full step is rejected by
        # constraint curvature.
        nu = max(nu, 1.1 * (np.max(np.abs(lam_plus)) if m else 0.0) + 0.01)
        c_l1 = np.sum(np.abs(c))
        D = float(grad_bar @ dw) - nu * c_l1
        if D >= 0 and c_l1 <= opts.tol_feasibility:
            # Not a descent direction: add curvature and retry next round.
            delta_p = max(1e-8, delta_p * opts.reg_growth, delta_try * opts.reg_growth)
            if delta_p > opts.reg_max:
                return SolveReport(SolveStatus.NUMERICAL_FAILURE, kkt_res, it, w, lam,
                                   zL - zU, f, mode, log, "no descent direction")
            it += 1
            continue

        phi0 = f + barrier_terms(w) + nu * c_l1
        merit_window.append(phi0)
        if len(merit_window) > 5:
            merit_window.pop(0)
        phi_ref = max(merit_window)

        def merit_ok(w_t, phi_t, alpha_t):
            return (np.isfinite(phi_t)
                    and phi_t <= phi_ref + opts.armijo * alpha_t * min(D, 0.0))

        def evaluate(w_t):
            f_t, grad_t = problem.objective(w_t)
            c_t, J_t = problem.constraints(w_t)
            c_t = np.atleast_1d(np.asarray(c_t, float))
            phi_t = f_t + barrier_terms(w_t) + nu * np.sum(np.abs(c_t))
            return f_t, grad_t, c_t, J_t, phi_t

        alpha = alpha_max
        accepted = False
        w_t = w + alpha * dw
        f_t, grad_t, c_t, J_t, phi_t = evaluate(w_t)
        if merit_ok(w_t, phi_t, alpha):
            accepted = True
        elif m:
            # Second-order correction at the full step.
            rhs = np.concatenate([np.zeros(n), -c_t])
            sol = kkt.solve(rhs)
            w_soc = w_t + sol[:n]
            inside = not bounded or bool(np.all(w_soc > lb) and np.all(w_soc < ub))
            if inside:
                f_s, grad_s, c_s, J_s, phi_s = evaluate(w_soc)
                if merit_ok(w_soc, phi_s, alpha):
                    accepted = True
                    w_t, f_t, grad_t, c_t, J_t, phi_t = w_soc, f_s, grad_s, c_s, J_s, phi_s
                    dw = (w_soc - w) / alpha
        while not accepted and alpha >= opts.ls_min_alpha:
            alpha *= 0.5
            w_t = w + alpha * dw
            f_t, grad_t, c_t, J_t, phi_t = evaluate(w_t)
            if merit_ok(w_t, phi_t, alpha):
                accepted = True

        if not accepted:
            if delta_try < opts.reg_max / opts.reg_growth:
                delta_p = max(1e-8, delta_try * opts.reg_growth)
                it += 1
                continue
            if np.sum(np.abs(c)) > 10 * opts.tol_feasibility and restorations < opts.max_restorations:
                restorations += 1
                w, f, grad, c, J = _restore_feasibility(problem, w, lb, ub, opts)
                lam = _lsq_multipliers(J, grad - zL + zU)
                delta_p = 0.0
                it += 1
                continue
            return SolveReport(SolveStatus.INFEASIBLE if np.sum(np.abs(c)) > 10 * opts.tol_feasibility
                               else SolveStatus.NUMERICAL_FAILURE,
                               kkt_res, it, w, lam, zL - zU, f, mode, log,
                               "line search failed")

        w_old, grad_old, J_old = w, grad, J
        w = w_t
        # The KKT solution carries the new multiplier estimate directly.
        lam = lam_plus
        if bounded:
            zL = np.maximum(zL + alpha_z * dzL, 0.0)
            zU = np.maximum(zU + alpha_z * dzU, 0.0)
            if mu > 0:
                kap = 1e10
                slk = np.where(has_lb, w - lb, 1.0)
                zL = np.where(has_lb, np.clip(zL, mu / (kap * slk), kap * mu / slk), 0.0)
                sub = np.where(has_ub, ub - w, 1.0)
                zU = np.where(has_ub, np.clip(zU, mu / (kap * sub), kap * mu / sub), 0.0)
        f, grad, c, J = f_t, grad_t, c_t, _as_csr(J_t)

        if mode == "bfgs":
            if alpha * np.max(np.abs(dw)) > 1e-9 * (1.0 + np.max(np.abs(w))):
                y_full = (grad - grad_old) + (J - J_old).T @ lam if m else grad - grad_old
                bfgs.update(w - w_old, np.asarray(y_full).ravel())
            # Repeatedly collapsing steps mean the curvature model has gone
            # bad; start it over from the structured initialization.
            small_steps = small_steps + 1 if alpha < 1e-3 else 0
            if small_steps >= 4:
                init = problem.hess_approx(w, lam) if problem.hess_approx else None
                bfgs = _BlockBfgs(bfgs.blocks, n, init=init)
                small_steps = 0

        delta_p = delta_try if alpha < 0.1 else 0.0
        it += 1
        log.append({"iter": it, "objective": f,
                    "primal_inf": float(np.max(np.abs(c))) if m else 0.0,
                    "dual_inf": e_stat, "barrier": mu,
                    "step_length": alpha, "regularization": delta_try})
        if opts.verbose:
            print(f"[{problem.name}] it={it:3d} f={f:+.6e} |c|={log[-1]['primal_inf']:.2e} "
                  f"stat={e_stat:.2e} mu={mu:.1e} a={alpha:.2e}")

    e_stat, e_feas, e_comp = kkt_errors(grad, c, zL, zU, 0.0)
    kkt_res = max(e_stat, e_feas, e_comp)
    if (e_stat < opts.tol_stationarity and e_feas < opts.tol_feasibility
            and e_comp < opts.tol_complementarity):
        status = SolveStatus.OPTIMAL
    return SolveReport(status, kkt_res, it, w, lam, zL - zU, f, mode, log, message)


def _restore_feasibility(problem, w, lb, ub, opts):
    """Gauss-Newton descent on ||c||^2 until it stops improving."""
    w = w.copy()
    c, J = problem.constraints(w)
    c = np.atleast_1d(np.asarray(c, float))
    J = _as_csr(J)
    best = np.linalg.norm(c)
    sigma = 1e-8
    for _ in range(50):
        if best < opts.tol_feasibility:
            break
        JJ = (J.T @ J + sigma * sp.identity(problem.n)).tocsc()
        try:
            dw = spla.splu(JJ).solve(-(J.T @ c))
        except RuntimeError:
            sigma *= 100
            continue
        alpha = 1.0
        improved = False
        while alpha > 1e-8:
            w_t = np.clip(w + alpha * dw, lb + 1e-12, ub - 1e-12)
            c_t, J_t = problem.constraints(w_t)
            c_t = np.atleast_1d(np.asarray(c_t, float))
            if np.linalg.norm(c_t) < best * (1 - 1e-4 * alpha):
                w, c, J = w_t, c_t, _as_csr(J_t)
                best = np.linalg.norm(c_t)
                improved = True
                break
            alpha *= 0.5
        if not improved:
            sigma *= 10
            if sigma > 1e6:
                break
    f, grad = problem.objective(w)
    return w, f, grad, c, J


@dataclass
class DerivativeReport:
    max_rel_error_grad: float
    max_rel_error_jac: float
    worst_grad_index: int
    worst_jac_entry: tuple
    flagged: list  # (row, col, rel_err) above threshold, sorted worst first

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_error_grad, self.max_rel_error_jac)


def check_derivatives(problem: NlpProblem, w, step: float = 1e-6,
                      threshold: float = 1e-4) -> DerivativeReport:
    """Central finite differences against the supplied callbacks."""
    w = np.asarray(w, dtype=float)
    _, grad = problem.objective(w)
    _, J = problem.constraints(w)
    J = _as_csr(J).toarray()
    fd_grad = np.zeros_like(grad)
    fd_J = np.zeros_like(J)
    for j in range(problem.n):
        wp, wm = w.copy(), w.copy()
        wp[j] += step
        wm[j] -= step
        fp, _ = problem.objective(wp)
        fm, _ = problem.objective(wm)
        fd_grad[j] = (fp - fm) / (2 * step)
        cp, _ = problem.constraints(wp)
        cm, _ = problem.constraints(wm)
        fd_J[:, j] = (np.atleast_1d(cp) - np.atleast_1d(cm)) / (2 * step)

    def rel(a, b):
        return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))

    eg = rel(grad, fd_grad)
    ej = rel(J, fd_J)
    worst_g = int(np.argmax(eg)) if eg.size else 0
    worst_j = np.unravel_index(np.argmax(ej), ej.shape) if ej.size else (0, 0)
    flagged = [(-1, j, float(eg[j])) for j in np.where(eg > threshold)[0]]
    rows, cols = np.where(ej > threshold)
    flagged += [(int(r), int(cj), float(ej[r, cj])) for r, cj in zip(rows, cols)]
    flagged.sort(key=lambda t: -t[2])
    return DerivativeReport(float(eg.max()) if eg.size else 0.0,
                            float(ej.max()) if ej.size else 0.0,
                            worst_g, (int(worst_j[0]), int(worst_j[1])), flagged)


def write_iteration_log(report: SolveReport, path):
    cols = ["iter", "objective", "primal_inf", "dual_inf", "barrier",
            "step_length", "regularization"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in report.log:
            fh.write(",".join(f"{row[c]:.9g}" if isinstance(row[c], float) else str(row[c])
                              for c in cols) + "\n")
