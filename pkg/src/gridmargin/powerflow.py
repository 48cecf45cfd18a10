"""Newton correction and predictor-corrector continuation on the manifold.

``newton_solve`` solves the square reduced system g_red(x, y) = 0 for y at
fixed parameters. ``continuation_trace`` follows a one-parameter family
x(p) = x0 + p * d with Keller pseudo-arclength steps, so folds (nose points)
are passed instead of aborting; fold locations are refined by bisection on
the sign of det(dg_red/dy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import StudyModel
from .singularity import det_sign, smallest_singular_pair


class PowerFlowError(RuntimeError):
    pass


class MaxIterations(PowerFlowError):
    pass


class SingularJacobian(PowerFlowError):
    pass


class InitialPointOffManifold(PowerFlowError):
    pass


class StepCollapse(PowerFlowError):
    pass


def _lu_solve_checked(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    lu, piv = sla.lu_factor(J)
    umin = np.min(np.abs(np.diag(lu)))
    if umin < 1e-12:
        raise SingularJacobian(f"LU pivot {umin:.3e} below 1e-12")
    return sla.lu_solve((lu, piv), rhs)


def newton_solve(model: StudyModel, x, y0, tol: float = 1e-10,
                 max_iter: int = 50) -> np.ndarray:
    """Damped Newton on the reduced rows; returns y with ||g_red||_inf < tol."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y0, dtype=float).copy()
    r = model.residual_reduced(x, y)
    rn = np.max(np.abs(r))
    for _ in range(max_iter):
        if rn < tol:
            return y
        J = model.reduced_jac_y(x, y)
        step = _lu_solve_checked(J, -r)
        alpha = 1.0
        while True:
            y_try = y + alpha * step
            r_try = model.residual_reduced(x, y_try)
            rn_try = np.max(np.abs(r_try))
            if rn_try < rn or alpha < 1e-4:
                break
            alpha *= 0.5
        y, r, rn = y_try, r_try, rn_try
    if rn < tol:
        return y
    raise MaxIterations(f"no convergence in {max_iter} iterations, ||g||={rn:.3e}")


@dataclass
class ContinuationOptions:
    step0: float = 0.05
    min_step: float = 1e-8
    max_step: float = 0.2
    grow: float = 1.3
    shrink: float = 0.5
    corrector_tol: float = 1e-10
    corrector_iters: int = 8
    max_steps: int = 400
    bisect_tol: float = 1e-6
    stop_at_nose: bool = True
    max_noses: int = 8
    param_limit: float = 50.0
    target_param: float | None = None   # stop when p crosses this value
    target_y: np.ndarray | None = None  # require closeness in y at the target
    target_y_tol: float = 1e-2


@dataclass
class ContinuationTrace:
    nodes: list            # (x_full, y) per node
    params: list           # ray parameter p per node
    step_sizes: list       # accepted pseudo-arclength increments
    det_signs: list
    nose_events: list = field(default_factory=list)  # node indices of folds
    reached_target: bool = False

    def __len__(self):
        return len(self.nodes)

    def sigma_min(self, model: StudyModel, k: int = -1) -> float:
        x, y = self.nodes[k]
        s, _ = smallest_singular_pair(model.reduced_jac_y(x, y))
        return s


class _RayProblem:
    """g_red(x0 + p*d, y) = 0 over the augmented variable w = (p, y)."""

    def __init__(self, model: StudyModel, x0, direction_free):
        self.model = model
        self.x0 = np.asarray(x0, dtype=float)
        d = np.zeros(model.n_x)
        d[model.free_x] = direction_free
        self.d = d

    def x_at(self, p: float) -> np.ndarray:
        return self.x0 + p * self.d

    def residual(self, w):
        return self.model.residual_reduced(self.x_at(w[0]), w[1:])

    def jacobian(self, w):
        x = self.x_at(w[0])
        y = w[1:]
        Jy = self.model.reduced_jac_y(x, y)
        Jp = self.model.jac_x(x, y)[self.model.reduced_rows] @ self.d
        return np.hstack([Jp[:, None], Jy]), Jy

    def tangent(self, w, prev_t):
        Jfull, _ = self.jacobian(w)
        A = np.vstack([Jfull, prev_t])
        rhs = np.zeros(A.shape[0])
        rhs[-1] = 1.0
        try:
            t = _lu_solve_checked(A, rhs)
        except SingularJacobian:
            # Fall back to the least-squares null direction.
            _, _, vh = np.linalg.svd(Jfull)
            t = vh[-1]
            if t @ prev_t < 0:
                t = -t
        return t / np.linalg.norm(t)

    def correct(self, w_pred, t_hat, opts):
        w = w_pred.copy()
        for _ in range(opts.corrector_iters):
            r = self.residual(w)
            orth = t_hat @ (w - w_pred)
            if max(np.max(np.abs(r)), abs(orth)) < opts.corrector_tol:
                return w
            Jfull, _ = self.jacobian(w)
            A = np.vstack([Jfull, t_hat])
            rhs = -np.concatenate([r, [orth]])
            w = w + _lu_solve_checked(A, rhs)
        r = self.residual(w)
        if np.max(np.abs(r)) < opts.corrector_tol:
            return w
        return None


def continuation_trace(model: StudyModel, x0, y0, direction,
                       options: ContinuationOptions | None = None) -> ContinuationTrace:
    """Trace the solution curve of the ray x0 + p * direction (free coords).

    Stops at the first refined nose point when ``stop_at_nose`` is set;
    otherwise walks on, recording every fold, until max_steps, param_limit,
    or the optional target parameter value is reached.
    """
    opts = options or ContinuationOptions()
    x0 = np.asarray(x0, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if np.max(np.abs(model.residual_reduced(x0, y0))) > 1e-8:
        raise InitialPointOffManifold("start point violates g = 0")

    direction = np.asarray(direction, dtype=float)
    if direction.shape == (model.n_x,):
        direction = direction[model.free_x]
    elif direction.shape != (len(model.free_x),):
        raise ValueError("direction must cover the free x coordinates")
    norm = np.linalg.norm(direction)
    trace = ContinuationTrace(nodes=[], params=[], step_sizes=[], det_signs=[])

    def record(w, h):
        x = prob.x_at(w[0]) if norm > 0 else x0
        xf = model.complete_x(x, w[1:])
        trace.nodes.append((xf, w[1:].copy()))
        trace.params.append(float(w[0]))
        trace.step_sizes.append(h)
        trace.det_signs.append(det_sign(model.reduced_jac_y(x, w[1:])))

    if norm == 0.0:
        prob = None
        w = np.concatenate([[0.0], y0])
        x = model.complete_x(x0, y0)
        trace.nodes.append((x, y0.copy()))
        trace.params.append(0.0)
        trace.step_sizes.append(0.0)
        trace.det_signs.append(det_sign(model.reduced_jac_y(x0, y0)))
        return trace

    prob = _RayProblem(model, x0, direction / norm)
    w = np.concatenate([[0.0], y0])
    record(w, 0.0)

    t_prev = np.zeros(1 + model.n_y)
    t_prev[0] = 1.0
    t = prob.tangent(w, t_prev)
    h = opts.step0
    noses = 0

    for _ in range(opts.max_steps):
        accepted = None
        while accepted is None:
            w_pred = w + h * t
            accepted = prob.correct(w_pred, t, opts)
            if accepted is None:
                h *= opts.shrink
                if h < opts.min_step:
                    raise StepCollapse(f"continuation step below {opts.min_step}")
        w_new = accepted
        t_new = prob.tangent(w_new, t)
        record(w_new, h)

        prev_p, new_p = w[0], w_new[0]
        det_flip = trace.det_signs[-1] * trace.det_signs[-2] < 0
        if det_flip:
            fold = _bisect_fold(prob, w, t, h, opts, trace.det_signs[-2])
            if fold is not None:
                trace.nodes[-1] = fold_node(model, prob, fold)
                trace.params[-1] = float(fold[0])
                trace.det_signs[-1] = 0
                w_new = fold
                t_new = prob.tangent(w_new, t)
            trace.nose_events.append(len(trace.nodes) - 1)
            noses += 1
            if opts.stop_at_nose or noses >= opts.max_noses:
                return trace

        if opts.target_param is not None:
            lo, hi = sorted((prev_p, new_p))
            if lo <= opts.target_param <= hi and not det_flip:
                w_t = _land_on_param(model, prob, w, w_new, opts)
                if w_t is not None:
                    ok = True
                    if opts.target_y is not None:
                        ok = np.linalg.norm(w_t[1:] - opts.target_y) < opts.target_y_tol
                    if ok:
                        # Replace the overshooting node so the recorded
                        # polyline ends exactly on the target.
                        trace.nodes[-1] = fold_node(model, prob, w_t)
                        trace.params[-1] = float(w_t[0])
                        trace.step_sizes[-1] = abs(w_t[0] - prev_p)
                        trace.det_signs[-1] = det_sign(
                            model.reduced_jac_y(prob.x_at(w_t[0]), w_t[1:]))
                        trace.reached_target = True
                        return trace

        if abs(w_new[0]) > opts.param_limit:
            return trace
        # Loop closure: returned to the start point going the same way.
        if len(trace) > 10 and np.linalg.norm(w_new - np.concatenate([[0.0], y0])) < opts.step0 / 2:
            return trace

        w, t = w_new, t_new
        # Fast corrector convergence earns a longer step.
        h = min(h * opts.grow, opts.max_step)

    return trace


def fold_node(model, prob, w):
    x = model.complete_x(prob.x_at(w[0]), w[1:])
    return (x, w[1:].copy())


def _bisect_fold(prob, w_from, t, h, opts, sign_from):
    """Refine a det-sign change inside the step (w_from, w_from + h*t)."""
    lo, hi = 0.0, h
    w_lo = w_from
    for _ in range(200):
        if hi - lo < opts.bisect_tol:
            break
        mid = 0.5 * (lo + hi)
        w_pred = w_from + mid * t
        w_mid = prob.correct(w_pred, t, opts)
        if w_mid is None:
            return None
        _, Jy = prob.jacobian(w_mid)
        s = det_sign(Jy)
        if s == sign_from:
            lo, w_lo = mid, w_mid
        else:
            hi = mid
    w_pred = w_from + 0.5 * (lo + hi) * t
    w_mid = prob.correct(w_pred, t, opts)
    return w_mid if w_mid is not None else w_lo


def _land_on_param(model, prob, w_a, w_b, opts):
    """Newton-correct onto p = target between two consecutive nodes."""
    p_t = opts.target_param
    lam = (p_t - w_a[0]) / (w_b[0] - w_a[0]) if w_b[0] != w_a[0] else 0.5
    y = (1 - lam) * w_a[1:] + lam * w_b[1:]
    try:
        y = newton_solve(model, prob.x_at(p_t), y, tol=opts.corrector_tol)
    except PowerFlowError:
        return None
    return np.concatenate([[p_t], y])


def trace_to_csv(model: StudyModel, trace: ContinuationTrace) -> str:
    """One row per node: step, x..., y..., smallest singular value, det sign."""
    import io

    buf = io.StringIO()
    nx, ny = model.n_x, model.n_y
    cols = (["step"] + [f"x{i}" for i in range(nx)] + [f"y{i}" for i in range(ny)]
            + ["sigma_min", "det_sign"])
    buf.write(",".join(cols) + "\n")
    for k, (x, y) in enumerate(trace.nodes):
        s, _ = smallest_singular_pair(model.reduced_jac_y(x, y))
        row = ([f"{trace.step_sizes[k]:.9g}"] + [f"{v:.12g}" for v in x]
               + [f"{v:.12g}" for v in y] + [f"{s:.6e}", str(trace.det_signs[k])])
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
