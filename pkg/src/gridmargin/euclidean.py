"""Minimum Euclidean distance from an operating point to the singular surface.

The decision vector is (x, y, r): a state on the manifold together with a
unit left null vector of the reduced Jacobian certifying that the state sits
on the singular surface. The objective is the squared distance in the metric
subspace. Multi-start enumerates local minima; each solution is classified
against the reachable ("correct") singular surface by driving the system
along the straight segment on the manifold and counting nose points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import StudyModel
from .nlp import NlpOptions, NlpProblem, SolveReport, SolveStatus, solve
from .powerflow import ContinuationOptions, PowerFlowError, continuation_trace
from .singularity import SIGMA_SINGULAR, SurfaceClass, canonical_sign, smallest_singular_pair


@dataclass
class EuclideanResult:
    z_start: np.ndarray
    z_end: np.ndarray
    distance: float
    endpoint_state: tuple  # (x, y)
    null_vector: np.ndarray
    sigma_min: float
    surface_class: SurfaceClass | None
    nose_count: int | None
    associated_arc_length: float | None
    report: SolveReport

    @property
    def certificate(self) -> dict:
        return {
            "sigma_min": self.sigma_min,
            "null_norm": float(np.linalg.norm(self.null_vector)),
        }


def build_euclidean_nlp(model: StudyModel, z0) -> NlpProblem:
    """Distance-to-singularity NLP over w = (x, y, r)."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (model.n_z,):
        raise ValueError(f"z0 must have shape ({model.n_z},)")
    nx, ny = model.n_x, model.n_y
    n = nx + ny + ny
    m = model.n_g + ny + 1

    def split(w):
        return w[:nx], w[nx:nx + ny], w[nx + ny:]

    def objective(w):
        x, y, _ = split(w)
        z = model.metric_output(x, y)
        M = model.metric_jacobian(x, y)
        dz = z - z0
        grad = np.zeros(n)
        grad[:nx + ny] = 2.0 * (M.T @ dz)
        return float(dz @ dz), grad

    def constraints(w):
        x, y, r = split(w)
        g = model.residual(x, y)
        Jx = model.jac_x(x, y)
        Jy = model.jac_y(x, y)
        Jred = Jy[model.reduced_rows]
        null_res = Jred.T @ r
        A_x, A_y = model.singularity_constraint_jac(x, y, r)
        c = np.concatenate([g, null_res, [r @ r - 1.0]])
        J = np.zeros((m, n))
        J[:model.n_g, :nx] = Jx
        J[:model.n_g, nx:nx + ny] = Jy
        J[model.n_g:model.n_g + ny, :nx] = A_x
        J[model.n_g:model.n_g + ny, nx:nx + ny] = A_y
        J[model.n_g:model.n_g + ny, nx + ny:] = Jred.T
        J[-1, nx + ny:] = 2.0 * r
        return c, sp.csr_matrix(J)

    def hess_approx(w, lam):
        x, y, _ = split(w)
        M = model.metric_jacobian(x, y)
        B = np.zeros((n, n))
        B[:nx + ny, :nx + ny] = 2.0 * (M.T @ M)
        return sp.csr_matrix(B + 1e-8 * np.eye(n))

    return NlpProblem(n=n, m=m, objective=objective, constraints=constraints,
                      hess_approx=hess_approx, name=f"euclid[{model.case.name}]")


def generate_seeds(model: StudyModel, base_x, base_y, n_directions: int,
                   rng: np.random.Generator, folds_per_direction: int = 2,
                   perturb: float = 0.0):
    """Seed states from continuation rays stopped at their fold points.

    Every refined fold along each random ray yields one (x, y, r) seed, the
    null vector taken from the smallest singular pair there. Optional random
    perturbation spreads seeds off the found folds.
    """
    seeds = []
    nf = len(model.free_x)
    opts = ContinuationOptions(stop_at_nose=False, max_noses=folds_per_direction,
                               max_steps=600)
    for _ in range(n_directions):
        d = rng.standard_normal(nf)
        d /= np.linalg.norm(d)
        try:
            trace = continuation_trace(model, base_x, base_y, d, opts)
        except PowerFlowError:
            continue
        for idx in trace.nose_events:
            x_f, y_f = trace.nodes[idx]
            _, r = smallest_singular_pair(model.reduced_jac_y(x_f, y_f))
            seeds.append((x_f.copy(), y_f.copy(), r))
            if perturb > 0.0:
                dx = perturb * rng.standard_normal(model.n_x)
                dy = perturb * rng.standard_normal(model.n_y)
                seeds.append((x_f + dx, y_f + dy, r))
    return seeds


def solve_multistart(model: StudyModel, z0, seeds, nlp_options: NlpOptions | None = None,
                     base_point=None, classify: bool = True,
                     dedupe_tol: float = 1e-4):
    """Solve the Euclidean NLP from every seed; deduplicate and classify.

    Results are sorted by distance, then lexicographically by endpoint, so
    the output does not depend on seed order. Solver failures are skipped,
    not fatal.
    """
    problem = build_euclidean_nlp(model, z0)
    nx, ny = model.n_x, model.n_y
    raw = []
    for x_s, y_s, r_s in seeds:
        w0 = np.concatenate([x_s, y_s, canonical_sign(r_s)])
        rep = solve(problem, w0, nlp_options)
        if rep.status is not SolveStatus.OPTIMAL:
            continue
        x = rep.solution[:nx]
        y = rep.solution[nx:nx + ny]
        r = canonical_sign(rep.solution[nx + ny:])
        sigma, _ = smallest_singular_pair(model.reduced_jac_y(x, y))
        if sigma > SIGMA_SINGULAR:
            continue
        z = model.metric_output(x, y)
        raw.append(EuclideanResult(
            z_start=np.asarray(z0, float).copy(), z_end=z,
            distance=float(np.linalg.norm(z - np.asarray(z0))),
            endpoint_state=(x, y), null_vector=r, sigma_min=sigma,
            surface_class=None, nose_count=None, associated_arc_length=None,
            report=rep))

    raw.sort(key=lambda res: (res.distance, tuple(np.round(res.z_end, 12))))
    unique: list[EuclideanResult] = []
    for res in raw:
        if any(np.linalg.norm(res.z_end - u.z_end) < dedupe_tol for u in unique):
            continue
        unique.append(res)

    if classify and base_point is not None:
        from .pathopt import trace_associated_path

        for res in unique:
            try:
                assoc = trace_associated_path(model, z0, res.z_end,
                                              target_state=res.endpoint_state,
                                              base_point=base_point)
            except PowerFlowError:
                res.surface_class = SurfaceClass.WRONG
                continue
            res.nose_count = assoc.nose_count
            res.associated_arc_length = assoc.arc_length
            if assoc.reached:
                res.surface_class = (SurfaceClass.WRONG if assoc.nose_count > 1
                                     else SurfaceClass.CORRECT)
            else:
                # Unreachable along the driven segment: margin is false.
                res.surface_class = SurfaceClass.WRONG
    return unique
