"""Shortest paths on the manifold by direct collocation.

The continuous problem steers (x(tau), y(tau)) from a given operating point
to a terminal set (the singular surface, a fixed end point, or a custom
terminal manifold) while g(x, y) = 0 holds along the whole path, minimizing
the length of the metric image z(tau). It is transcribed on a uniform tau
grid: states and controls become decision variables per node, derivatives
become trapezoidal (or Hermite-Simpson) defect constraints, the manifold
equation is enforced at every node, and the terminal set contributes end
constraints; for the singular-surface case one extra unit left-null-vector
variable r certifies terminal degeneracy.

The default objective is the energy integral of the metric velocity; its
minimizers traverse the geometrically shortest path at constant speed, and
the reported arc length is always recomputed afterwards by quadrature of
||dz/dtau||, independent of the objective actually optimized. A tiny
control regularizer pins motion in directions the metric does not measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .model import MetricOutputKind, StudyModel
from .nlp import NlpOptions, NlpProblem, SolveReport, SolveStatus, solve
from .powerflow import (
    ContinuationOptions,
    InitialPointOffManifold,
    PowerFlowError,
    continuation_trace,
    newton_solve,
)
from .singularity import (
    SIGMA_SINGULAR,
    SurfaceClass,
    canonical_sign,
    nose_point_count,
    smallest_singular_pair,
)


class Scheme(str, Enum):
    TRAPEZOIDAL = "Trapezoidal"
    HERMITE_SIMPSON = "HermiteSimpson"


class Objective(str, Enum):
    ENERGY = "Energy"
    SMOOTHED_ARC_LENGTH = "SmoothedArcLength"


@dataclass(frozen=True)
class TranscriptionOptions:
    n_nodes: int = 51
    scheme: Scheme = Scheme.TRAPEZOIDAL
    objective: Objective = Objective.ENERGY
    smoothing_eps: float = 1e-6
    regularization_weight: float = 1e-8

    def __post_init__(self):
        if self.n_nodes < 11:
            raise ValueError("need at least 11 collocation nodes")
        if self.smoothing_eps <= 0:
            raise ValueError("smoothing_eps must be positive")


@dataclass
class TerminalCondition:
    kind: str  # "singular_surface" | "end_point" | "custom"
    target_xy: tuple | None = None
    target_z: np.ndarray | None = None
    h: object = None       # h(x, y, u, v) -> residual vector
    h_jac: object = None   # (x, y, u, v) -> (Hx, Hy, Hu, Hv)
    n_rows: int = 0

    @staticmethod
    def singular_surface() -> "TerminalCondition":
        return TerminalCondition(kind="singular_surface")

    @staticmethod
    def end_point(xy=None, z=None) -> "TerminalCondition":
        if (xy is None) == (z is None):
            raise ValueError("end_point needs exactly one of xy or z")
        z = None if z is None else np.asarray(z, float)
        return TerminalCondition(kind="end_point", target_xy=xy, target_z=z)

    @staticmethod
    def custom(h, h_jac, n_rows: int) -> "TerminalCondition":
        return TerminalCondition(kind="custom", h=h, h_jac=h_jac, n_rows=n_rows)


@dataclass
class DiscretizedPath:
    tau_grid: np.ndarray
    x_nodes: np.ndarray   # (N+1, n_x)
    y_nodes: np.ndarray   # (N+1, n_y)
    u_nodes: np.ndarray
    v_nodes: np.ndarray
    r_terminal: np.ndarray | None = None
    arc_length: float | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.tau_grid)

    def nodes(self):
        return [(self.x_nodes[k], self.y_nodes[k]) for k in range(self.n_nodes)]

    def metric_values(self, model: StudyModel) -> np.ndarray:
        return np.array([model.metric_output(x, y) for x, y in self.nodes()])

    def endpoint(self):
        return self.x_nodes[-1], self.y_nodes[-1]


@dataclass
class MarginResult:
    method: str
    arc_length: float | None
    distance: float | None
    endpoint_z: np.ndarray
    endpoint_state: tuple
    sigma_min: float
    null_residual: float | None
    null_norm: float | None
    nose_count: int | None
    surface_class: SurfaceClass | None
    manifold_residual_max: float
    solver: SolveReport | None
    options: dict = field(default_factory=dict)


def arc_length(model: StudyModel, path: DiscretizedPath) -> float:
    """Quadrature of the metric speed using the node controls."""
    speed = np.empty(path.n_nodes)
    for k in range(path.n_nodes):
        M = model.metric_jacobian(path.x_nodes[k], path.y_nodes[k])
        zdot = M @ np.concatenate([path.u_nodes[k], path.v_nodes[k]])
        speed[k] = np.linalg.norm(zdot)
    return float(np.trapezoid(speed, path.tau_grid))


class Transcription:
    """Assembled NLP for one shortest-path instance."""

    def __init__(self, model: StudyModel, initial, terminal: TerminalCondition,
                 options: TranscriptionOptions | None = None):
        self.model = model
        self.options = options or TranscriptionOptions()
        self.terminal = terminal
        x0, y0 = initial
        self.x0 = np.asarray(x0, float)
        self.y0 = np.asarray(y0, float)
        if np.max(np.abs(model.residual_reduced(self.x0, self.y0))) > 1e-8:
            raise InitialPointOffManifold("initial state violates g = 0")

        nx, ny, ng = model.n_x, model.n_y, model.n_g
        N = self.options.n_nodes - 1
        self.N = N
        self.h = 1.0 / N
        self.nb = 2 * (nx + ny)
        self.hs = self.options.scheme is Scheme.HERMITE_SIMPSON
        self.n_mid = (nx + ny) if self.hs else 0
        self.has_r = terminal.kind == "singular_surface"
        self.n = (N + 1) * self.nb + N * self.n_mid + (ny if self.has_r else 0)
        self.off_mid = (N + 1) * self.nb
        self.off_r = self.off_mid + N * self.n_mid

        if terminal.kind == "singular_surface":
            n_term = ny + 1
        elif terminal.kind == "end_point":
            n_term = (nx + ny) if terminal.target_xy is not None else model.n_z
        else:
            n_term = terminal.n_rows
        self.m = (nx + ny) + N * (nx + ny) + (N + 1) * ng + (N * ng if self.hs else 0) + n_term
        self.n_term = n_term

        # Quadrature weights over nodes (and midpoints for Hermite-Simpson).
        h = self.h
        if self.hs:
            wn = np.full(N + 1, 2 * h / 6.0)
            wn[0] = wn[-1] = h / 6.0
            self.w_nodes = wn
            self.w_mids = np.full(N, 4 * h / 6.0)
        else:
            wn = np.full(N + 1, h)
            wn[0] = wn[-1] = h / 2.0
            self.w_nodes = wn
            self.w_mids = np.zeros(0)

        self._build_constant_jacobian_parts()
        self.problem = NlpProblem(
            n=self.n, m=self.m,
            objective=self._objective,
            constraints=self._constraints,
            hess_approx=self._gauss_newton,
            quasi_newton_blocks=self._qn_blocks(),
            name=f"path[{model.case.name},{terminal.kind},N={N}]",
        )

    # -- layout -------------------------------------------------------------

    def slices(self, k: int):
        o = k * self.nb
        nx, ny = self.model.n_x, self.model.n_y
        return (slice(o, o + nx), slice(o + nx, o + nx + ny),
                slice(o + nx + ny, o + 2 * nx + ny),
                slice(o + 2 * nx + ny, o + 2 * nx + 2 * ny))

    def mid_slices(self, k: int):
        nx, ny = self.model.n_x, self.model.n_y
        o = self.off_mid + k * self.n_mid
        return slice(o, o + nx), slice(o + nx, o + nx + ny)

    def pack(self, path: DiscretizedPath) -> np.ndarray:
        w = np.zeros(self.n)
        for k in range(self.N + 1):
            sx, sy, su, sv = self.slices(k)
            w[sx] = path.x_nodes[k]
            w[sy] = path.y_nodes[k]
            w[su] = path.u_nodes[k]
            w[sv] = path.v_nodes[k]
        if self.hs:
            for k in range(self.N):
                smu, smv = self.mid_slices(k)
                w[smu] = 0.5 * (path.u_nodes[k] + path.u_nodes[k + 1])
                w[smv] = 0.5 * (path.v_nodes[k] + path.v_nodes[k + 1])
        if self.has_r:
            if path.r_terminal is not None:
                w[self.off_r:] = path.r_terminal
            else:
                _, r = smallest_singular_pair(
                    self.model.reduced_jac_y(path.x_nodes[-1], path.y_nodes[-1]))
                w[self.off_r:] = r
        return w

    def unpack(self, w: np.ndarray) -> DiscretizedPath:
        N = self.N
        nx, ny = self.model.n_x, self.model.n_y
        X = np.zeros((N + 1, nx))
        Y = np.zeros((N + 1, ny))
        U = np.zeros((N + 1, nx))
        V = np.zeros((N + 1, ny))
        for k in range(N + 1):
            sx, sy, su, sv = self.slices(k)
            X[k], Y[k], U[k], V[k] = w[sx], w[sy], w[su], w[sv]
        r = canonical_sign(w[self.off_r:]) if self.has_r else None
        return DiscretizedPath(tau_grid=np.linspace(0.0, 1.0, N + 1),
                               x_nodes=X, y_nodes=Y, u_nodes=U, v_nodes=V,
                               r_terminal=r)

    # -- constraints ----------------------------------------------------------

    def _build_constant_jacobian_parts(self):
        """COO entries for the linear rows (initial conditions and defects)."""
        nx, ny = self.model.n_x, self.model.n_y
        N, h = self.N, self.h
        rows, cols, vals = [], [], []

        def add_block(r0, cols_idx, coeffs):
            for i, (c, v) in enumerate(zip(cols_idx, coeffs)):
                rows.append(r0 + i)
                cols.append(c)
                vals.append(v)

        row = 0
        sx0, sy0, _, _ = self.slices(0)
        for i in range(nx):
            rows.append(row + i); cols.append(sx0.start + i); vals.append(1.0)
        row += nx
        for i in range(ny):
            rows.append(row + i); cols.append(sy0.start + i); vals.append(1.0)
        row += ny

        for k in range(N):
            sxk, syk, suk, svk = self.slices(k)
            sxk1, syk1, suk1, svk1 = self.slices(k + 1)
            if self.hs:
                smu, smv = self.mid_slices(k)
                pairs_x = [(sxk1, 1.0), (sxk, -1.0), (suk, -h / 6), (suk1, -h / 6)]
                pairs_y = [(syk1, 1.0), (syk, -1.0), (svk, -h / 6), (svk1, -h / 6)]
                mid_x, mid_y = (smu, -4 * h / 6), (smv, -4 * h / 6)
            else:
                pairs_x = [(sxk1, 1.0), (sxk, -1.0), (suk, -h / 2), (suk1, -h / 2)]
                pairs_y = [(syk1, 1.0), (syk, -1.0), (svk, -h / 2), (svk1, -h / 2)]
                mid_x = mid_y = None
            for i in range(nx):
                for s, v in pairs_x:
                    rows.append(row + i); cols.append(s.start + i); vals.append(v)
                if mid_x is not None:
                    rows.append(row + i); cols.append(mid_x[0].start + i); vals.append(mid_x[1])
            row += nx
            for i in range(ny):
                for s, v in pairs_y:
                    rows.append(row + i); cols.append(s.start + i); vals.append(v)
                if mid_y is not None:
                    rows.append(row + i); cols.append(mid_y[0].start + i); vals.append(mid_y[1])
            row += ny

        self._const_rows = np.array(rows, dtype=int)
        self._const_cols = np.array(cols, dtype=int)
        self._const_vals = np.array(vals, dtype=float)
        self._row_g0 = row  # first manifold row

    def _mid_state(self, w, k):
        sxk, syk, suk, svk = self.slices(k)
        sxk1, syk1, suk1, svk1 = self.slices(k + 1)
        h = self.h
        xm = 0.5 * (w[sxk] + w[sxk1]) + (h / 8) * (w[suk] - w[suk1])
        ym = 0.5 * (w[syk] + w[syk1]) + (h / 8) * (w[svk] - w[svk1])
        return xm, ym

    def _constraints(self, w):
        model = self.model
        nx, ny, ng = model.n_x, model.n_y, model.n_g
        N, h = self.N, self.h
        c = np.zeros(self.m)
        rows = [self._const_rows]
        cols = [self._const_cols]
        vals = [self._const_vals]

        # Linear rows: values.
        c[:nx] = w[self.slices(0)[0]] - self.x0
        c[nx:nx + ny] = w[self.slices(0)[1]] - self.y0
        row = nx + ny
        for k in range(N):
            sxk, syk, suk, svk = self.slices(k)
            sxk1, syk1, suk1, svk1 = self.slices(k + 1)
            if self.hs:
                smu, smv = self.mid_slices(k)
                c[row:row + nx] = (w[sxk1] - w[sxk]
                                   - (h / 6) * (w[suk] + 4 * w[smu] + w[suk1]))
                row += nx
                c[row:row + ny] = (w[syk1] - w[syk]
                                   - (h / 6) * (w[svk] + 4 * w[smv] + w[svk1]))
                row += ny
            else:
                c[row:row + nx] = w[sxk1] - w[sxk] - (h / 2) * (w[suk] + w[suk1])
                row += nx
                c[row:row + ny] = w[syk1] - w[syk] - (h / 2) * (w[svk] + w[svk1])
                row += ny

        def add_dense(r0, c0, block):
            br, bc = block.shape
            rr, cc = np.meshgrid(np.arange(r0, r0 + br), np.arange(c0, c0 + bc),
                                 indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.asarray(block, float).ravel())

        # Manifold rows at the nodes.
        for k in range(N + 1):
            sx, sy, _, _ = self.slices(k)
            x, y = w[sx], w[sy]
            c[row:row + ng] = model.residual(x, y)
            add_dense(row, sx.start, model.jac_x(x, y))
            add_dense(row, sy.start, model.jac_y(x, y))
            row += ng

        # Manifold rows at Hermite-Simpson midpoints, chained through the
        # interpolant xm = (x_k + x_{k+1})/2 + h/8 (u_k - u_{k+1}).
        if self.hs:
            for k in range(N):
                xm, ym = self._mid_state(w, k)
                sxk, syk, suk, svk = self.slices(k)
                sxk1, syk1, suk1, svk1 = self.slices(k + 1)
                c[row:row + ng] = model.residual(xm, ym)
                Jx = model.jac_x(xm, ym)
                Jy = model.jac_y(xm, ym)
                add_dense(row, sxk.start, 0.5 * Jx)
                add_dense(row, sxk1.start, 0.5 * Jx)
                add_dense(row, suk.start, (h / 8) * Jx)
                add_dense(row, suk1.start, -(h / 8) * Jx)
                add_dense(row, syk.start, 0.5 * Jy)
                add_dense(row, syk1.start, 0.5 * Jy)
                add_dense(row, svk.start, (h / 8) * Jy)
                add_dense(row, svk1.start, -(h / 8) * Jy)
                row += ng

        # Terminal rows.
        sxN, syN, suN, svN = self.slices(self.N)
        xN, yN = w[sxN], w[syN]
        t = self.terminal
        if t.kind == "singular_surface":
            r = w[self.off_r:]
            Jred = model.reduced_jac_y(xN, yN)
            c[row:row + ny] = Jred.T @ r
            A_x, A_y = model.singularity_constraint_jac(xN, yN, r)
            add_dense(row, sxN.start, A_x)
            add_dense(row, syN.start, A_y)
            add_dense(row, self.off_r, Jred.T)
            row += ny
            c[row] = r @ r - 1.0
            add_dense(row, self.off_r, 2.0 * r[None, :])
            row += 1
        elif t.kind == "end_point":
            if t.target_xy is not None:
                xt, yt = t.target_xy
                c[row:row + nx] = xN - np.asarray(xt, float)
                add_dense(row, sxN.start, np.eye(nx))
                row += nx
                c[row:row + ny] = yN - np.asarray(yt, float)
                add_dense(row, syN.start, np.eye(ny))
                row += ny
            else:
                c[row:row + model.n_z] = model.metric_output(xN, yN) - t.target_z
                M = model.metric_jacobian(xN, yN)
                add_dense(row, sxN.start, M[:, :nx])
                add_dense(row, syN.start, M[:, nx:])
                row += model.n_z
        else:
            uN, vN = w[suN], w[svN]
            c[row:row + t.n_rows] = t.h(xN, yN, uN, vN)
            Hx, Hy, Hu, Hv = t.h_jac(xN, yN, uN, vN)
            add_dense(row, sxN.start, Hx)
            add_dense(row, syN.start, Hy)
            add_dense(row, suN.start, Hu)
            add_dense(row, svN.start, Hv)
            row += t.n_rows

        J = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.m, self.n))
        return c, J

    # -- objective ------------------------------------------------------------

    def _node_cost(self, x, y, u, v, weight, grad, sl):
        """Accumulate one quadrature sample of the running cost."""
        model = self.model
        delta = self.options.regularization_weight
        M = model.metric_jacobian(x, y)
        uv = np.concatenate([u, v])
        zeta = M @ uv
        q = float(zeta @ zeta)
        if self.options.objective is Objective.ENERGY:
            val = q
            scale = 2.0
        else:
            s = np.sqrt(q + self.options.smoothing_eps ** 2)
            val = s
            scale = 1.0 / s
        val += delta * float(uv @ uv)
        sx, sy, su, sv = sl
        C = model.metric_velocity_jac(x, y, u, v)
        nx = model.n_x
        gxy = scale * (C.T @ zeta)
        grad[sx] += weight * gxy[:nx]
        grad[sy] += weight * gxy[nx:]
        guv = scale * (M.T @ zeta) + 2.0 * delta * uv
        grad[su] += weight * guv[:nx]
        grad[sv] += weight * guv[nx:]
        return weight * val

    def _objective(self, w):
        grad = np.zeros(self.n)
        total = 0.0
        for k in range(self.N + 1):
            sx, sy, su, sv = self.slices(k)
            total += self._node_cost(w[sx], w[sy], w[su], w[sv],
                                     self.w_nodes[k], grad, (sx, sy, su, sv))
        if self.hs:
            for k in range(self.N):
                xm, ym = self._mid_state(w, k)
                smu, smv = self.mid_slices(k)
                um, vm = w[smu], w[smv]
                gm = np.zeros(self.n)
                # State-gradient part must be chained into the endpoints.
                gxy = np.zeros(self.model.n_x + self.model.n_y)
                totalm = self._mid_cost(xm, ym, um, vm, self.w_mids[k], gm, smu, smv, gxy)
                total += totalm
                grad += gm
                nx = self.model.n_x
                h = self.h
                sxk, syk, suk, svk = self.slices(k)
                sxk1, syk1, suk1, svk1 = self.slices(k + 1)
                grad[sxk] += 0.5 * gxy[:nx]
                grad[sxk1] += 0.5 * gxy[:nx]
                grad[suk] += (h / 8) * gxy[:nx]
                grad[suk1] += -(h / 8) * gxy[:nx]
                grad[syk] += 0.5 * gxy[nx:]
                grad[syk1] += 0.5 * gxy[nx:]
                grad[svk] += (h / 8) * gxy[nx:]
                grad[svk1] += -(h / 8) * gxy[nx:]
        return float(total), grad

    def _mid_cost(self, x, y, u, v, weight, grad, su, sv, gxy_out):
        model = self.model
        delta = self.options.regularization_weight
        M = model.metric_jacobian(x, y)
        uv = np.concatenate([u, v])
        zeta = M @ uv
        q = float(zeta @ zeta)
        if self.options.objective is Objective.ENERGY:
            val = q
            scale = 2.0
        else:
            s = np.sqrt(q + self.options.smoothing_eps ** 2)
            val = s
            scale = 1.0 / s
        val += delta * float(uv @ uv)
        C = model.metric_velocity_jac(x, y, u, v)
        gxy_out += weight * scale * (C.T @ zeta)
        guv = scale * (M.T @ zeta) + 2.0 * delta * uv
        nx = model.n_x
        grad[su] += weight * guv[:nx]
        grad[sv] += weight * guv[nx:]
        return weight * val

    # -- quasi-Newton structure ------------------------------------------------

    def _qn_blocks(self):
        blocks = []
        for k in range(self.N + 1):
            idx = np.arange(k * self.nb, (k + 1) * self.nb)
            if k == self.N and self.has_r:
                idx = np.concatenate([idx, np.arange(self.off_r, self.n)])
            blocks.append(idx)
        for k in range(self.N if self.hs else 0):
            o = self.off_mid + k * self.n_mid
            blocks.append(np.arange(o, o + self.n_mid))
        return blocks

    def _gauss_newton(self, w, lam):
        """Objective curvature only: 2 w_k J_zeta^T J_zeta per node."""
        model = self.model
        nx, ny = model.n_x, model.n_y
        delta = self.options.regularization_weight
        rows, cols, vals = [], [], []

        def add(idx, B):
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(B.ravel())

        for k in range(self.N + 1):
            sx, sy, su, sv = self.slices(k)
            x, y, u, v = w[sx], w[sy], w[su], w[sv]
            M = model.metric_jacobian(x, y)
            C = model.metric_velocity_jac(x, y, u, v)
            Jz = np.hstack([C, M])
            B = 2.0 * self.w_nodes[k] * (Jz.T @ Jz)
            d = np.zeros(self.nb)
            d[nx + ny:] = 2.0 * delta * self.w_nodes[k]
            B += np.diag(d)
            add(np.arange(sx.start, sx.start + self.nb), B)
        if self.hs:
            for k in range(self.N):
                xm, ym = self._mid_state(w, k)
                smu, smv = self.mid_slices(k)
                M = model.metric_jacobian(xm, ym)
                B = 2.0 * self.w_mids[k] * (M.T @ M)
                B += 2.0 * delta * self.w_mids[k] * np.eye(self.n_mid)
                add(np.arange(smu.start, smu.start + self.n_mid), B)
        H = sp.csr_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n, self.n))
        return H + 1e-10 * sp.identity(self.n)


def transcribe(model: StudyModel, initial, terminal: TerminalCondition,
               options: TranscriptionOptions | None = None) -> Transcription:
    return Transcription(model, initial, terminal, options)


# -- seeding ------------------------------------------------------------------


def path_from_nodes(model: StudyModel, nodes, n_nodes: int) -> DiscretizedPath:
    """Resample a polyline of (x, y) states onto a uniform tau grid.

    Parameterized by cumulative chord length in the full state space;
    controls come from central differences on the resampled grid.
    """
    X = np.array([np.concatenate([x, y]) for x, y in nodes])
    if len(X) == 1:
        X = np.vstack([X, X])
    d = np.linalg.norm(np.diff(X, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(d)])
    if s[-1] == 0.0:
        s = np.arange(len(X), dtype=float)
    s /= s[-1]
    tau = np.linspace(0.0, 1.0, n_nodes)
    nx = model.n_x
    cols = [np.interp(tau, s, X[:, j]) for j in range(X.shape[1])]
    P = np.column_stack(cols)
    xs, ys = P[:, :nx], P[:, nx:]
    us = np.gradient(xs, tau, axis=0)
    vs = np.gradient(ys, tau, axis=0)
    return DiscretizedPath(tau_grid=tau, x_nodes=xs, y_nodes=ys,
                           u_nodes=us, v_nodes=vs)


def default_direction(model: StudyModel) -> np.ndarray:
    """Proportional stress direction in the free coordinates."""
    d = np.asarray(model.x_base, float)[model.free_x]
    n = np.linalg.norm(d)
    if n < 1e-12:
        d = np.ones(len(model.free_x))
        n = np.linalg.norm(d)
    return d / n


def seed_from_continuation(model: StudyModel, initial, n_nodes: int,
                           direction=None,
                           cont_options: ContinuationOptions | None = None) -> DiscretizedPath:
    """Default initializer: trace to the first nose point and resample."""
    x0, y0 = initial
    d = default_direction(model) if direction is None else np.asarray(direction, float)
    opts = cont_options or ContinuationOptions(max_step=0.1)
    trace = continuation_trace(model, x0, y0, d, opts)
    return path_from_nodes(model, trace.nodes, n_nodes)


def correct_path_nodes(model: StudyModel, path: DiscretizedPath,
                       skip_failures: bool = True) -> DiscretizedPath:
    """Newton-correct every node's y back onto the manifold (x held fixed)."""
    Y = path.y_nodes.copy()
    X = path.x_nodes.copy()
    for k in range(path.n_nodes):
        try:
            Y[k] = newton_solve(model, X[k], Y[k], tol=1e-11)
            X[k] = model.complete_x(X[k], Y[k])
        except PowerFlowError:
            if not skip_failures:
                raise
    return DiscretizedPath(tau_grid=path.tau_grid, x_nodes=X, y_nodes=Y,
                           u_nodes=path.u_nodes.copy(), v_nodes=path.v_nodes.copy(),
                           r_terminal=path.r_terminal)


# -- solves -------------------------------------------------------------------


def _postprocess(model: StudyModel, trans: Transcription, rep: SolveReport,
                 method: str, count_noses: bool = True) -> tuple:
    path = trans.unpack(rep.solution)
    path.arc_length = arc_length(model, path)
    g_max = max(np.max(np.abs(model.residual(x, y))) for x, y in path.nodes())
    xN, yN = path.endpoint()
    sigma, _ = smallest_singular_pair(model.reduced_jac_y(xN, yN))
    null_res = null_norm = None
    if path.r_terminal is not None:
        null_res = float(np.max(np.abs(model.reduced_jac_y(xN, yN).T @ path.r_terminal)))
        null_norm = float(np.linalg.norm(path.r_terminal))
    nose = None
    surface = None
    if count_noses and g_max < 1e-6:
        try:
            nose, _ = nose_point_count(model, path.nodes())
            if trans.terminal.kind == "singular_surface" and sigma < SIGMA_SINGULAR:
                surface = SurfaceClass.WRONG if nose > 1 else SurfaceClass.CORRECT
        except Exception:
            nose = None
    result = MarginResult(
        method=method,
        arc_length=path.arc_length,
        distance=None,
        endpoint_z=model.metric_output(xN, yN),
        endpoint_state=(xN, yN),
        sigma_min=float(sigma),
        null_residual=null_res,
        null_norm=null_norm,
        nose_count=nose,
        surface_class=surface,
        manifold_residual_max=float(g_max),
        solver=rep,
        options={"n_nodes": trans.options.n_nodes,
                 "scheme": trans.options.scheme.value,
                 "objective": trans.options.objective.value},
    )
    return path, result


def solve_shortest_path(model: StudyModel, initial=None,
                        terminal: TerminalCondition | None = None,
                        seed: DiscretizedPath | None = None,
                        options: TranscriptionOptions | None = None,
                        nlp_options: NlpOptions | None = None,
                        refine: bool = False,
                        refine_tol: float = 0.005,
                        max_refines: int = 3):
    """Solve for a locally shortest on-manifold path to the terminal set."""
    options = options or TranscriptionOptions()
    if initial is None:
        initial = model.base_point()
    terminal = terminal or TerminalCondition.singular_surface()
    if seed is None:
        seed = seed_from_continuation(model, initial, options.n_nodes)
    seed = correct_path_nodes(model, seed)
    trans = Transcription(model, initial, terminal, options)
    rep = solve(trans.problem, trans.pack(seed), nlp_options)
    path, result = _postprocess(model, trans, rep, "manifold")
    while refine and rep.status is SolveStatus.OPTIMAL and max_refines > 0:
        finer = TranscriptionOptions(
            n_nodes=2 * (options.n_nodes - 1) + 1, scheme=options.scheme,
            objective=options.objective, smoothing_eps=options.smoothing_eps,
            regularization_weight=options.regularization_weight)
        seed2 = path_from_nodes(model, path.nodes(), finer.n_nodes)
        seed2.r_terminal = path.r_terminal
        trans2 = Transcription(model, initial, terminal, finer)
        rep2 = solve(trans2.problem, trans2.pack(seed2), nlp_options)
        if rep2.status is not SolveStatus.OPTIMAL:
            break
        path2, result2 = _postprocess(model, trans2, rep2, "manifold")
        change = abs(path2.arc_length - path.arc_length) / max(path.arc_length, 1e-12)
        options, trans, rep, path, result = finer, trans2, rep2, path2, result2
        max_refines -= 1
        if change < refine_tol:
            break
    return path, result


def geodesic_between_points(model: StudyModel, start, end,
                            options: TranscriptionOptions | None = None,
                            nlp_options: NlpOptions | None = None):
    """Shortest on-manifold path between two given manifold points."""
    options = options or TranscriptionOptions()
    x0, y0 = start
    x1, y1 = end
    for (x, y) in (start, end):
        if np.max(np.abs(model.residual_reduced(x, y))) > 1e-8:
            raise InitialPointOffManifold("geodesic endpoints must satisfy g = 0")
    terminal = TerminalCondition.end_point(xy=(np.asarray(x1, float), np.asarray(y1, float)))
    seed = None
    try:
        assoc = trace_associated_path(model, model.metric_output(x0, y0),
                                      model.metric_output(x1, y1),
                                      target_state=end, base_point=start,
                                      n_nodes=options.n_nodes)
        if assoc.reached:
            seed = assoc.path
    except PowerFlowError:
        seed = None
    if seed is None:
        nodes = [((1 - t) * np.asarray(x0) + t * np.asarray(x1),
                  (1 - t) * np.asarray(y0) + t * np.asarray(y1))
                 for t in np.linspace(0, 1, options.n_nodes)]
        seed = path_from_nodes(model, nodes, options.n_nodes)
    seed = correct_path_nodes(model, seed)
    trans = Transcription(model, start, terminal, options)
    rep = solve(trans.problem, trans.pack(seed), nlp_options)
    path, result = _postprocess(model, trans, rep, "geodesic", count_noses=False)
    return path, result


@dataclass
class AssociatedPath:
    path: DiscretizedPath
    arc_length: float
    reached: bool
    fraction_reached: float
    nose_count: int
    nose_locations: list
    z_values: np.ndarray


def trace_associated_path(model: StudyModel, z0, z_target, target_state=None,
                          base_point=None, n_nodes: int = 101,
                          cont_options: ContinuationOptions | None = None) -> AssociatedPath:
    """Drive the free states along the straight segment toward a target.

    The corresponding on-manifold curve is the path the system actually
    follows when asked to track the straight-line change behind a Euclidean
    margin; its nose points expose margins whose endpoint surface cannot be
    reached first. Arc length is measured in the metric image of the dense
    continuation polyline.

    ``target_state`` supplies the endpoint (x, y); it is mandatory when the
    metric outputs are derived quantities (then z alone does not determine
    the states). For pure adjustable-injection metrics, z_target is enough.
    """
    x0, y0 = base_point if base_point is not None else model.base_point()
    if target_state is not None:
        x_t = np.asarray(target_state[0], float)
        y_t = np.asarray(target_state[1], float)
    else:
        x_t = _x_from_metric_target(model, z_target)
        y_t = None
    d_free = x_t[model.free_x] - np.asarray(x0, float)[model.free_x]
    opts = cont_options or ContinuationOptions()
    opts.stop_at_nose = False
    opts.max_steps = max(opts.max_steps, 3000)
    opts.max_step = min(opts.max_step, 0.05)
    opts.target_param = float(np.linalg.norm(d_free))
    if y_t is not None:
        opts.target_y = y_t
        opts.target_y_tol = 1e-2
    if opts.target_param < 1e-12:
        nodes = [(model.complete_x(x0, y0), np.asarray(y0, float))]
        path = path_from_nodes(model, nodes, n_nodes)
        z = path.metric_values(model)
        path.arc_length = 0.0
        return AssociatedPath(path, 0.0, True, 1.0, 0, [], z)

    trace = continuation_trace(model, x0, y0, d_free, opts)
    frac = max(trace.params) / opts.target_param if opts.target_param else 1.0
    nose, locs = nose_point_count(model, trace.nodes)
    z = np.array([model.metric_output(x, y) for x, y in trace.nodes])
    arc = float(np.sum(np.linalg.norm(np.diff(z, axis=0), axis=1)))
    path = path_from_nodes(model, trace.nodes, n_nodes)
    path.arc_length = arc
    return AssociatedPath(path, arc, trace.reached_target,
                          min(frac, 1.0), nose, locs, z)


def _x_from_metric_target(model: StudyModel, z_target) -> np.ndarray:
    z_target = np.asarray(z_target, float)
    x_t = np.asarray(model.x_base, float).copy()
    resolved = np.zeros(model.n_x, dtype=bool)
    for k, out in enumerate(model.metric.outputs):
        if out.kind is MetricOutputKind.SELECT_X:
            x_t[out.index] = z_target[k]
            resolved[out.index] = True
    if not resolved[model.free_x].all():
        raise ValueError("metric does not determine the free states; "
                         "pass target_state explicitly")
    return x_t
