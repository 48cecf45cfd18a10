"""Study models: the algebraic equations g(x, y) = 0 and their derivatives.

A study model fixes which physical quantities are slow/adjustable states x,
which are algebraic states y, and which span the metric subspace z used to
measure path length. Two kinds are provided:

* ``StaticDispatchModel`` — x holds adjustable nodal injections (the slack
  generator's active power is always among them, since it balances losses);
  y holds all bus voltages in rectangular coordinates with the slack bus
  imaginary component removed. g stacks active-power balances at every bus,
  squared-voltage-magnitude constraints at generator buses, and
  reactive-power balances at load buses. The square "reduced" Jacobian
  dg/dy drops the slack active-power row.

* ``DynamicClassicalModel`` — classical machines: each generator is a fixed
  EMF magnitude behind its machine branch, x holds the internal rotor angles
  relative to the reference generator, y holds rectangular voltages of the
  non-generator (network) buses. g stacks P and Q balances at the network
  buses; dg/dy is already square.

Voltages are rectangular throughout, so every balance function is a
quadratic form in the rectangular components and all Jacobians and
second-derivative contractions below are exact and cheap.

With V = e + jf and Y = G + jB, writing Ir = G e - B f and Ii = G f + B e:

    P_i = e_i Ir_i + f_i Ii_i
    Q_i = f_i Ir_i - e_i Ii_i
    |V_i|^2 = e_i^2 + f_i^2
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .network import BusKind, GridCase, GridDataError, build_admittance

# Row/quantity type codes.
_P, _Q, _V2 = 0, 1, 2


class MetricOutputKind(str, Enum):
    SELECT_X = "select_x"
    SELECT_Y = "select_y"
    GEN_ACTIVE = "gen_active_power"
    GEN_REACTIVE = "gen_reactive_power"


@dataclass(frozen=True)
class MetricOutput:
    kind: MetricOutputKind
    index: int  # coordinate index for selectors, bus position for derived outputs


@dataclass(frozen=True)
class MetricMap:
    outputs: tuple[MetricOutput, ...]

    def __post_init__(self):
        if not self.outputs:
            raise GridDataError("metric map needs at least one output")

    @property
    def dim(self) -> int:
        return len(self.outputs)

    @staticmethod
    def select_x(indices) -> "MetricMap":
        return MetricMap(tuple(MetricOutput(MetricOutputKind.SELECT_X, i) for i in indices))

    @staticmethod
    def gen_power(bus_positions, reactive: bool = False) -> "MetricMap":
        kind = MetricOutputKind.GEN_REACTIVE if reactive else MetricOutputKind.GEN_ACTIVE
        return MetricMap(tuple(MetricOutput(kind, i) for i in bus_positions))


class _Quadratics:
    """Vectorized P/Q/|V|^2 evaluation over the full rectangular vector W."""

    def __init__(self, Y: np.ndarray):
        self.n = Y.shape[0]
        self.G = np.ascontiguousarray(Y.real)
        self.B = np.ascontiguousarray(Y.imag)

    def currents(self, W):
        n = self.n
        e, f = W[:n], W[n:]
        Ir = self.G @ e - self.B @ f
        Ii = self.G @ f + self.B @ e
        return e, f, Ir, Ii

    def values(self, W):
        e, f, Ir, Ii = self.currents(W)
        P = e * Ir + f * Ii
        Q = f * Ir - e * Ii
        V2 = e * e + f * f
        return P, Q, V2

    def jacobians(self, W):
        """Return dP, dQ, dV2 as (n, 2n) arrays of derivatives w.r.t. W."""
        n = self.n
        e, f, Ir, Ii = self.currents(W)
        dP = np.empty((n, 2 * n))
        dQ = np.empty((n, 2 * n))
        dV2 = np.zeros((n, 2 * n))
        Ge = e[:, None] * self.G
        Gf = f[:, None] * self.G
        Be = e[:, None] * self.B
        Bf = f[:, None] * self.B
        dP[:, :n] = Ge + Bf
        dP[:, n:] = -Be + Gf
        dQ[:, :n] = Gf - Be
        dQ[:, n:] = -Bf - Ge
        idx = np.arange(n)
        dP[idx, idx] += Ir
        dP[idx, n + idx] += Ii
        dQ[idx, idx] -= Ii
        dQ[idx, n + idx] += Ir
        dV2[idx, idx] = 2.0 * e
        dV2[idx, n + idx] = 2.0 * f
        return dP, dQ, dV2

    def hessian_combo(self, p: np.ndarray, q: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Constant Hessian of sum_b p_b P_b + q_b Q_b + s_b |V_b|^2 w.r.t. W."""
        n = self.n
        H = np.zeros((2 * n, 2 * n))
        Gp = p[:, None] * self.G
        Bp = p[:, None] * self.B
        Gq = q[:, None] * self.G
        Bq = q[:, None] * self.B
        Hee = Gp + Gp.T - (Bq + Bq.T)
        Hef = Bp.T - Bp + Gq.T - Gq
        H[:n, :n] = Hee
        H[n:, n:] = Hee
        H[:n, n:] = Hef
        H[n:, :n] = Hef.T
        idx = np.arange(n)
        H[idx, idx] += 2.0 * s
        H[n + idx, n + idx] += 2.0 * s
        return H


class StudyModel:
    """Common interface; concrete layouts in the subclasses below."""

    kind: str
    case: GridCase
    metric: MetricMap

    # Filled by subclasses.
    n_x: int
    n_y: int
    n_g: int
    reduced_rows: np.ndarray  # indices of the square subsystem in y
    free_x: np.ndarray        # x coordinates that are independent parameters

    # -- evaluation hooks provided by subclasses ----------------------------

    def _W(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def _W_jac_x(self, x, y) -> np.ndarray:
        """dW/dx, shape (2n, n_x)."""
        raise NotImplementedError

    def _W_hess_x_diag(self, x, y) -> np.ndarray | None:
        """d2W/dx_j^2 as columns (2n, n_x); None when W is linear in x."""
        return None

    def _rhs(self, x) -> np.ndarray:
        """Injection side of each row (residual = quantity(W) - rhs)."""
        raise NotImplementedError

    def _rhs_jac_x(self) -> np.ndarray:
        """d rhs / dx, constant (n_g, n_x)."""
        raise NotImplementedError

    def complete_x(self, x, y) -> np.ndarray:
        """Fill dependent x entries (slack power) from the network state."""
        return np.asarray(x, dtype=float).copy()

    # -- generic evaluation --------------------------------------------------

    def _check_dims(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != (self.n_x,) or y.shape != (self.n_y,):
            raise ValueError(f"expected x({self.n_x}), y({self.n_y}); "
                             f"got x{x.shape}, y{y.shape}")
        return x, y

    def residual(self, x, y) -> np.ndarray:
        x, y = self._check_dims(x, y)
        P, Q, V2 = self.quads.values(self._W(x, y))
        vals = np.choose(self.row_type, [P[self.row_bus], Q[self.row_bus], V2[self.row_bus]])
        return vals - self._rhs(x)

    def residual_reduced(self, x, y) -> np.ndarray:
        return self.residual(x, y)[self.reduced_rows]

    def _row_jac_W(self, x, y) -> np.ndarray:
        dP, dQ, dV2 = self.quads.jacobians(self._W(x, y))
        JW = np.empty((self.n_g, 2 * self.case.n_bus))
        for t, d in ((_P, dP), (_Q, dQ), (_V2, dV2)):
            m = self.row_type == t
            JW[m] = d[self.row_bus[m]]
        return JW

    def jac_y(self, x, y) -> np.ndarray:
        x, y = self._check_dims(x, y)
        return self._row_jac_W(x, y)[:, self.y_cols]

    def jac_x(self, x, y) -> np.ndarray:
        x, y = self._check_dims(x, y)
        J = -self._rhs_jac_x().copy()
        Wx = self._W_jac_x(x, y)
        if Wx is not None:
            J += self._row_jac_W(x, y) @ Wx
        return J

    def reduced_jac_y(self, x, y) -> np.ndarray:
        return self.jac_y(x, y)[self.reduced_rows]

    def _hess_W(self, rho_full: np.ndarray) -> np.ndarray:
        """Hessian w.r.t. W of sum_m rho_m * quantity_m."""
        n = self.case.n_bus
        p = np.zeros(n)
        q = np.zeros(n)
        s = np.zeros(n)
        for t, acc in ((_P, p), (_Q, q), (_V2, s)):
            m = self.row_type == t
            np.add.at(acc, self.row_bus[m], rho_full[m])
        return self.quads.hessian_combo(p, q, s)

    def singularity_constraint_jac(self, x, y, r):
        """Derivatives of c(x, y, r) = (dg_red/dy)^T r.

        Returns (A_x, A_y) with A_x = dc/dx (n_y, n_x) and A_y = dc/dy
        (n_y, n_y); dc/dr is just reduced_jac_y(x, y)^T.
        """
        x, y = self._check_dims(x, y)
        rho = np.zeros(self.n_g)
        rho[self.reduced_rows] = r
        H = self._hess_W(rho)
        A_y = H[np.ix_(self.y_cols, self.y_cols)]
        Wx = self._W_jac_x(x, y)
        if Wx is None:
            A_x = np.zeros((self.n_y, self.n_x))
        else:
            A_x = H[self.y_cols] @ Wx
        return A_x, A_y

    # -- metric --------------------------------------------------------------

    @property
    def n_z(self) -> int:
        return self.metric.dim

    def metric_output(self, x, y) -> np.ndarray:
        x, y = self._check_dims(x, y)
        z = np.empty(self.n_z)
        P = Q = None
        for k, out in enumerate(self.metric.outputs):
            if out.kind is MetricOutputKind.SELECT_X:
                z[k] = x[out.index]
            elif out.kind is MetricOutputKind.SELECT_Y:
                z[k] = y[out.index]
            else:
                if P is None:
                    P, Q, _ = self.quads.values(self._W(x, y))
                z[k] = P[out.index] if out.kind is MetricOutputKind.GEN_ACTIVE else Q[out.index]
        return z

    def metric_jacobian(self, x, y) -> np.ndarray:
        """d z / d(x, y), shape (n_z, n_x + n_y)."""
        x, y = self._check_dims(x, y)
        M = np.zeros((self.n_z, self.n_x + self.n_y))
        dP = dQ = None
        Wx = None
        for k, out in enumerate(self.metric.outputs):
            if out.kind is MetricOutputKind.SELECT_X:
                M[k, out.index] = 1.0
            elif out.kind is MetricOutputKind.SELECT_Y:
                M[k, self.n_x + out.index] = 1.0
            else:
                if dP is None:
                    dP, dQ, _ = self.quads.jacobians(self._W(x, y))
                    Wx = self._W_jac_x(x, y)
                row = dP[out.index] if out.kind is MetricOutputKind.GEN_ACTIVE else dQ[out.index]
                if Wx is not None:
                    M[k, :self.n_x] = row @ Wx
                M[k, self.n_x:] = row[self.y_cols]
        return M

    def metric_velocity_jac(self, x, y, u, v) -> np.ndarray:
        """d/d(x,y) of [metric_jacobian(x,y) @ (u,v)], shape (n_z, n_x + n_y).

        Zero for pure selector metrics; for derived outputs this is the
        curvature of the output map contracted with the velocity.
        """
        x, y = self._check_dims(x, y)
        out = np.zeros((self.n_z, self.n_x + self.n_y))
        derived = [(k, o) for k, o in enumerate(self.metric.outputs)
                   if o.kind in (MetricOutputKind.GEN_ACTIVE, MetricOutputKind.GEN_REACTIVE)]
        if not derived:
            return out
        w = np.concatenate([u, v])
        Wx = self._W_jac_x(x, y)
        Wxx = self._W_hess_x_diag(x, y)
        n2 = 2 * self.case.n_bus
        # D = dW/d(x,y): columns are x then y.
        D = np.zeros((n2, self.n_x + self.n_y))
        if Wx is not None:
            D[:, :self.n_x] = Wx
        D[self.y_cols, self.n_x + np.arange(self.n_y)] = 1.0
        Dw = D @ w
        dP = dQ = None
        for k, o in derived:
            rho = np.zeros(self.case.n_bus)
            rho[o.index] = 1.0
            if o.kind is MetricOutputKind.GEN_ACTIVE:
                H = self.quads.hessian_combo(rho, np.zeros_like(rho), np.zeros_like(rho))
            else:
                H = self.quads.hessian_combo(np.zeros_like(rho), rho, np.zeros_like(rho))
            out[k] = (H @ Dw) @ D
            if Wxx is not None:
                if dP is None:
                    dP, dQ, _ = self.quads.jacobians(self._W(x, y))
                row = dP[o.index] if o.kind is MetricOutputKind.GEN_ACTIVE else dQ[o.index]
                out[k, :self.n_x] += (row @ Wxx) * w[:self.n_x]
        return out

    # -- diagnostics ----------------------------------------------------------

    def active_power_loss(self, x, y):
        """Total series I^2 r loss and its fraction of total generation.

        Evaluated on the branch-only admittance (shunt-folded load
        conductances are consumption, not loss), so a zero-resistance network
        reports exactly zero at any state.
        """
        x, y = self._check_dims(x, y)
        W = self._W(x, y)
        P, _, _ = self.quads_branch.values(W)
        p_loss = float(np.sum(P))
        Pg = float(np.sum(P[self.case.gen_indices][P[self.case.gen_indices] > 0]))
        frac = p_loss / Pg if Pg > 0 else np.nan
        return p_loss, frac

    def on_manifold(self, x, y, tol=1e-8) -> bool:
        return bool(np.max(np.abs(self.residual_reduced(x, y))) < tol)

    def voltages(self, x, y) -> np.ndarray:
        """Complex voltage at every bus for the given state."""
        x, y = self._check_dims(x, y)
        W = self._W(x, y)
        n = self.case.n_bus
        return W[:n] + 1j * W[n:]

    def base_point(self):
        """Solved operating point (x0, y0); computed once and cached."""
        cached = getattr(self, "_base_point", None)
        if cached is None:
            cached = self._solve_base_point()
            self._base_point = cached
        return cached

    def _solve_base_point(self):
        raise NotImplementedError


def _metric_from_spec(spec, n_x: int, case: GridCase) -> MetricMap:
    """Accept a MetricMap or a shorthand string."""
    if isinstance(spec, MetricMap):
        return spec
    if spec in (None, "adjustable"):
        return MetricMap.select_x(range(n_x))
    if spec in ("gen_active", "gen_reactive"):
        return MetricMap.gen_power(case.gen_indices, reactive=(spec == "gen_reactive"))
    raise GridDataError(f"unknown metric spec {spec!r}")


class StaticDispatchModel(StudyModel):
    """Slow redispatch model: x = adjustable injections, y = all voltages.

    ``adjustable`` lists ("P"|"Q", bus_id) pairs in x order. The slack bus
    active power is appended automatically if missing, because it is the one
    injection the network determines.
    """

    kind = "static_dispatch"

    def __init__(self, case: GridCase, adjustable, metric=None,
                 zip_voltage: np.ndarray | None = None):
        self.case = case
        n = case.n_bus
        adjustable = [(str(q).upper(), int(b)) for q, b in adjustable]
        slack_id = case.buses[case.slack_index].id
        if ("P", slack_id) not in adjustable:
            adjustable = [("P", slack_id)] + adjustable
        for q, b in adjustable:
            kind = case.buses[case.bus_index(b)].kind
            if q == "Q" and kind is not BusKind.PQ:
                raise GridDataError(f"bus {b}: reactive injection at a voltage-controlled bus "
                                    "cannot be adjustable")
        self.adjustable = tuple(adjustable)
        self.n_x = len(adjustable)
        self.slack_x = adjustable.index(("P", slack_id))
        self.free_x = np.array([i for i in range(self.n_x) if i != self.slack_x], dtype=int)

        self.zip_voltage = np.ones(n) if zip_voltage is None else np.asarray(zip_voltage, float)
        self.Y = build_admittance(case, zip_voltage=self.zip_voltage)
        self.quads = _Quadratics(self.Y)
        self.quads_branch = _Quadratics(build_admittance(case, include_zip=False))

        # y layout: [e_0..e_{n-1}, f_i for i != slack]
        sl = case.slack_index
        f_keep = [i for i in range(n) if i != sl]
        self.y_cols = np.concatenate([np.arange(n), n + np.array(f_keep)])
        self.n_y = 2 * n - 1

        # Rows: P at every bus, |V|^2 at gens, Q at PQ buses.
        row_type = [_P] * n
        row_bus = list(range(n))
        for gi in case.gen_indices:
            row_type.append(_V2)
            row_bus.append(int(gi))
        for li in case.pq_indices:
            row_type.append(_Q)
            row_bus.append(int(li))
        self.row_type = np.array(row_type)
        self.row_bus = np.array(row_bus)
        self.n_g = len(row_type)
        self.slack_row = sl  # P row of the slack bus
        self.reduced_rows = np.array([m for m in range(self.n_g) if m != self.slack_row])

        # Injection constants and x selection.
        s_inj = case.s_inject_pu()
        pf = case.zip_split.p_fraction
        adj_map = {qb: k for k, qb in enumerate(adjustable)}
        rhs0 = np.zeros(self.n_g)
        Sx = np.zeros((self.n_g, self.n_x))
        vset = case.v_setpoints()
        for m in range(self.n_g):
            b = self.row_bus[m]
            bid = case.buses[b].id
            is_pq = case.buses[b].kind is BusKind.PQ
            if self.row_type[m] == _P:
                key = ("P", bid)
                if key in adj_map:
                    Sx[m, adj_map[key]] = 1.0
                else:
                    rhs0[m] = (pf if is_pq else 1.0) * s_inj[b].real
            elif self.row_type[m] == _Q:
                key = ("Q", bid)
                if key in adj_map:
                    Sx[m, adj_map[key]] = 1.0
                else:
                    rhs0[m] = pf * s_inj[b].imag
            else:
                rhs0[m] = vset[b] ** 2
        self._rhs0 = rhs0
        self._Sx = Sx
        self.metric = _metric_from_spec(metric, self.n_x, case)
        self.x_base = self._base_x_guess()

    def _base_x_guess(self) -> np.ndarray:
        s_inj = self.case.s_inject_pu()
        pf = self.case.zip_split.p_fraction
        x = np.zeros(self.n_x)
        for k, (q, bid) in enumerate(self.adjustable):
            b = self.case.bus_index(bid)
            is_pq = self.case.buses[b].kind is BusKind.PQ
            scale = pf if is_pq else 1.0
            x[k] = scale * (s_inj[b].real if q == "P" else s_inj[b].imag)
        return x

    def _W(self, x, y):
        n = self.case.n_bus
        W = np.zeros(2 * n)
        W[self.y_cols] = y
        return W

    def _W_jac_x(self, x, y):
        return None

    def _rhs(self, x):
        return self._rhs0 + self._Sx @ x

    def _rhs_jac_x(self):
        return self._Sx

    def complete_x(self, x, y):
        x = np.asarray(x, dtype=float).copy()
        P, _, _ = self.quads.values(self._W(x, y))
        x[self.slack_x] = P[self.case.slack_index]
        return x

    def flat_start(self) -> np.ndarray:
        n = self.case.n_bus
        e = np.ones(n)
        vset = self.case.v_setpoints()
        for gi in self.case.gen_indices:
            e[gi] = vset[gi]
        W = np.concatenate([e, np.zeros(n)])
        return W[self.y_cols]

    def _solve_base_point(self):
        from .powerflow import newton_solve

        y = newton_solve(self, self.x_base, self.flat_start())
        return self.complete_x(self.x_base, y), y


class DynamicClassicalModel(StudyModel):
    """Classical-machine model: x = rotor angles relative to the reference.

    Generator buses become internal EMF nodes with fixed magnitude (the
    voltage setpoint) and angle given by x; the reference generator (at the
    slack bus) stays at angle zero. y holds rectangular voltages of the
    remaining network buses, and g stacks their P and Q balances.
    """

    kind = "dynamic_classical"

    def __init__(self, case: GridCase, metric="gen_active",
                 zip_voltage: np.ndarray | None = None):
        self.case = case
        n = case.n_bus
        self.gen_pos = case.gen_indices          # internal EMF buses
        self.net_pos = case.pq_indices           # network buses carried in y
        self.ref_pos = case.slack_index
        self.other_gens = np.array([g for g in self.gen_pos if g != self.ref_pos], dtype=int)
        gen_list = list(self.gen_pos)
        self._other_in_gen = np.array([gen_list.index(g) for g in self.other_gens], dtype=int)
        self.n_x = len(self.other_gens)
        self.free_x = np.arange(self.n_x)
        self.emf = case.v_setpoints()[self.gen_pos]
        self._emf_by_pos = {int(g): float(case.v_setpoints()[g]) for g in self.gen_pos}

        self.zip_voltage = np.ones(n) if zip_voltage is None else np.asarray(zip_voltage, float)
        self.Y = build_admittance(case, zip_voltage=self.zip_voltage)
        self.quads = _Quadratics(self.Y)
        self.quads_branch = _Quadratics(build_admittance(case, include_zip=False))

        self.y_cols = np.concatenate([self.net_pos, n + self.net_pos])
        self.n_y = 2 * len(self.net_pos)

        row_type = [_P] * len(self.net_pos) + [_Q] * len(self.net_pos)
        row_bus = list(self.net_pos) + list(self.net_pos)
        self.row_type = np.array(row_type)
        self.row_bus = np.array(row_bus)
        self.n_g = len(row_type)
        self.reduced_rows = np.arange(self.n_g)

        s_inj = case.s_inject_pu()
        pf = case.zip_split.p_fraction
        rhs0 = np.zeros(self.n_g)
        for m in range(self.n_g):
            b = self.row_bus[m]
            rhs0[m] = pf * (s_inj[b].real if self.row_type[m] == _P else s_inj[b].imag)
        self._rhs0 = rhs0
        self._Sx0 = np.zeros((self.n_g, self.n_x))
        self.metric = _metric_from_spec(metric, self.n_x, case)
        self.x_base = np.zeros(self.n_x)

    def angles(self, x) -> np.ndarray:
        """Absolute internal angles per generator position (reference at 0)."""
        th = np.zeros(len(self.gen_pos))
        th[self._other_in_gen] = x
        return th

    def _W(self, x, y):
        n = self.case.n_bus
        W = np.zeros(2 * n)
        W[self.y_cols] = y
        th = self.angles(x)
        W[self.gen_pos] = self.emf * np.cos(th)
        W[n + self.gen_pos] = self.emf * np.sin(th)
        return W

    def _W_jac_x(self, x, y):
        n = self.case.n_bus
        W = self._W(x, y)
        Wx = np.zeros((2 * n, self.n_x))
        for j, g in enumerate(self.other_gens):
            Wx[g, j] = -W[n + g]
            Wx[n + g, j] = W[g]
        return Wx

    def _W_hess_x_diag(self, x, y):
        n = self.case.n_bus
        W = self._W(x, y)
        Wxx = np.zeros((2 * n, self.n_x))
        for j, g in enumerate(self.other_gens):
            Wxx[g, j] = -W[g]
            Wxx[n + g, j] = -W[n + g]
        return Wxx

    def _rhs(self, x):
        return self._rhs0

    def _rhs_jac_x(self):
        return self._Sx0

    def flat_start(self) -> np.ndarray:
        W = np.concatenate([np.ones(self.case.n_bus), np.zeros(self.case.n_bus)])
        return W[self.y_cols]

    def _solve_base_point(self):
        """Equilibrium from a conventional power flow, rotated so the
        reference machine's internal angle is zero."""
        from .powerflow import newton_solve

        slack_id = self.case.buses[self.ref_pos].id
        plain = StaticDispatchModel(self.case, [("P", slack_id)],
                                    zip_voltage=self.zip_voltage)
        y_pf = newton_solve(plain, plain.x_base, plain.flat_start())
        V = plain.voltages(plain.complete_x(plain.x_base, y_pf), y_pf)
        V = V * np.exp(-1j * np.angle(V[self.ref_pos]))
        x0 = np.angle(V[self.other_gens])
        y0 = np.concatenate([V[self.net_pos].real, V[self.net_pos].imag])
        return x0, y0
