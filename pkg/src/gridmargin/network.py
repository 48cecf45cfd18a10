"""Physical network data: buses, branches, load split, admittance assembly.

All electrical quantities are stored and computed in per-unit on the case
base power; megawatt/megavar values appear only in the bus records (they are
converted once, on demand). Loads are split into a constant-impedance part,
which is folded into the nodal admittance matrix as a shunt, and a
constant-power part, which stays on the injection side of the balance
equations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class BusKind(str, Enum):
    PQ = "PQ"
    PV = "PV"
    SLACK = "Slack"


class GridDataError(ValueError):
    """Raised when case data violates a structural invariant."""


@dataclass(frozen=True)
class BusSpec:
    id: int
    kind: BusKind
    p_mw: float = 0.0
    q_mvar: float = 0.0
    v_setpoint: float | None = None

    def __post_init__(self):
        if self.kind in (BusKind.PV, BusKind.SLACK):
            if self.v_setpoint is None or self.v_setpoint <= 0.0:
                raise GridDataError(f"bus {self.id}: {self.kind.value} bus needs v_setpoint > 0")
        elif self.v_setpoint is not None:
            raise GridDataError(f"bus {self.id}: PQ bus must not carry a v_setpoint")


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0

    def __post_init__(self):
        if self.x == 0.0:
            raise GridDataError(f"branch {self.from_bus}-{self.to_bus}: zero reactance")
        if self.from_bus == self.to_bus:
            raise GridDataError(f"branch at bus {self.from_bus}: self loop")


@dataclass(frozen=True)
class ZipSplit:
    """Constant-impedance / constant-power decomposition of load demand."""

    z_fraction: float
    p_fraction: float

    def __post_init__(self):
        if not (0.0 <= self.z_fraction <= 1.0 and 0.0 <= self.p_fraction <= 1.0):
            raise GridDataError("ZIP fractions must lie in [0, 1]")
        if abs(self.z_fraction + self.p_fraction - 1.0) > 1e-12:
            raise GridDataError("ZIP fractions must sum to 1 (no constant-current term)")


CONSTANT_POWER = ZipSplit(0.0, 1.0)


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: tuple[BusSpec, ...]
    branches: tuple[BranchSpec, ...]
    zip_split: ZipSplit = CONSTANT_POWER

    def __post_init__(self):
        if self.base_mva <= 0.0:
            raise GridDataError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridDataError("duplicate bus ids")
        slacks = [b for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) != 1:
            raise GridDataError(f"case needs exactly one slack bus, found {len(slacks)}")
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise GridDataError(f"branch {br.from_bus}-{br.to_bus}: unknown endpoint")
        if not self._connected():
            raise GridDataError("bus graph is not connected")

    def _connected(self) -> bool:
        if not self.buses:
            return False
        adj: dict[int, set[int]] = {b.id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.buses[0].id}
        stack = [self.buses[0].id]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.buses)

    # -- index helpers -----------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: int) -> int:
        for i, b in enumerate(self.buses):
            if b.id == bus_id:
                return i
        raise KeyError(f"no bus {bus_id}")

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @property
    def gen_indices(self) -> np.ndarray:
        """Positions of PV and slack buses, in bus order."""
        return np.array([i for i, b in enumerate(self.buses) if b.kind is not BusKind.PQ], dtype=int)

    @property
    def pq_indices(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind is BusKind.PQ], dtype=int)

    def s_inject_pu(self) -> np.ndarray:
        """Complex scheduled injection per bus (generation positive), per-unit."""
        return np.array([(b.p_mw + 1j * b.q_mvar) / self.base_mva for b in self.buses])

    def v_setpoints(self) -> np.ndarray:
        """Voltage setpoints at PV/slack positions, NaN at PQ buses."""
        return np.array([b.v_setpoint if b.v_setpoint is not None else np.nan for b in self.buses])

    def with_zip(self, z_fraction: float, p_fraction: float) -> "GridCase":
        return replace(self, zip_split=ZipSplit(z_fraction, p_fraction))


def build_admittance(case: GridCase, zip_voltage: np.ndarray | None = None,
                     include_zip: bool = True) -> np.ndarray:
    """Assemble the complex nodal admittance matrix (dense, per-unit).

    Branch series admittance 1/(r+jx) enters the diagonal of both endpoints
    and, negated, the off-diagonal entries; half the total line charging jb
    is shunted at each end. When ``include_zip`` is set, the
    constant-impedance fraction of each PQ-bus injection is folded in as a
    shunt conj(S_z)/|V0|^2, with V0 taken from ``zip_voltage`` (default: flat
    1.0 pu).
    """
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / (br.r + 1j * br.x)
        ysh = 0.5j * br.b
        Y[i, i] += ys + ysh
        Y[j, j] += ys + ysh
        Y[i, j] -= ys
        Y[j, i] -= ys
    if include_zip and case.zip_split.z_fraction > 0.0:
        if zip_voltage is None:
            zip_voltage = np.ones(n)
        s_inj = case.s_inject_pu()
        for i, b in enumerate(case.buses):
            if b.kind is BusKind.PQ and s_inj[i] != 0.0:
                s_cons_z = -case.zip_split.z_fraction * s_inj[i]
                Y[i, i] += np.conj(s_cons_z) / zip_voltage[i] ** 2
    return Y
