"""Builtin test cases and their study-model factories.

Two modified 9-bus systems (the transmission grid of the IEEE 9-bus case
with each generator replaced by a transit bus plus an internal machine bus)
and the standard IEEE 39-bus New England system. Off-nominal transformer
taps of the 39-bus data are not modelled; tap branches enter at unit ratio.
"""

from __future__ import annotations

import numpy as np

from .model import DynamicClassicalModel, MetricMap, StaticDispatchModel, StudyModel
from .network import BranchSpec, BusSpec, BusKind, GridCase, ZipSplit

_PQ, _PV, _SL = BusKind.PQ, BusKind.PV, BusKind.SLACK


def _bus(bid, kind, p=0.0, q=0.0, v=None):
    return BusSpec(id=bid, kind=kind, p_mw=p, q_mvar=q, v_setpoint=v)


def case9mod1(zip_split: ZipSplit = ZipSplit(0.4, 0.6)) -> GridCase:
    """12-bus system: 9 network buses plus internal machine buses 10-12."""
    buses = (
        _bus(1, _PQ), _bus(2, _PQ), _bus(3, _PQ), _bus(4, _PQ),
        _bus(5, _PQ, -90.0, -30.0), _bus(6, _PQ),
        _bus(7, _PQ, -100.0, -35.0), _bus(8, _PQ),
        _bus(9, _PQ, -125.0, -50.0),
        _bus(10, _SL, v=1.0388),
        _bus(11, _PV, 163.1587, v=1.0264),
        _bus(12, _PV, 85.0429, v=1.0003),
    )
    branches = (
        BranchSpec(1, 4, 1e-5, 0.0576, 0.0),
        BranchSpec(4, 5, 0.0170, 0.0920, 0.1580),
        BranchSpec(5, 6, 0.0390, 0.1700, 0.3580),
        BranchSpec(3, 6, 1e-5, 0.0586, 0.0),
        BranchSpec(6, 7, 0.0119, 0.1008, 0.2090),
        BranchSpec(7, 8, 0.0085, 0.0720, 0.1490),
        BranchSpec(8, 2, 1e-5, 0.0625, 0.0),
        BranchSpec(8, 9, 0.0320, 0.1610, 0.3060),
        BranchSpec(9, 4, 0.0100, 0.0850, 0.1760),
        BranchSpec(10, 1, 6.8670e-4, 0.1391, 0.0),
        BranchSpec(11, 2, 5.9259e-4, 0.0948, 0.0),
        BranchSpec(12, 3, 5.9259e-4, 0.0948, 0.0),
    )
    return GridCase("case9mod1", 100.0, buses, branches, zip_split)


def case9mod2(zip_split: ZipSplit = ZipSplit(0.3, 0.7)) -> GridCase:
    """Variant with heavier reactive load and a stiffer, lossier network."""
    buses = (
        _bus(1, _PQ), _bus(2, _PQ), _bus(3, _PQ), _bus(4, _PQ),
        _bus(5, _PQ, -90.0, -50.0), _bus(6, _PQ),
        _bus(7, _PQ, -100.0, -50.0), _bus(8, _PQ),
        _bus(9, _PQ, -125.0, -50.0),
        _bus(10, _SL, v=1.0331),
        _bus(11, _PV, 150.1369, v=1.0340),
        _bus(12, _PV, 150.1351, v=1.0274),
    )
    branches = (
        BranchSpec(1, 4, 0.0010, 0.0576, 0.0),
        BranchSpec(4, 5, 0.0170, 0.0920, 0.1580),
        BranchSpec(5, 6, 0.0190, 0.0600, 0.3580),
        BranchSpec(3, 6, 0.0010, 0.0586, 0.0),
        BranchSpec(6, 7, 0.0119, 0.0608, 0.2090),
        BranchSpec(7, 8, 0.0085, 0.0620, 0.1490),
        BranchSpec(8, 2, 0.0010, 0.0625, 0.0),
        BranchSpec(8, 9, 0.0120, 0.0610, 0.3060),
        BranchSpec(9, 4, 0.0100, 0.0850, 0.1760),
        BranchSpec(10, 1, 6.8670e-4, 0.1391, 0.0),
        BranchSpec(11, 2, 5.9259e-4, 0.0948, 0.0),
        BranchSpec(12, 3, 5.9259e-4, 0.0948, 0.0),
    )
    return GridCase("case9mod2", 100.0, buses, branches, zip_split)


# IEEE 39-bus data: (id, Pd MW, Qd MVar), generators as {id: (Pg MW, Vg)}.
_C39_LOADS = {
    1: (97.6, 44.2), 3: (322.0, 2.4), 4: (500.0, 184.0), 7: (233.8, 84.0),
    8: (522.0, 176.6), 9: (6.5, -66.6), 12: (8.53, 88.0), 15: (320.0, 153.0),
    16: (329.0, 32.3), 18: (158.0, 30.0), 20: (680.0, 103.0), 21: (274.0, 115.0),
    23: (247.5, 84.6), 24: (308.6, -92.2), 25: (224.0, 47.2), 26: (139.0, 17.0),
    27: (281.0, 75.5), 28: (206.0, 27.6), 29: (283.5, 26.9), 31: (9.2, 4.6),
    39: (1104.0, 250.0),
}
_C39_GENS = {
    30: (250.0, 1.0499), 31: (None, 0.9820), 32: (650.0, 0.9841),
    33: (632.0, 0.9972), 34: (508.0, 1.0123), 35: (650.0, 1.0494),
    36: (560.0, 1.0636), 37: (540.0, 1.0275), 38: (830.0, 1.0265),
    39: (1000.0, 1.0300),
}
_C39_BRANCHES = [
    (1, 2, 0.0035, 0.0411, 0.6987), (1, 39, 0.0010, 0.0250, 0.7500),
    (2, 3, 0.0013, 0.0151, 0.2572), (2, 25, 0.0070, 0.0086, 0.1460),
    (2, 30, 0.0000, 0.0181, 0.0000), (3, 4, 0.0013, 0.0213, 0.2214),
    (3, 18, 0.0011, 0.0133, 0.2138), (4, 5, 0.0008, 0.0128, 0.1342),
    (4, 14, 0.0008, 0.0129, 0.1382), (5, 6, 0.0002, 0.0026, 0.0434),
    (5, 8, 0.0008, 0.0112, 0.1476), (6, 7, 0.0006, 0.0092, 0.1130),
    (6, 11, 0.0007, 0.0082, 0.1389), (6, 31, 0.0000, 0.0250, 0.0000),
    (7, 8, 0.0004, 0.0046, 0.0780), (8, 9, 0.0023, 0.0363, 0.3804),
    (9, 39, 0.0010, 0.0250, 1.2000), (10, 11, 0.0004, 0.0043, 0.0729),
    (10, 13, 0.0004, 0.0043, 0.0729), (10, 32, 0.0000, 0.0200, 0.0000),
    (12, 11, 0.0016, 0.0435, 0.0000), (12, 13, 0.0016, 0.0435, 0.0000),
    (13, 14, 0.0009, 0.0101, 0.1723), (14, 15, 0.0018, 0.0217, 0.3660),
    (15, 16, 0.0009, 0.0094, 0.1710), (16, 17, 0.0007, 0.0089, 0.1342),
    (16, 19, 0.0016, 0.0195, 0.3040), (16, 21, 0.0008, 0.0135, 0.2548),
    (16, 24, 0.0003, 0.0059, 0.0680), (17, 18, 0.0007, 0.0082, 0.1319),
    (17, 27, 0.0013, 0.0173, 0.3216), (19, 20, 0.0007, 0.0138, 0.0000),
    (19, 33, 0.0007, 0.0142, 0.0000), (20, 34, 0.0009, 0.0180, 0.0000),
    (21, 22, 0.0008, 0.0140, 0.2565), (22, 23, 0.0006, 0.0096, 0.1846),
    (22, 35, 0.0000, 0.0143, 0.0000), (23, 24, 0.0022, 0.0350, 0.3610),
    (23, 36, 0.0005, 0.0272, 0.0000), (25, 26, 0.0032, 0.0323, 0.5310),
    (25, 37, 0.0006, 0.0232, 0.0000), (26, 27, 0.0014, 0.0147, 0.2396),
    (26, 28, 0.0043, 0.0474, 0.7802), (26, 29, 0.0057, 0.0625, 1.0290),
    (28, 29, 0.0014, 0.0151, 0.2490), (29, 38, 0.0008, 0.0156, 0.0000),
]
_C39_SLACK = 31


def case39(zip_split: ZipSplit = ZipSplit(0.4, 0.6)) -> GridCase:
    buses = []
    for bid in range(1, 40):
        pd, qd = _C39_LOADS.get(bid, (0.0, 0.0))
        if bid in _C39_GENS:
            pg, vg = _C39_GENS[bid]
            kind = _SL if bid == _C39_SLACK else _PV
            p = 0.0 if pg is None else pg - pd
            buses.append(_bus(bid, kind, p, -qd, vg))
        else:
            buses.append(_bus(bid, _PQ, -pd, -qd))
    branches = tuple(BranchSpec(*row) for row in _C39_BRANCHES)
    return GridCase("case39", 100.0, tuple(buses), branches, zip_split)


_C39_ADJ_GENS = (30, 31, 33, 34, 37, 39)
_C39_ADJ_LOADS = (3, 4, 7, 8, 20, 26)


def study_case9mod1_dynamic() -> DynamicClassicalModel:
    return DynamicClassicalModel(case9mod1(), metric="gen_active")


def study_case9mod1_static() -> StaticDispatchModel:
    case = case9mod1(zip_split=ZipSplit(0.0, 1.0))
    return StaticDispatchModel(case, [("P", 10), ("P", 11), ("P", 12)], metric="adjustable")


def study_case9mod2() -> StaticDispatchModel:
    return StaticDispatchModel(case9mod2(), [("P", 10), ("P", 11), ("P", 12)],
                               metric="gen_reactive")


def study_case39(zip_conversion: str = "solved") -> StaticDispatchModel:
    """18 adjustable injections: P at six machines, P and Q at six loads.

    ``zip_conversion`` picks the voltage at which the constant-impedance load
    fraction becomes admittance: "solved" (default) uses the constant-power
    base-case voltages, "flat" uses 1.0 pu.
    """
    case = case39()
    adjustable = [("P", b) for b in _C39_ADJ_GENS]
    for b in _C39_ADJ_LOADS:
        adjustable += [("P", b), ("Q", b)]
    if zip_conversion == "solved":
        from .powerflow import newton_solve
        plain = StaticDispatchModel(case39(zip_split=ZipSplit(0.0, 1.0)),
                                    [("P", _C39_SLACK)])
        y = newton_solve(plain, plain.x_base, plain.flat_start())
        vm = np.abs(plain.voltages(plain.x_base, y))
    elif zip_conversion == "flat":
        vm = None
    else:
        raise ValueError("zip_conversion must be 'solved' or 'flat'")
    return StaticDispatchModel(case, adjustable, metric="adjustable", zip_voltage=vm)


BUILTIN_STUDIES = {
    "case9mod1-dynamic": study_case9mod1_dynamic,
    "case9mod1-static": study_case9mod1_static,
    "case9mod2": study_case9mod2,
    "case39": study_case39,
}


def builtin_study(name: str) -> StudyModel:
    try:
        return BUILTIN_STUDIES[name]()
    except KeyError:
        raise KeyError(f"unknown builtin study {name!r}; "
                       f"available: {sorted(BUILTIN_STUDIES)}") from None
