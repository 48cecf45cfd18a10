import numpy as np
import pytest

from gridmargin import (
    ContinuationOptions,
    InitialPointOffManifold,
    continuation_trace,
    newton_solve,
    smallest_singular_pair,
    trace_to_csv,
)
from conftest import solved_base


def two_bus_closed_form(p_inj, q_inj, x=1.0):
    """High-voltage root of the lossless two-bus case, slack at 1.0 pu."""
    f = p_inj * x
    disc = 1.0 - 4.0 * (f * f - q_inj * x)
    e = 0.5 * (1.0 + np.sqrt(disc))
    return e, f


def test_newton_two_bus_matches_closed_form(two_bus_model):
    model = two_bus_model
    y = newton_solve(model, model.x_base, model.flat_start())
    e, f = two_bus_closed_form(-0.3, 0.0)
    V = model.voltages(model.x_base, y)
    assert V[1].real == pytest.approx(e, abs=1e-10)
    assert V[1].imag == pytest.approx(f, abs=1e-10)
    assert abs(V[0] - 1.0) < 1e-12


def test_newton_fixed_point_short_circuit(m9_static, m9_static_base):
    x, y = m9_static_base
    calls = {"n": 0}
    orig = m9_static.reduced_jac_y

    def counting(xx, yy):
        calls["n"] += 1
        return orig(xx, yy)

    m9_static.reduced_jac_y = counting
    try:
        y2 = newton_solve(m9_static, x, y)
    finally:
        del m9_static.reduced_jac_y
    # Already converged: no Newton step is taken at all.
    assert calls["n"] == 0
    assert np.array_equal(y2, y)


def test_newton_flat_start_9bus(m9_static):
    y = newton_solve(m9_static, m9_static.x_base, m9_static.flat_start())
    V = m9_static.voltages(m9_static.x_base, y)
    assert np.all(np.abs(V) > 0.9)  # high-voltage solution


def test_continuation_zero_direction(m9_static, m9_static_base):
    x, y = m9_static_base
    trace = continuation_trace(m9_static, x, y, np.zeros(2))
    assert len(trace) == 1


def test_continuation_requires_manifold_start(m9_static):
    x = m9_static.x_base
    with pytest.raises(InitialPointOffManifold):
        continuation_trace(m9_static, x, m9_static.flat_start(), np.ones(2))


def test_continuation_two_bus_nose_oracle(two_bus_model):
    model = two_bus_model
    y0 = newton_solve(model, model.x_base, model.flat_start())
    x0 = model.complete_x(model.x_base, y0)
    # Push the load: injection more negative; analytic fold at P2 = -1/(2x).
    trace = continuation_trace(model, x0, y0, np.array([-1.0]))
    assert trace.nose_events
    x_end, y_end = trace.nodes[-1]
    assert x_end[1] == pytest.approx(-0.5, abs=1e-4)
    sigma, _ = smallest_singular_pair(model.reduced_jac_y(x_end, y_end))
    assert sigma < 1e-4


def test_continuation_nodes_on_manifold(two_bus_model):
    model = two_bus_model
    y0 = newton_solve(model, model.x_base, model.flat_start())
    x0 = model.complete_x(model.x_base, y0)
    trace = continuation_trace(model, x0, y0, np.array([-1.0]))
    for x, y in trace.nodes:
        assert np.max(np.abs(model.residual_reduced(x, y))) < 1e-9


def test_continuation_secant_consistency(two_bus_model):
    model = two_bus_model
    y0 = newton_solve(model, model.x_base, model.flat_start())
    x0 = model.complete_x(model.x_base, y0)
    trace = continuation_trace(model, x0, y0, np.array([-1.0]))
    pts = [np.concatenate([x, y]) for x, y in trace.nodes]
    for k in range(len(pts) - 2):
        if any(abs(k + 1 - e) <= 1 for e in trace.nose_events):
            continue
        d1 = pts[k + 1] - pts[k]
        d2 = pts[k + 2] - pts[k + 1]
        assert d1 @ d2 > 0


def test_continuation_halved_step_consistency(two_bus_model):
    model = two_bus_model
    y0 = newton_solve(model, model.x_base, model.flat_start())
    x0 = model.complete_x(model.x_base, y0)
    coarse = continuation_trace(model, x0, y0, np.array([-1.0]),
                                ContinuationOptions(step0=0.08, max_step=0.08))
    fine = continuation_trace(model, x0, y0, np.array([-1.0]),
                              ContinuationOptions(step0=0.04, max_step=0.04))
    # Same fold, and fine nodes stay near the coarse polyline (O(step^2)).
    assert coarse.nodes[-1][0][1] == pytest.approx(fine.nodes[-1][0][1], abs=1e-6)
    coarse_pts = np.array([np.concatenate([x, y]) for x, y in coarse.nodes])
    for x, y in fine.nodes:
        p = np.concatenate([x, y])
        d = _dist_to_polyline(p, coarse_pts)
        assert d < 10 * 0.08**2


def _dist_to_polyline(p, pts):
    best = np.inf
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
        best = min(best, np.linalg.norm(p - (a + t * ab)))
    return best


def test_case9mod1_static_ray_hits_outer_surface(m9_static, m9_static_base):
    x, y = m9_static_base
    d = x[m9_static.free_x]
    trace = continuation_trace(m9_static, x, y, d / np.linalg.norm(d))
    assert trace.nose_events
    sigma = trace.sigma_min(m9_static)
    assert sigma < 1e-4


def test_case9mod1_static_pushed_past_first_nose(m9_static, m9_static_base):
    x, y = m9_static_base
    d = x[m9_static.free_x]
    opts = ContinuationOptions(stop_at_nose=False, max_noses=3, max_steps=2000)
    trace = continuation_trace(m9_static, x, y, d / np.linalg.norm(d), opts)
    assert len(trace.nose_events) >= 2


def test_trace_csv_layout(two_bus_model):
    model = two_bus_model
    y0 = newton_solve(model, model.x_base, model.flat_start())
    x0 = model.complete_x(model.x_base, y0)
    trace = continuation_trace(model, x0, y0, np.array([-1.0]))
    csv = trace_to_csv(model, trace)
    lines = csv.strip().split("\n")
    assert lines[0] == "step,x0,x1,y0,y1,y2,sigma_min,det_sign"
    assert len(lines) == len(trace) + 1
