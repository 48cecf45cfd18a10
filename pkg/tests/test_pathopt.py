import numpy as np
import pytest

from gridmargin import (
    MetricMap,
    SolveStatus,
    StaticDispatchModel,
    TerminalCondition,
    Transcription,
    TranscriptionOptions,
    arc_length,
    check_derivatives,
    correct_path_nodes,
    geodesic_between_points,
    newton_solve,
    path_from_nodes,
    seed_from_continuation,
    solve_shortest_path,
    trace_associated_path,
)
from gridmargin.pathopt import Objective, Scheme
from conftest import solved_base, two_bus_case


def _two_bus_metric_pq():
    case = two_bus_case(x=0.5, p_load=-0.3, q_load=-0.1)
    return StaticDispatchModel(case, [("P", 1), ("P", 2), ("Q", 2)],
                               metric=MetricMap.select_x([1, 2]))


def test_transcription_dimensions(m9_static, m9_static_base):
    trans = Transcription(m9_static, m9_static_base,
                          TerminalCondition.singular_surface(),
                          TranscriptionOptions(n_nodes=51))
    assert trans.problem.n == (3 + 23 + 3 + 23) * 51 + 23
    # init + defects + manifold rows + terminal null/norm rows
    assert trans.problem.m == 26 + 50 * 26 + 51 * 24 + 23 + 1


def test_transcription_rejects_off_manifold_start(m9_static):
    with pytest.raises(Exception, match="manifold|g = 0"):
        Transcription(m9_static, (m9_static.x_base, m9_static.flat_start()),
                      TerminalCondition.singular_surface())


def test_transcription_derivatives_against_fd():
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()
    for scheme in (Scheme.TRAPEZOIDAL, Scheme.HERMITE_SIMPSON):
        for obj in (Objective.ENERGY, Objective.SMOOTHED_ARC_LENGTH):
            opts = TranscriptionOptions(n_nodes=11, scheme=scheme, objective=obj)
            trans = Transcription(model, (x0, y0),
                                  TerminalCondition.singular_surface(), opts)
            rng = np.random.default_rng(3)
            w = 0.1 * rng.standard_normal(trans.problem.n)
            rep = check_derivatives(trans.problem, w, step=1e-6)
            assert rep.max_rel_error < 1e-5, (scheme, obj)


def test_transcription_custom_terminal_derivatives():
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()

    def h(x, y, u, v):
        return np.array([x[1] + 0.45, u[2] - 0.1])

    def h_jac(x, y, u, v):
        Hx = np.zeros((2, 3)); Hx[0, 1] = 1.0
        Hy = np.zeros((2, 3))
        Hu = np.zeros((2, 3)); Hu[1, 2] = 1.0
        Hv = np.zeros((2, 3))
        return Hx, Hy, Hu, Hv

    trans = Transcription(model, (x0, y0), TerminalCondition.custom(h, h_jac, 2),
                          TranscriptionOptions(n_nodes=11))
    rng = np.random.default_rng(4)
    w = 0.1 * rng.standard_normal(trans.problem.n)
    rep = check_derivatives(trans.problem, w, step=1e-6)
    assert rep.max_rel_error < 1e-5


def test_arc_length_straight_segment_exact(two_bus_pq_model):
    model = two_bus_pq_model
    n = 21
    tau = np.linspace(0, 1, n)
    x0, y0 = model.base_point()
    # March the free injections linearly; length in z is the segment length.
    X = np.tile(x0, (n, 1))
    X[:, 1] += 0.2 * tau
    X[:, 2] -= 0.1 * tau
    Y = np.tile(y0, (n, 1))
    U = np.zeros_like(X)
    U[:, 1] = 0.2
    U[:, 2] = -0.1
    V = np.zeros_like(Y)
    from gridmargin import DiscretizedPath

    path = DiscretizedPath(tau, X, Y, U, V)
    # metric covers all three injections, slack immobile in this fabrication
    L = arc_length(model, path)
    assert L == pytest.approx(np.hypot(0.2, 0.1), abs=1e-10)


def test_arc_length_quarter_circle_convergence(two_bus_pq_model):
    model = two_bus_pq_model
    x0, y0 = model.base_point()
    radius = 0.15
    errs = []
    # Cubic reparameterization makes the speed quadratic in tau, so the
    # trapezoid error is genuinely O(1/N^2) rather than exactly zero.
    for n in (11, 21, 41):
        tau = np.linspace(0, 1, n)
        ang = 0.5 * np.pi * tau**3
        dang = 1.5 * np.pi * tau**2
        X = np.tile(x0, (n, 1))
        Y = np.tile(y0, (n, 1))
        U = np.zeros_like(X)
        V = np.zeros_like(Y)
        for k in range(n):
            X[k, 1] = x0[1] + radius * np.cos(ang[k]) - radius
            X[k, 2] = x0[2] + radius * np.sin(ang[k])
            U[k, 1] = -radius * np.sin(ang[k]) * dang[k]
            U[k, 2] = radius * np.cos(ang[k]) * dang[k]
            Y[k] = newton_solve(model, X[k], Y[k])
        from gridmargin import DiscretizedPath

        path = DiscretizedPath(tau, X, Y, U, V)
        L = arc_length(model, path)
        errs.append(abs(L - 0.5 * np.pi * radius))
    assert errs[0] < 5e-3
    # Second-order convergence under grid refinement.
    assert errs[2] < errs[0] / 8


def test_manufactured_straight_path_defects(two_bus_pq_model):
    model = two_bus_pq_model
    x0, y0 = model.base_point()
    n = 21
    nodes = []
    for t in np.linspace(0, 1, n):
        x = x0.copy()
        x[1] += 0.15 * t
        x[2] -= 0.05 * t
        y = newton_solve(model, x, y0)
        nodes.append((model.complete_x(x, y), y))
    seed = path_from_nodes(model, nodes, n)
    trans = Transcription(model, (nodes[0][0], nodes[0][1]),
                          TerminalCondition.end_point(xy=nodes[-1]),
                          TranscriptionOptions(n_nodes=n))
    c, _ = trans.problem.constraints(trans.pack(seed))
    nxny = model.n_x + model.n_y
    defects = c[nxny:nxny + (n - 1) * nxny]
    assert np.max(np.abs(defects)) < 5e-3  # discretization order on a smooth path


def test_zero_length_end_point(two_bus_pq_model):
    model = two_bus_pq_model
    x0, y0 = model.base_point()
    path, result = geodesic_between_points(model, (x0, y0), (x0, y0),
                                           TranscriptionOptions(n_nodes=11))
    assert result.solver.status is SolveStatus.OPTIMAL
    assert result.arc_length == pytest.approx(0.0, abs=1e-6)
    assert np.max(np.abs(path.u_nodes)) < 1e-4
    assert np.max(np.abs(path.v_nodes)) < 1e-4


def test_geodesic_two_bus_straight_line():
    # Both metric coordinates are free parameters: the image is flat, the
    # geodesic is a straight segment of the exact Euclidean length.
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()
    x1 = x0.copy()
    x1[1] += 0.25
    x1[2] -= 0.15
    y1 = newton_solve(model, x1, y0)
    x1 = model.complete_x(x1, y1)
    path, result = geodesic_between_points(model, (x0, y0), (x1, y1),
                                           TranscriptionOptions(n_nodes=21))
    assert result.solver.status is SolveStatus.OPTIMAL
    assert result.arc_length == pytest.approx(np.hypot(0.25, 0.15), abs=1e-6)
    assert result.manifold_residual_max < 1e-6


def test_geodesic_dominates_random_paths():
    model = _two_bus_metric_pq()
    rng = np.random.default_rng(17)
    x0, y0 = model.base_point()
    x1 = x0.copy()
    x1[1] += 0.2
    x1[2] += 0.1
    y1 = newton_solve(model, x1, y0)
    x1 = model.complete_x(x1, y1)
    _, result = geodesic_between_points(model, (x0, y0), (x1, y1),
                                        TranscriptionOptions(n_nodes=21))
    L = result.arc_length
    from gridmargin import MaxIterations

    tried = 0
    for _ in range(100):
        mid_x = 0.5 * (x0 + x1)
        mid_x[1:] += 0.15 * rng.standard_normal(2)
        try:
            mid_y = newton_solve(model, mid_x, y0)
        except MaxIterations:
            continue  # waypoint outside the solvable region
        tried += 1
        mid_x = model.complete_x(mid_x, mid_y)
        z0 = model.metric_output(x0, y0)
        zm = model.metric_output(mid_x, mid_y)
        z1 = model.metric_output(x1, y1)
        detour = np.linalg.norm(zm - z0) + np.linalg.norm(z1 - zm)
        assert L <= detour + 1e-9
    assert tried >= 50


def test_shortest_path_two_bus_matches_plane_oracle():
    # Flat 2-D metric image: the minimum arc to the singular set equals the
    # plane distance to the fold parabola 1 - 4 x (P^2 x - Q) = 0.
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()
    xline = 0.5
    p0, q0 = x0[1], x0[2]

    def parabola_q(p):
        return (4 * p**2 * xline**2 - 1.0) / (4 * xline)

    ps = np.linspace(-3.0, 3.0, 20001)
    dist = np.sqrt((ps - p0) ** 2 + (parabola_q(ps) - q0) ** 2)
    d_ref = dist.min()

    path, result = solve_shortest_path(model, (x0, y0),
                                       options=TranscriptionOptions(n_nodes=31))
    assert result.solver.status is SolveStatus.OPTIMAL
    assert result.sigma_min < 1e-4
    assert result.null_residual < 1e-6
    assert result.null_norm == pytest.approx(1.0, abs=1e-8)
    assert result.manifold_residual_max < 1e-6
    assert result.arc_length == pytest.approx(d_ref, rel=2e-3)


def test_associated_path_flat_equals_euclidean():
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()
    x1 = x0.copy()
    x1[1] += 0.2
    x1[2] -= 0.1
    y1 = newton_solve(model, x1, y0)
    x1 = model.complete_x(x1, y1)
    z0 = model.metric_output(x0, y0)
    z1 = model.metric_output(x1, y1)
    assoc = trace_associated_path(model, z0, z1, target_state=(x1, y1),
                                  base_point=(x0, y0))
    assert assoc.reached
    assert assoc.nose_count == 0
    assert assoc.arc_length == pytest.approx(np.linalg.norm(z1 - z0), rel=1e-4)


def test_associated_path_degenerate_target():
    model = _two_bus_metric_pq()
    x0, y0 = model.base_point()
    z0 = model.metric_output(x0, y0)
    assoc = trace_associated_path(model, z0, z0, target_state=(x0, y0),
                                  base_point=(x0, y0))
    assert assoc.reached
    assert assoc.arc_length == 0.0
