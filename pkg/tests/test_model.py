import numpy as np
import pytest

from gridmargin import (
    MetricMap,
    StaticDispatchModel,
    build_admittance,
    case9mod1,
    newton_solve,
    study_case39,
)
from conftest import fd_jacobian, rel_err, solved_base


def random_state(model, rng, spread=0.3):
    x = model.x_base + spread * rng.standard_normal(model.n_x)
    y = model.flat_start() + spread * rng.standard_normal(model.n_y)
    return x, y


ALL_MODELS = ["m9_static", "m9_dynamic", "m9mod2", "two_bus_pq_model"]


@pytest.fixture
def model(request):
    return request.getfixturevalue(request.param)


@pytest.mark.parametrize("model", ALL_MODELS, indirect=True)
def test_jacobians_match_fd(model):
    rng = np.random.default_rng(7)
    for _ in range(10):
        x, y = random_state(model, rng)
        Jy = model.jac_y(x, y)
        Jx = model.jac_x(x, y)
        assert rel_err(Jy, fd_jacobian(lambda yy: model.residual(x, yy), y)) < 1e-6
        assert rel_err(Jx, fd_jacobian(lambda xx: model.residual(xx, y), x)) < 1e-6


@pytest.mark.parametrize("model", ALL_MODELS, indirect=True)
def test_metric_jacobian_matches_fd(model):
    rng = np.random.default_rng(8)
    x, y = random_state(model, rng)
    M = model.metric_jacobian(x, y)
    fd = fd_jacobian(lambda w: model.metric_output(w[:model.n_x], w[model.n_x:]),
                     np.concatenate([x, y]))
    assert rel_err(M, fd) < 1e-6


@pytest.mark.parametrize("model", ALL_MODELS, indirect=True)
def test_singularity_constraint_jac_matches_fd(model):
    rng = np.random.default_rng(9)
    x, y = random_state(model, rng)
    r = rng.standard_normal(model.n_y)
    r /= np.linalg.norm(r)

    def c_of(w):
        return model.reduced_jac_y(w[:model.n_x], w[model.n_x:]).T @ r

    A_x, A_y = model.singularity_constraint_jac(x, y, r)
    fd = fd_jacobian(c_of, np.concatenate([x, y]))
    assert rel_err(np.hstack([A_x, A_y]), fd) < 1e-6


@pytest.mark.parametrize("model", ALL_MODELS, indirect=True)
def test_metric_velocity_jac_matches_fd(model):
    rng = np.random.default_rng(10)
    x, y = random_state(model, rng)
    u = rng.standard_normal(model.n_x)
    v = rng.standard_normal(model.n_y)
    w_uv = np.concatenate([u, v])

    def vel(w):
        return model.metric_jacobian(w[:model.n_x], w[model.n_x:]) @ w_uv

    C = model.metric_velocity_jac(x, y, u, v)
    fd = fd_jacobian(vel, np.concatenate([x, y]))
    assert rel_err(C, fd) < 1e-6


def test_residual_complex_arithmetic_oracle(m9_static):
    # Any (x, y): the stacked mismatches must agree with S = V (Y V)* done
    # directly in complex arithmetic.
    model = m9_static
    rng = np.random.default_rng(11)
    x, y = random_state(model, rng)
    g = model.residual(x, y)
    V = model.voltages(x, y)
    S = V * np.conj(model.Y @ V)
    case = model.case
    inj = np.zeros(case.n_bus, dtype=complex)
    for k, (q, bid) in enumerate(model.adjustable):
        b = case.bus_index(bid)
        inj[b] += x[k] if q == "P" else 1j * x[k]
    s_table = case.s_inject_pu()
    for i, bus in enumerate(case.buses):
        adj_p = ("P", bus.id) in model.adjustable
        adj_q = ("Q", bus.id) in model.adjustable
        scale = case.zip_split.p_fraction if bus.kind.value == "PQ" else 1.0
        if not adj_p:
            inj[i] += scale * s_table[i].real
        if not adj_q and bus.kind.value == "PQ":
            inj[i] += 1j * case.zip_split.p_fraction * s_table[i].imag
    # P rows at every bus.
    for i in range(case.n_bus):
        assert g[i] == pytest.approx(S[i].real - inj[i].real, abs=1e-12)
    # V2 rows then Q rows.
    m = case.n_bus
    for gi in case.gen_indices:
        vset = case.buses[gi].v_setpoint
        assert g[m] == pytest.approx(abs(V[gi]) ** 2 - vset**2, abs=1e-12)
        m += 1
    for li in case.pq_indices:
        assert g[m] == pytest.approx(S[li].imag - inj[li].imag, abs=1e-12)
        m += 1


def test_equilibrium_residual_small(m9_static, m9_static_base):
    x, y = m9_static_base
    assert np.max(np.abs(m9_static.residual(x, y))) < 1e-8


def test_case9mod1_static_base_matches_tables(m9_static, m9_static_base):
    x, y = m9_static_base
    # x order: slack P first, then the two dispatched machines.
    assert x[1] == pytest.approx(1.631587, abs=1e-9)
    assert x[2] == pytest.approx(0.850429, abs=1e-9)
    V = m9_static.voltages(x, y)
    assert abs(V[m9_static.case.bus_index(10)]) == pytest.approx(1.0388, abs=1e-9)
    # Sane slack dispatch: covers load minus the other machines plus losses.
    assert 0.5 < x[0] < 1.0


def test_reduced_jacobian_nonsingular_at_equilibrium(m9_static, m9_static_base):
    x, y = m9_static_base
    J = m9_static.reduced_jac_y(x, y)
    assert J.shape == (23, 23)
    assert np.linalg.svd(J, compute_uv=False)[-1] > 1e-3


def test_zip_fold_equivalence(m9mod2):
    # Residual with impedance fractions folded into shunts equals the
    # explicit voltage-squared load evaluation.
    model = m9mod2
    case = model.case
    rng = np.random.default_rng(12)
    x, y = random_state(model, rng)
    g_fold = model.residual(x, y)
    V = model.voltages(x, y)
    Y_plain = build_admittance(case, include_zip=False)
    S_net = V * np.conj(Y_plain @ V)
    zf = case.zip_split.z_fraction
    s_table = case.s_inject_pu()
    for li in case.pq_indices:
        s_z = zf * s_table[li] * abs(V[li]) ** 2  # injection at voltage V
        row_p = li
        g_explicit = S_net[li].real - s_z.real - case.zip_split.p_fraction * s_table[li].real - (
            x[model.adjustable.index(("P", case.buses[li].id))] if ("P", case.buses[li].id) in model.adjustable else 0.0)
        assert g_fold[row_p] == pytest.approx(g_explicit, abs=1e-12)


def test_loss_matches_branch_oracle(m9_static, m9_static_base):
    model = m9_static
    x, y = m9_static_base
    p_loss, frac = model.active_power_loss(x, y)
    V = model.voltages(x, y)
    case = model.case
    total = 0.0
    for br in case.branches:
        i, j = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        ys = 1.0 / (br.r + 1j * br.x)
        i_series = (V[i] - V[j]) * ys
        total += abs(i_series) ** 2 * br.r
    assert p_loss == pytest.approx(total, abs=1e-12)
    assert 0.001 < frac < 0.05  # a few percent of generation


def test_lossless_variant_zero_loss(m9_static):
    from dataclasses import replace
    from gridmargin import BranchSpec, StaticDispatchModel

    case = m9_static.case
    branches = tuple(BranchSpec(b.from_bus, b.to_bus, 0.0, b.x, b.b) for b in case.branches)
    flat = replace(case, name="case9mod1-lossless", branches=branches)
    model = StaticDispatchModel(flat, [("P", 10), ("P", 11), ("P", 12)])
    y = newton_solve(model, model.x_base, model.flat_start())
    x = model.complete_x(model.x_base, y)
    p_loss, _ = model.active_power_loss(x, y)
    assert abs(p_loss) < 1e-12
    rng = np.random.default_rng(13)
    xr, yr = random_state(model, rng)
    assert abs(model.active_power_loss(xr, yr)[0]) < 1e-12


def test_case39_dimensions_and_base():
    model = study_case39()
    assert model.n_x == 18
    assert model.n_y == 77
    assert model.n_g == 78
    assert len(model.reduced_rows) == 77
    x, y = solved_base(model)
    assert np.max(np.abs(model.residual(x, y))) < 1e-8
    V = model.voltages(x, y)
    assert np.all(np.abs(V) > 0.90) and np.all(np.abs(V) < 1.11)
    p_loss, frac = model.active_power_loss(x, y)
    assert 0.0 < frac < 0.03
