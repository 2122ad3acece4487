import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from lyapgrid.dynamics import (ControlInput, MachineModel, StateLayout, SystemState,
                               ift_reduce)
from lyapgrid.errors import RegularityError
from lyapgrid.powerflow import solve_powerflow

from conftest import default_params, two_bus


def init(net, **kw):
    model = MachineModel(net, **kw)
    state, u = model.consistent_initialization(solve_powerflow(net, tol=1e-12))
    return model, state.x, u


def central_jacobian(fun, x, eps=1e-6):
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        cols.append((fun(x + e) - fun(x - e)) / (2 * eps))
    return np.column_stack(cols)


def off_equilibrium(model, x, rng, scale=1e-2):
    """Perturb the differential states and restore the algebraic constraints."""
    y = x.copy()
    n_d = model.layout.n_d
    y[:n_d] += scale * rng.standard_normal(n_d)
    return model.solve_algebraic(y)


@pytest.mark.parametrize("name", ["case9", "case39"])
@pytest.mark.parametrize("literal_governor", [False, True])
def test_initialization_is_an_equilibrium(name, literal_governor, case9, case39):
    net = {"case9": case9, "case39": case39}[name]
    model, x, u = init(net, literal_governor=literal_governor)
    assert np.max(np.abs(model.f(x, u))) < 1e-10
    assert np.max(np.abs(model.g(x))) < 1e-10
    np.testing.assert_allclose(u.T_r, (1 if not literal_governor else -1) * x[model.layout.block("TN")])


def test_stator_powers_match_phasor_oracle(case9):
    # terminal power from E' behind x'_d with saliency, computed in the dq frame
    model, x, _ = init(case9)
    s = SystemState(x, model.layout)
    vg = s["v"][model.gi]
    phi = s["delta"] - s["theta"][model.gi]
    vd, vq = vg * np.sin(phi), vg * np.cos(phi)
    iq = vd / model.x_q
    id_ = (s["Eq"] - vq) / model.x_d_prime
    p_ref = vd * id_ + vq * iq
    q_ref = vq * id_ - vd * iq
    p, q = model.stator_powers(x)
    np.testing.assert_allclose(p, p_ref, atol=1e-12)
    np.testing.assert_allclose(q, q_ref, atol=1e-12)


def test_partial_jacobians_against_differences(case9, rng):
    model, x, u = init(case9)
    y = off_equilibrium(model, x, rng)
    np.testing.assert_allclose(model.F_x(y), central_jacobian(lambda z: model.f(z, u), y),
                               atol=1e-7)
    np.testing.assert_allclose(model.G_x(y), central_jacobian(model.g, y), atol=1e-7)


def test_literal_qbalance_jacobian(case9, rng):
    model, x, u = init(case9, literal_qbalance=True)
    np.testing.assert_allclose(model.G_x(x), central_jacobian(model.g, x), atol=1e-7)


def test_ode_jacobian_against_differences(case9, rng):
    model, x, u = init(case9)
    y = off_equilibrium(model, x, rng, 3e-2)
    J = model.ode_jacobian(y, u)
    J_fd = central_jacobian(lambda z: model.ode_rhs(z, u), y)
    err = np.linalg.norm(J - J_fd) / np.linalg.norm(J_fd)
    assert err < 1e-7
    # dropping the curvature term is visibly wrong away from equilibrium
    n_d = model.layout.n_d
    G_xd, G_xa = model.algebraic_jacobians(y)
    naive = np.vstack([model.F_x(y), -np.linalg.solve(G_xa, G_xd @ model.F_x(y))])
    assert np.linalg.norm(naive - J_fd) / np.linalg.norm(J_fd) > 100 * err
    assert naive.shape == J.shape == (model.layout.n, model.layout.n)
    assert n_d == 12


def test_reduced_velocity_is_tangent_to_constraints(case39, rng):
    model, x, u = init(case39)
    y = off_equilibrium(model, x, rng)
    assert np.max(np.abs(model.G_x(y) @ model.ode_rhs(y, u))) < 1e-10
    G_xd, G_xa = model.algebraic_jacobians(y)
    fx = model.f(y, u)
    np.testing.assert_allclose(model.ode_rhs(y, u)[model.layout.n_d:], ift_reduce(fx, G_xd, G_xa))


def test_equilibrium_spectrum_matches_pencil(case9):
    # nonzero eigenvalues of the reduced Jacobian are the finite eigenvalues of (A, E)
    model, x, u = init(case9)
    J = model.ode_jacobian(x, u)
    E, A = model.linearization(x, u)
    w = sla.eig(A, E, right=False)
    finite = np.sort_complex(w[np.isfinite(w)])
    eig = np.linalg.eigvals(J)
    assert finite.size == model.layout.n_d
    tol = 1e-6 * np.max(np.abs(finite))
    big = finite[np.abs(finite) >= tol]
    # zero is defective in J, so its computed copies split by about sqrt(eps)
    assert np.sum(np.abs(eig) < tol) == model.layout.n - big.size
    for lam in big:
        assert np.min(np.abs(eig - lam)) < 1e-8 * max(1.0, abs(lam))


def test_constraint_tangent_space_is_invariant(case9):
    model, x, u = init(case9)
    T = model.constraint_tangent_basis(x)
    assert T.shape == (model.layout.n, model.layout.n_d)
    np.testing.assert_allclose(T.T @ T, np.eye(model.layout.n_d), atol=1e-12)
    J = model.ode_jacobian(x, u)
    assert np.max(np.abs(model.G_x(x) @ J @ T)) < 1e-9


@pytest.mark.parametrize("name", ["case9", "case39"])
def test_regularity_certificate(name, case9, case39):
    net = {"case9": case9, "case39": case39}[name]
    model, x, u = init(net)
    sign, logdet = model.regularity_certificate(x, u)
    assert np.isfinite(logdet) and abs(sign) == pytest.approx(1.0)


def test_nonpositive_voltage_is_irregular(case9):
    model, x, u = init(case9)
    y = x.copy()
    y[model.layout.index("v", 5)] = 0.0
    with pytest.raises(RegularityError, match="5"):
        model.ode_rhs(y, u)


def test_singular_algebraic_jacobian(case9):
    model, x, u = init(case9)
    y = x.copy()
    y[model.layout.block("v")] = 1e-300
    with pytest.raises(RegularityError):
        model.factor_algebraic(y)


def test_solve_algebraic_restores_constraints(case39, rng):
    model, x, _ = init(case39)
    y = x.copy()
    y[model.layout.n_d:] += 1e-3 * rng.standard_normal(model.layout.n_a)
    z = model.solve_algebraic(y)
    np.testing.assert_allclose(z, x, atol=1e-9)


def test_literal_governor_sign(case9):
    model, x, u = init(case9)
    lit = MachineModel(case9, literal_governor=True)
    rows = slice(3 * model.layout.n_gen, 4 * model.layout.n_gen)
    diff = lit.F_x(x)[rows] - model.F_x(x)[rows]
    tn = model.layout.block("TN")
    np.testing.assert_allclose(diff[:, tn], np.diag(2 / model.T_CH))


def test_state_layout_bijection(case39):
    layout = MachineModel(case39).layout
    labels = layout.labels()
    assert len(labels) == len(set(labels)) == layout.n == 4 * 10 + 2 * 10 + 2 * 39
    for k, label in enumerate(labels):
        q, bus = layout.lookup(k)
        assert label == f"{q}_{bus}" and layout.index(q, bus) == k
    with pytest.raises(KeyError):
        layout.index("delta", 1)  # load bus
    with pytest.raises(IndexError):
        layout.lookup(layout.n)


def test_state_and_input_validation():
    layout = StateLayout((1,), (1, 2))
    with pytest.raises(ValueError):
        SystemState(np.zeros(3), layout)
    with pytest.raises(ValueError):
        ControlInput(np.array([np.nan]), np.zeros(1))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 1.2), st.floats(0.0, 0.4), st.floats(0.05, 0.2))
def test_two_bus_initialization_property(P, Q, x):
    net = two_bus(load_p=P, load_q=Q, r=0.01, x=x)
    model, state, u = init(net)
    assert np.max(np.abs(model.f(state, u))) < 1e-9
    assert np.max(np.abs(model.g(state))) < 1e-9


def test_rotational_symmetry(case9, rng):
    model, x, u = init(case9)
    y = off_equilibrium(model, x, rng)
    shifted = y.copy()
    for q in ("delta", "theta"):
        shifted[model.layout.block(q)] += 0.7
    np.testing.assert_allclose(model.f(shifted, u), model.f(y, u), atol=1e-12)
    np.testing.assert_allclose(model.g(shifted), model.g(y), atol=1e-12)


def test_synchronous_speed_freezes_angles(case9, rng):
    model, x, u = init(case9)
    y = x + 0.01 * rng.standard_normal(x.size)
    y[model.layout.block("omega")] = model.omega0
    assert np.all(model.f(y, u)[model.layout.block("delta")] == 0)


def test_undamped_speed_step():
    net = two_bus(params=default_params(D_pu=0.0))
    model, x, u = init(net)
    y = x.copy()
    y[model.layout.block("omega")] += 1.0
    w = model.layout.block("omega")
    np.testing.assert_allclose(model.f(y, u)[w], model.f(x, u)[w], atol=1e-15)


def test_zero_voltage_load_bus_residual(case9):
    model, x, _ = init(case9)
    y = x.copy()
    y[model.layout.index("v", 5)] = 0.0
    r = model.g(y)
    i = case9.index_of(5)
    n_g, n_b = model.layout.n_gen, model.layout.n_bus
    assert r[2 * n_g + i] == pytest.approx(-case9.bus(5).load_p)
    assert r[2 * n_g + n_b + i] == pytest.approx(-case9.bus(5).load_q)


def test_stator_rows_ignore_load_buses(case9):
    model, x, _ = init(case9)
    Gx = model.G_x(x)
    loads = [case9.index_of(b) for b in (4, 5, 6, 7, 8, 9)]
    for q in ("v", "theta"):
        cols = [model.layout.block(q).start + i for i in loads]
        assert np.all(Gx[: 2 * model.layout.n_gen][:, cols] == 0)


def test_no_load_initialization():
    net = two_bus(load_p=0.0, load_q=0.0, r=0.0, x=0.1, b=0.0)
    model, x, u = init(net)
    s = SystemState(x, model.layout)
    np.testing.assert_allclose(s["delta"], s["theta"][model.gi], atol=1e-12)
    np.testing.assert_allclose(s["Eq"], s["v"][model.gi], atol=1e-12)
    np.testing.assert_allclose(s["TN"], 0.0, atol=1e-12)


def test_field_voltage_step_raises_flux(case9):
    model, x, u = init(case9)
    bumped = ControlInput(u.E_fd + 0.1, u.T_r)
    assert np.all(model.f(x, bumped)[model.layout.block("Eq")] > 0)


def test_equilibrium_reduced_rhs(case39):
    model, x, u = init(case39)
    assert np.max(np.abs(model.ode_rhs(x, u))) <= 1e-8


def test_ift_reduce_hand_example():
    # x' = -x + y, 0 = 2y - 3x: y' = (3/2) x' = (3/2)(-x + y)
    f = np.array([-1.0 + 1.5])
    assert ift_reduce(f, np.array([[-3.0]]), np.array([[2.0]]))[0] == pytest.approx(1.5 * 0.5)
