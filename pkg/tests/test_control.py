import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tendonarm import body_image as bi
from tendonarm import control as ct
from tendonarm import mlp
from tendonarm.kinematics import joint_jacobian

from conftest import interior_postures

G_DEFAULT = ct.StiffnessControlGains()


def test_stiffness_law_examples():
    g = ct.StiffnessControlGains(np.full(10, 10.0), 2.0)
    np.testing.assert_array_equal(ct.muscle_stiffness_command(np.ones(10), np.ones(10), g), 10.0)
    np.testing.assert_allclose(ct.muscle_stiffness_command(np.full(10, 5.0), np.zeros(10), g), 20.0)
    np.testing.assert_array_equal(ct.muscle_stiffness_command(np.zeros(10), np.full(10, 5.0), g), 10.0)
    with pytest.raises(ValueError):
        ct.StiffnessControlGains(K_stiff=0.0)
    with pytest.raises(ValueError):
        ct.StiffnessControlGains(T_bias=np.full(10, -1.0))


@given(st.lists(st.floats(-1e3, 1e3), min_size=10, max_size=10),
       st.lists(st.floats(-1e3, 1e3), min_size=10, max_size=10))
def test_stiffness_law_never_below_bias(l_m, l_t):
    assert np.all(ct.muscle_stiffness_command(np.array(l_m), np.array(l_t), G_DEFAULT) >= G_DEFAULT.T_bias)


def test_position_targets(image):
    g = ct.StiffnessControlGains(np.full(10, 10.0), 2.0)
    th = np.array([0.1, -0.2, 0.0, -0.5, 0.1])
    np.testing.assert_array_equal(ct.position_targets(image, th, g.T_bias, g), bi.predict_lengths(image, th, g.T_bias))
    T = g.T_bias + 20.0
    np.testing.assert_allclose(ct.position_targets(image, th, T, g) - bi.predict_lengths(image, th, T), -10.0)
    np.testing.assert_allclose(ct.l_soft(T, g), -10.0)


def test_safety_examples():
    s = ct.SafetyParams()
    for _ in range(50):
        np.testing.assert_array_equal(ct.safety_adjust(s, np.full(10, 200.0), np.full(10, 60.0)), 0.0)
    T = np.full(10, 100.0)
    T[3] = 250.0
    dl = ct.safety_adjust(s, T, np.full(10, 30.0))
    assert dl[3] == pytest.approx(0.01) and np.count_nonzero(dl) == 1
    for _ in range(9):
        ct.safety_adjust(s, T, np.full(10, 30.0))
    assert s.dl[3] == pytest.approx(0.1)
    # relief after the overload is gone, at most one step per tick
    prev = s.dl.copy()
    for _ in range(20):
        now = ct.safety_adjust(s, np.full(10, 50.0), np.full(10, 30.0))
        assert np.all(now <= prev) and np.max(prev - now) <= s.dl_lim + 1e-15
        prev = now
    assert np.all(s.dl == 0.0)
    with pytest.raises(ValueError, match="T_lim"):
        ct.SafetyParams(T_lim=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 400), st.floats(20, 120)), min_size=1, max_size=30))
def test_safety_step_is_rate_limited(stream):
    s = ct.SafetyParams()
    prev = s.dl.copy()
    for T, C in stream:
        now = ct.safety_adjust(s, np.full(10, T), np.full(10, C))
        # one rounding of the accumulator add is all that separates it from the limit
        assert np.max(np.abs(now - prev)) <= s.dl_lim * (1 + 1e-12)
        prev = now


def test_joint_torque_examples():
    G = np.zeros((10, 5))
    np.testing.assert_array_equal(ct.joint_torque(G, np.zeros(10)), 0.0)
    G[0, 0] = 1.0
    T = np.zeros(10)
    T[0] = 100.0
    np.testing.assert_array_equal(ct.joint_torque(G, T), [-100.0, 0, 0, 0, 0])
    G[1, 0] = -1.0
    T[1] = 100.0
    assert ct.joint_torque(G, T)[0] == 0.0


def _two_muscle_image(r1, r2):
    # one joint, two muscles; at theta = 0 the ideal map has slope (r1, -r2)
    ijmm = mlp.Network(np.array([[1.0]]), np.array([0.0]), np.array([[4.0 * r1], [-4.0 * r2]]), np.zeros(2))
    mrcm = mlp.zero_network((3, 1, 2))
    return bi.SelfBodyImage(ijmm, mrcm)


@pytest.mark.parametrize("r1, r2, tau", [(20.0, 20.0, 500.0), (15.0, 30.0, -800.0), (25.0, 10.0, 1200.0),
                                         (18.0, 22.0, 0.0)])
def test_torque_command_two_muscle_oracle(r1, r2, tau):
    img = _two_muscle_image(r1, r2)
    np.testing.assert_allclose(bi.muscle_jacobian(img, [0.0]), [[r1], [-r2]], rtol=1e-12)
    g = ct.StiffnessControlGains(np.array([10.0, 15.0]), 2.0)
    T = ct.torque_command(img, np.array([0.0]), np.array([tau]), g)
    # tau = -r1 T1 + r2 T2; only the muscle pulling the right way rises
    extra = tau - (-r1 * 10.0 + r2 * 15.0)
    expect = [10.0, 15.0 + extra / r2] if extra >= 0 else [10.0 - extra / r1, 15.0]
    np.testing.assert_allclose(T, expect, atol=1.0)


def test_torque_command_on_the_arm(image, model):
    g = ct.StiffnessControlGains()
    th = np.array([0.2, -0.3, 0.1, -0.9, 0.1])
    G = bi.muscle_jacobian(image, th)
    # the bias tensions already make some torque; asking for exactly that costs nothing extra
    np.testing.assert_allclose(ct.torque_command(image, th, ct.joint_torque(G, g.T_bias), g), g.T_bias, atol=1e-9)
    want = ct.joint_torque(G, np.linspace(20, 60, 10)) - ct.joint_torque(G, g.T_bias) * 0.5
    T = ct.torque_command(image, th, want, g)
    assert np.all(T >= g.T_bias)
    assert np.linalg.norm(ct.joint_torque(G, T) - want) <= 1.0


def test_infeasible_torque_reports_best_attempt():
    img = _two_muscle_image(20.0, 20.0)
    g = ct.StiffnessControlGains(np.array([10.0, 10.0]), 2.0)
    G = np.array([[20.0, 0.0], [-20.0, 0.0]])
    T, tau, ok = ct.distribute_torque(G, np.array([0.0, 500.0]), g.T_bias)
    assert not ok and tau[1] == 0.0
    ijmm = mlp.Network(np.eye(2), np.zeros(2), np.array([[4.0, 0.0], [-4.0, 0.0]]), np.zeros(2))
    img = bi.SelfBodyImage(ijmm, mlp.zero_network((4, 1, 2)))
    with pytest.raises(ct.InfeasibleTorque) as ei:
        ct.torque_command(img, np.zeros(2), np.array([0.0, 500.0]), g)
    assert ei.value.best_tau[1] == 0.0


@pytest.mark.parametrize("method", ["pinv", "compliance"])
@pytest.mark.parametrize("Jv, Gv, Kv", [(300.0, 25.0, 80.0), (-120.0, 12.5, 310.0), (50.0, -40.0, 5.0)])
def test_operational_stiffness_scalar_oracle(method, Jv, Gv, Kv):
    K = ct.operational_stiffness(np.array([[Jv]]), np.array([[Gv]]), np.array([[Kv]]), method=method).K_w
    assert K[0, 0] == pytest.approx(Gv * Gv * Kv / (Jv * Jv), rel=1e-6)


def test_operational_stiffness_properties(image, model):
    for th in interior_postures(model, 5, seed=3, shrink=0.6):
        J, G = joint_jacobian(model, th), bi.muscle_jacobian(image, th)
        Km = bi.muscle_stiffness(image, th, np.full(10, 40.0))
        for method in ("pinv", "compliance"):
            K = ct.operational_stiffness(J, G, Km, th, method).K_w
            K2 = ct.operational_stiffness(J, G, 2 * Km, th, method).K_w
            np.testing.assert_allclose(K2, 2 * K, rtol=1e-10)
            np.testing.assert_array_equal(K, K.T)
            assert np.min(np.linalg.eigvalsh(K)) >= -1e-9
    with pytest.raises(ct.SingularPosture):
        ct.operational_stiffness(np.zeros((3, 5)), G, Km)
    with pytest.raises(ValueError, match="method"):
        ct.operational_stiffness(J, G, Km, method="other")


@pytest.fixture
def problem_setup(image, model):
    th = np.array([0.5, 0.2, 0.1, -1.2, 0.0])
    J = joint_jacobian(model, th)
    T0 = np.full(10, 40.0)
    G = bi.muscle_jacobian(image, th)
    K0 = ct.operational_stiffness(J, G, bi.muscle_stiffness(image, th, T0), method="compliance").K_w
    return th, J, T0, K0


def test_objective_examples(image, problem_setup):
    th, J, T0, K0 = problem_setup
    assert ct.stiffness_objective(th, T0, T0, K0, image, 0.02, J, "compliance") == pytest.approx(0.0, abs=1e-9)
    assert ct.stiffness_objective(th, T0, T0, K0 / 2, image, 0.02, J, "compliance") == pytest.approx(math.sqrt(3), rel=1e-9)
    T1 = T0 + np.linspace(0, 30, 10)
    p = ct.StiffnessProblem(image, th, J, K0, T0, 0.0, "compliance")
    assert p(T1) == pytest.approx(p.stiffness_error(T1), rel=1e-15)
    with pytest.raises(ct.InvalidTarget):
        ct.StiffnessProblem(image, th, J, np.zeros((3, 3)), T0, 0.02)


def test_search_keeps_an_optimal_state(image, problem_setup):
    th, J, T0, K0 = problem_setup
    p = ct.StiffnessProblem(image, th, J, K0, T0, 0.02, "compliance")
    res = ct.search_tensions(p, T0, ct.StiffnessSearchParams(), 10.0, 200.0, 0)
    assert res.accepted == 0
    np.testing.assert_array_equal(res.T, T0)


def test_search_doubles_stiffness(image, problem_setup):
    th, J, T0, K0 = problem_setup
    p = ct.StiffnessProblem(image, th, J, 2 * K0, T0, 0.02, "compliance")
    res = ct.search_tensions(p, T0, ct.StiffnessSearchParams(), 10.0, 200.0, 5)
    assert p.stiffness_error(res.T) <= 0.5 * p.stiffness_error(T0)
    assert np.all(np.diff(res.E_trace) <= 0.0)
    assert np.all((res.T >= 10.0) & (res.T <= 200.0))


def test_search_params_validation():
    with pytest.raises(ValueError):
        ct.StiffnessSearchParams(N_v1=2, N_v2=2)
    with pytest.raises(ValueError):
        ct.StiffnessSearchParams(rand_range=0.0)


def test_ellipse_helpers_agree():
    K = np.array([[3.0, 0.5, 0.2], [0.5, 1.0, 0.1], [0.2, 0.1, 2.0]])
    F = ct.probe_forces(8, 10.0)
    np.testing.assert_allclose(np.linalg.norm(F, axis=1), 10.0)
    assert np.all(F[:, 2] == 0.0)
    ang = np.arctan2(F[:, 1], F[:, 0])
    np.testing.assert_allclose(np.diff(np.unwrap(ang)), np.pi / 4)
    # displacements of the in-plane compliance block
    C = np.linalg.inv(K)
    D = F @ C.T
    fit, _ = ct.fitted_axes(F, D)
    comp, _ = ct.compliance_axes(K)
    np.testing.assert_allclose(fit, comp, rtol=1e-10)
    assert comp[0] >= comp[1]
