import numpy as np
import pytest

from floatarm import _kernels as K
from floatarm.dynamics import (RobotParams, constraint_matrices,
                               base_velocity, generalized_jacobian,
                               mass_matrix, mass_gradient, coriolis_matrix,
                               coriolis_prime, hamiltonian, dH_dq,
                               joint_velocity, momentum_residual,
                               mass_eigen_range, shipped_params)
from oracles import (constraint_matrices_oracle, base_velocity_oracle,
                     momentum_sums, kinetic_energy_oracle,
                     fixed_base_jacobian_oracle)


def test_params_validation():
    with pytest.raises(ValueError):
        RobotParams(masses=np.array([1.0, -1.0]), lengths=np.ones(2),
                    inertias=np.ones(2), mount_offset=0.1)
    with pytest.raises(ValueError):
        RobotParams(masses=np.ones(2), lengths=np.ones(3),
                    inertias=np.ones(2), mount_offset=0.1)


def test_constraint_matrices_degenerate_chain():
    # vanishing link masses/inertias: a single rigid body about its own COM
    tiny = 1e-12
    p = RobotParams(masses=np.array([2.0, tiny, tiny]),
                    lengths=np.array([0.1225, 0.3464, 0.3464]),
                    inertias=np.array([0.02, tiny, tiny]),
                    mount_offset=0.1225)
    Hq0, Hq = constraint_matrices(np.array([0.3, -0.7]), 0.2, p)
    assert np.allclose(Hq0, np.diag([2.0, 2.0, 0.02]), atol=1e-10)
    assert np.allclose(Hq, 0.0, atol=1e-10)


def test_constraint_matrices_vs_oracle(params, rng):
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 2)
        th = rng.uniform(-np.pi, np.pi)
        Hq0, Hq = constraint_matrices(q, th, params)
        Hq0_o, Hq_o = constraint_matrices_oracle(q, th, params)
        assert np.allclose(Hq0, Hq0_o, atol=1e-12)
        assert np.allclose(Hq, Hq_o, atol=1e-12)
    # the spec's reference configuration
    Hq0, Hq = constraint_matrices(np.zeros(2), 0.0, params)
    Hq0_o, Hq_o = constraint_matrices_oracle(np.zeros(2), 0.0, params)
    assert np.allclose(Hq0, Hq0_o, atol=1e-13)
    assert np.allclose(Hq, Hq_o, atol=1e-13)


def test_base_velocity_zero_rates(params):
    r0dot, w0 = base_velocity(np.array([0.4, -1.0]), np.zeros(2), 0.0, params)
    assert np.allclose(r0dot, 0.0)
    assert w0 == 0.0


def test_base_velocity_momentum_residual(params):
    q = np.array([np.pi / 4, -np.pi / 3])
    qd = np.array([0.1, -0.2])
    r0dot, w0 = base_velocity(q, qd, 0.0, params)
    hL, hA = momentum_sums(q, qd, 0.0, r0dot, w0, params)
    assert np.linalg.norm(hL) + abs(hA) < 1e-10


def test_base_velocity_symmetry(params, rng):
    # collinear arm along the y axis: every joint rate moves bodies purely
    # in -x, so the y translation of the base vanishes by symmetry
    q = np.zeros(2)
    for _ in range(5):
        qd = rng.uniform(-1, 1, 2)
        r0dot, w0 = base_velocity(q, qd, np.pi / 2, params)
        assert abs(r0dot[1]) < 1e-14


def test_base_velocity_matches_oracle(params, rng):
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        th = rng.uniform(-np.pi, np.pi)
        r0dot, w0 = base_velocity(q, qd, th, params)
        r0dot_o, w0_o = base_velocity_oracle(q, qd, th, params)
        assert np.allclose(r0dot, r0dot_o, atol=1e-12)
        assert abs(w0 - w0_o) < 1e-12


def test_gjm_fixed_base_limit():
    heavy = RobotParams(masses=np.array([1e9, 1.0, 1.0]),
                        lengths=np.array([0.1225, 0.3464, 0.3464]),
                        inertias=np.array([1e9, 0.01, 0.01]),
                        mount_offset=0.1225)
    q = np.array([0.7, -0.4])
    bundle = generalized_jacobian(q, 0.0, heavy)
    J_fixed = fixed_base_jacobian_oracle(q, 0.0, heavy)
    assert np.allclose(bundle.gjm_per_link[1:], J_fixed[1:], atol=1e-6)


def test_gjm_zero_rates_zero_velocity(params, rng):
    q = rng.uniform(-np.pi, np.pi, 2)
    bundle = generalized_jacobian(q, 0.3, params)
    assert np.allclose(bundle.gjm_per_link @ np.zeros(2), 0.0)


def test_task_row_tracks_attitude_rate(params):
    # prescribe q(t) in closed form, integrate theta0 kinematically (RK4),
    # and compare alpha-dot = D(q) qd against finite differences of alpha
    m, i, l, off = params.arrays()
    dt = 1e-3

    def q_of(t):
        return np.array([0.2 + 0.3 / 0.8 * (1 - np.cos(0.8 * t)),
                         -0.5 - 0.25 / 1.1 * np.sin(1.1 * t)])

    def qd_of(t):
        return np.array([0.3 * np.sin(0.8 * t), -0.25 * np.cos(1.1 * t)])

    theta = 0.0
    alphas = []
    preds = []
    for k in range(2000):
        t = k * dt
        D = K.task_row(q_of(t), theta, m, i, l, off)
        alphas.append(theta + q_of(t).sum())
        preds.append(float(D @ qd_of(t)))

        def omega(tau, th):
            return K.base_rates(q_of(tau), qd_of(tau), th, m, i, l, off)[2]

        k1 = omega(t, theta)
        k2 = omega(t + 0.5 * dt, theta + 0.5 * dt * k1)
        k3 = omega(t + 0.5 * dt, theta + 0.5 * dt * k2)
        k4 = omega(t + dt, theta + dt * k3)
        theta += dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    alphas = np.array(alphas)
    preds = np.array(preds)
    fd = np.gradient(alphas, dt)
    err = np.abs(fd[2:-2] - preds[2:-2])
    assert err.max() / np.abs(preds).max() < 1e-4


def test_mass_matrix_kinetic_energy_oracle(params, rng):
    worst = 0.0
    for _ in range(1000):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        M = mass_matrix(q, 0.0, params)
        K_quad = 0.5 * qd @ M @ qd
        K_direct = kinetic_energy_oracle(q, qd, 0.0, params)
        worst = max(worst, abs(K_quad - K_direct) / max(K_direct, 1e-12))
    assert worst < 1e-10


def test_mass_matrix_spd(params, rng):
    for _ in range(10000):
        q = rng.uniform(-np.pi, np.pi, 2)
        M = mass_matrix(q, 0.0, params)
        assert np.array_equal(M, M.T)
        assert np.linalg.eigvalsh(M)[0] > 0


def test_mass_matrix_theta0_invariance(params, rng):
    for _ in range(100):
        q = rng.uniform(-np.pi, np.pi, 2)
        th1, th2 = rng.uniform(-np.pi, np.pi, 2)
        M1 = mass_matrix(q, th1, params)
        M2 = mass_matrix(q, th2, params)
        assert np.max(np.abs(M1 - M2)) < 1e-10


def test_coriolis_zero_rates(params):
    C = coriolis_matrix(np.array([0.5, -0.2]), np.zeros(2), params)
    assert np.allclose(C @ np.zeros(2), 0.0)


def test_skew_symmetry_property(params, rng):
    worst = 0.0
    for _ in range(1000):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        s = rng.uniform(-1, 1, 2)
        dM = mass_gradient(q, 0.0, params)
        Mdot = np.einsum("i,ijk->jk", qd, dM)
        C = coriolis_matrix(q, qd, params)
        resid = abs(s @ (Mdot - 2 * C) @ s) / (s @ s * (1 + np.linalg.norm(qd)))
        worst = max(worst, resid)
    assert worst < 1e-6


def test_coriolis_prime_matches_velocity_form(params, rng):
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        M = mass_matrix(q, 0.0, params)
        p = M @ qd
        assert np.allclose(coriolis_prime(q, p, params),
                           coriolis_matrix(q, qd, params), atol=1e-10)


def test_hamiltonian_zero_momentum(params):
    q = np.array([0.3, 0.9])
    assert hamiltonian(q, np.zeros(2), params) == 0.0
    assert np.allclose(dH_dq(q, np.zeros(2), params), 0.0)


def test_hamiltonian_gradient_fd(params, rng):
    h = 1e-6
    for _ in range(100):
        q = rng.uniform(-np.pi, np.pi, 2)
        p = rng.uniform(-0.5, 0.5, 2)
        g = dH_dq(q, p, params)
        fd = np.zeros(2)
        for i in range(2):
            qp = q.copy()
            qp[i] += h
            hp = hamiltonian(qp, p, params)
            qp[i] -= 2 * h
            hm = hamiltonian(qp, p, params)
            fd[i] = (hp - hm) / (2 * h)
        assert np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-9) < 1e-6


def test_hamiltonian_equals_kinetic_oracle(params, rng):
    for _ in range(200):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        M = mass_matrix(q, 0.0, params)
        p = M @ qd
        H = hamiltonian(q, p, params)
        K_direct = kinetic_energy_oracle(q, qd, 0.0, params)
        assert abs(H - K_direct) / max(K_direct, 1e-12) < 1e-10


def test_joint_velocity_roundtrip(params, rng):
    q = rng.uniform(-np.pi, np.pi, 2)
    qd = rng.uniform(-1, 1, 2)
    M = mass_matrix(q, 0.0, params)
    assert np.allclose(joint_velocity(q, M @ qd, params), qd, atol=1e-12)


def test_mass_gradient_consistency(params, rng):
    # central differences at the default step vs a doubled step
    h2 = 2e-6
    for _ in range(25):
        q = rng.uniform(-np.pi, np.pi, 2)
        dM = mass_gradient(q, 0.0, params)
        alt = np.zeros_like(dM)
        for i in range(2):
            qp = q.copy()
            qp[i] += h2
            Mp = mass_matrix(qp, 0.0, params)
            qp[i] -= 2 * h2
            Mm = mass_matrix(qp, 0.0, params)
            alt[i] = (Mp - Mm) / (2 * h2)
        rel = np.max(np.abs(dM - alt)) / max(np.max(np.abs(dM)), 1e-12)
        assert rel < 1e-5


def test_momentum_residual_along_random_states(params, rng):
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 2)
        qd = rng.uniform(-1, 1, 2)
        hl, ha = momentum_residual(q, qd, rng.uniform(-np.pi, np.pi), params)
        assert hl < 1e-12 and ha < 1e-12


def test_mass_eigen_range_matches_numpy(params):
    lo, hi = mass_eigen_range(params, grid=25)
    qs = np.linspace(-np.pi, np.pi, 25)
    lo_np = np.inf
    hi_np = -np.inf
    for q1 in qs:
        for q2 in qs:
            w = np.linalg.eigvalsh(mass_matrix(np.array([q1, q2]), 0.0, params))
            lo_np = min(lo_np, w[0])
            hi_np = max(hi_np, w[-1])
    assert abs(lo - lo_np) < 1e-12
    assert abs(hi - hi_np) < 1e-12


def test_nonholonomy_witness(params):
    from floatarm.checks import check_nonholonomy
    res = check_nonholonomy(params)
    assert res.passed, res.line()
