import numpy as np
import pytest

from floatarm import _kernels as K
from floatarm.dynamics import mass_matrix, dH_dq, joint_velocity, shipped_params
from floatarm.ph_core import (PhStructure, PortVariables, mechanical_structure,
                              decompose, power_balance)
from floatarm.truth_plant import Phase, DisturbanceSpec
from floatarm.sim_engine import run_free


def test_structure_invariants():
    s = mechanical_structure(2, D=0.1 * np.eye(2))
    n = s.n
    assert np.max(np.abs(s.J + s.J.T)) == 0.0
    assert np.array_equal(s.J[:n, n:], np.eye(n))
    assert np.array_equal(s.J[n:, :n], -np.eye(n))
    assert np.min(np.linalg.eigvalsh(s.R)) >= -1e-12


def test_structure_rejects_indefinite_dissipation():
    with pytest.raises(ValueError):
        mechanical_structure(2, D=-0.1 * np.eye(2))


def test_structure_rejects_bad_shapes():
    with pytest.raises(ValueError):
        PhStructure(n=2, J=np.zeros((3, 3)), R=np.zeros((4, 4)),
                    g=np.zeros((4, 2)))


def test_decompose_conservative_flow():
    s = mechanical_structure(2)
    gH = np.array([0.1, -0.2, 0.3, 0.4])
    xdot = s.J @ gH
    port = decompose(xdot, gH, s)
    assert np.allclose(port.tau, 0.0)
    assert np.allclose(port.Pi, 0.0)


def test_decompose_gradient_free():
    s = mechanical_structure(2)
    tau0 = np.array([0.7, -1.1])
    xdot = np.concatenate([np.zeros(2), tau0])
    port = decompose(xdot, np.zeros(4), s)
    assert np.allclose(port.tau, tau0)
    assert np.allclose(port.Pi[:2], 0.0)


def test_decompose_dimension_mismatch():
    s = mechanical_structure(2)
    with pytest.raises(ValueError):
        decompose(np.zeros(3), np.zeros(4), s)


def test_decompose_inconsistent_configuration_block():
    s = mechanical_structure(2)
    xdot = np.array([1.0, 0.0, 0.0, 0.0])   # qdot != dH/dp
    with pytest.raises(ValueError):
        decompose(xdot, np.zeros(4), s)


def test_decompose_cross_checks_truth_plant(rng):
    # Pi extracted from the conservative side equals the port computed by
    # the actuation side for the same instant
    params = shipped_params()
    m, i, l, off = params.arrays()
    s = mechanical_structure(2)
    spec = DisturbanceSpec.default(2)
    for phase in (Phase.WARMUP, Phase.NONLINEAR, Phase.DISTURBED):
        q = rng.uniform(-1.0, 1.0, 2)
        p = rng.uniform(-0.05, 0.05, 2)
        u = rng.uniform(-0.5, 0.5, 2)
        t = 3.7
        state = np.concatenate([q, p, np.zeros(3)])
        ws = K.make_ws(2)
        out = np.empty(7)
        K.plant_deriv_ws(state, u, t, int(phase), m, i, l, off,
                         spec.step, spec.amp, spec.freq, ws, out)
        xdot = out[:4]
        gH = np.concatenate([dH_dq(q, p, params),
                             joint_velocity(q, p, params)])
        port = decompose(xdot, gH, s)
        B, D, _ = K.truth_mats(q, p, int(phase))
        d = K.disturbance_vec(t, int(phase), spec.step, spec.amp, spec.freq)
        tau_rhs = B @ u - D @ joint_velocity(q, p, params) + d
        assert np.max(np.abs(port.tau - tau_rhs)) < 1e-9


def test_power_balance_trivial():
    port = PortVariables(tau=np.zeros(2))
    assert power_balance(np.array([1.0, 2.0]), port) == 0.0
    port = PortVariables(tau=np.array([1.0, -1.0]))
    assert power_balance(np.zeros(2), port) == 0.0


def test_power_balance_integrates_to_energy_change():
    # driven free-phase run: integral of qdot.tau matches H(t) - H(0)
    params = shipped_params()
    m, i, l, off = params.arrays()
    dt = 1e-3
    state = np.concatenate([np.array([0.5, -0.8]), np.zeros(5)])
    u = np.array([0.05, -0.03])
    dstep = np.zeros(2)
    h0 = K.hamiltonian_value(state[:2], state[2:4], state[6], m, i, l, off)
    powers = []
    for k in range(10000):
        v = joint_velocity(state[:2], state[2:4], params, state[6])
        powers.append(power_balance(v, PortVariables(tau=u)))
        state, _ = K.rk4_plant_step(state, u, k * dt, dt, int(Phase.FREE),
                                    m, i, l, off, dstep, 0.0, 0.0)
    v = joint_velocity(state[:2], state[2:4], params, state[6])
    powers.append(power_balance(v, PortVariables(tau=u)))
    work = np.trapezoid(powers, dx=dt)
    h1 = K.hamiltonian_value(state[:2], state[2:4], state[6], m, i, l, off)
    assert abs(h1 - h0 - work) / max(h0, 1.0) < 1e-5


def test_energy_balance_conservative(params):
    M = mass_matrix(np.array([0.5, -0.8]), 0.0, params)
    p0 = M @ np.array([0.3, 0.3])
    _, H, _ = run_free(params, np.array([0.5, -0.8]), p0, 20.0)
    assert np.max(np.abs(H - H[0])) / H[0] < 1e-6
