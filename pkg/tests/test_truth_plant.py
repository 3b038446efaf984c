import logging

import numpy as np

from floatarm.truth_plant import (Phase, DisturbanceSpec, TruthModel,
                                  true_matrices, disturbance, realized_port)
from floatarm.dynamics import shipped_params, mass_matrix


def test_warmup_matrices():
    B, D = true_matrices(np.array([0.4, -1.2]), np.array([0.9, 0.3]),
                         Phase.WARMUP)
    assert np.array_equal(B, np.eye(2))
    assert np.array_equal(D, 0.1 * np.eye(2))


def test_nominal_model():
    tm = TruthModel()
    assert np.array_equal(tm.B_nom, np.eye(2))
    assert np.array_equal(tm.D_nom, 0.1 * np.eye(2))


def test_nonlinear_dissipation_example():
    # q = 0, p = (1, 1): delta D = diag(0.37, 0.55) on top of 0.1 I
    _, D = true_matrices(np.zeros(2), np.ones(2), Phase.NONLINEAR)
    assert np.allclose(np.diag(D), [0.1 + 0.37, 0.1 + 0.55], atol=1e-15)
    assert D[0, 1] == 0.0 and D[1, 0] == 0.0


def test_nonlinear_input_example():
    # p = 0, q = (1, 0): delta B = [[-0.1, -0.1], [0.45, 0]]
    B, _ = true_matrices(np.array([1.0, 0.0]), np.zeros(2), Phase.NONLINEAR)
    expected = np.eye(2) + np.array([[-0.1, -0.1], [0.45, 0.0]])
    assert np.allclose(B, expected, atol=1e-15)


def test_linear_phase_excludes_quadratic_terms():
    q = np.array([1.0, 0.0])
    p = np.array([0.1, -0.1])
    B_lin, D_lin = true_matrices(q, p, Phase.LINEAR)
    # linear-in-state parts only
    assert np.allclose(B_lin, np.eye(2) + np.array([[-0.1, 0.0],
                                                    [0.05, 0.0]]), atol=1e-15)
    assert np.allclose(np.diag(D_lin),
                       [0.1 + 0.02 + 0.4 * 0.1, 0.1 + 0.05 - 0.4 * 0.1],
                       atol=1e-15)


def test_dissipation_clamped_at_zero(caplog):
    # large negative-quadratic momentum drives D11 negative -> floored
    with caplog.at_level(logging.WARNING):
        _, D = true_matrices(np.zeros(2), np.array([10.0, 0.0]),
                             Phase.NONLINEAR)
    assert D[0, 0] == 0.0
    assert any("clamped" in r.message for r in caplog.records)


def test_disturbance_zero_outside_final_phase():
    spec = DisturbanceSpec.default(2)
    for phase in (Phase.WARMUP, Phase.LINEAR, Phase.NONLINEAR):
        assert np.array_equal(disturbance(3.0, phase, spec), np.zeros(2))


def test_disturbance_steps_at_sin_zero_crossing():
    spec = DisturbanceSpec.default(2)
    assert np.allclose(disturbance(0.0, Phase.DISTURBED, spec),
                       [0.2, -0.15], atol=1e-15)
    # half-period crossing of the 0.2 Hz component
    assert np.allclose(disturbance(2.5, Phase.DISTURBED, spec),
                       [0.2, -0.15], atol=1e-12)


def test_disturbance_mean_over_full_period():
    spec = DisturbanceSpec.default(2)
    ts = np.linspace(0.0, 5.0, 50001)
    vals = np.array([disturbance(t, Phase.DISTURBED, spec) for t in ts])
    mean = np.trapezoid(vals, ts, axis=0) / 5.0
    assert np.max(np.abs(mean - [0.2, -0.15])) < 1e-3


def test_realized_port_trivial(params):
    tau = realized_port(np.zeros(2), np.array([0.5, -0.8]), np.zeros(2),
                        0.0, Phase.WARMUP, params)
    assert np.allclose(tau, 0.0)


def test_realized_port_warmup_identity(params):
    u0 = np.array([0.3, -0.2])
    tau = realized_port(u0, np.array([0.5, -0.8]), np.zeros(2), 0.0,
                        Phase.WARMUP, params)
    assert np.allclose(tau, u0, atol=1e-15)


def test_realized_port_full_expression(params, rng):
    q = rng.uniform(-1, 1, 2)
    qd = rng.uniform(-0.5, 0.5, 2)
    p = mass_matrix(q, 0.0, params) @ qd
    u = rng.uniform(-1, 1, 2)
    spec = DisturbanceSpec.default(2)
    tau = realized_port(u, q, p, 2.0, Phase.DISTURBED, params, spec=spec)
    B, D = true_matrices(q, p, Phase.DISTURBED)
    expected = B @ u - D @ qd + disturbance(2.0, Phase.DISTURBED, spec)
    assert np.allclose(tau, expected, atol=1e-12)
