import numpy as np
import pytest

from floatarm import _kernels as K
from floatarm.dynamics import shipped_params, mass_eigen_range, mass_matrix
from floatarm.learner import FeatureConfig, NetworkParams, forward
from floatarm.rhs_control import (PortObserver, ChiEstimator, GainFreeze,
                                  GainScheduler, integrator_step,
                                  estimate_chi, synthesize_gains,
                                  mode_gains, mode_analysis, compute_J0,
                                  MAX_K_DT, BETA_CAP)
from floatarm.truth_plant import Phase


def drive_plant(params, u_of_t, duration, dt=1e-3):
    """Free-phase roll-out (tau = u exactly) with observer measurements."""
    m, i, l, off = params.arrays()
    obs = PortObserver(params, dt)
    state = np.concatenate([np.array([0.5, -0.8]), np.zeros(5)])
    dstep = np.zeros(2)
    taus = []
    tau_obs = []
    times = []
    for k in range(int(round(duration / dt))):
        t = k * dt
        u = u_of_t(t)
        tob, v = obs.measure(state[:2], state[2:4], state[6])
        taus.append(u.copy())
        tau_obs.append(tob)
        times.append(t)
        state, _ = K.rk4_plant_step(state, u, t, dt, int(Phase.FREE),
                                    m, i, l, off, dstep, 0.0, 0.0)
    return np.array(times), np.array(taus), np.array(tau_obs)


def test_observer_rest_zero(params):
    obs = PortObserver(params, 1e-3)
    tau, v = obs.measure(np.array([0.5, -0.8]), np.zeros(2))
    assert np.allclose(tau, 0.0)
    assert np.allclose(v, 0.0)


def test_observer_constant_drive(params):
    u0 = np.array([0.04, -0.03])
    t, tau, tau_obs = drive_plant(params, lambda t: u0, 1.0)
    # after the filter settles the reconstruction tracks within 1%
    err = np.linalg.norm(tau_obs[200:] - tau[200:], axis=1)
    assert err.max() / np.linalg.norm(u0) < 0.01


def test_observer_sinusoid_frequency_response(params):
    f = 0.5
    amp = 0.05
    t, tau, tau_obs = drive_plant(
        params, lambda t: amp * np.sin(2 * np.pi * f * t) * np.ones(2), 4.0)
    # least-squares fit of sin/cos over the final two cycles
    mask = t >= 2.0 - 1e-12
    base = np.column_stack([np.sin(2 * np.pi * f * t[mask]),
                            np.cos(2 * np.pi * f * t[mask])])
    coef, *_ = np.linalg.lstsq(base, tau_obs[mask, 0], rcond=None)
    a_fit = np.hypot(*coef)
    phase = np.arctan2(coef[1], coef[0])
    assert abs(a_fit - amp) / amp < 0.03
    assert abs(np.degrees(phase)) < 5.0


def test_integrator_step_basics():
    u = np.array([0.1, -0.2])
    assert np.array_equal(integrator_step(u, np.zeros(2), np.ones(2), 1e-3),
                          u)
    e0 = np.array([0.5, -0.25])
    k = np.array([100.0, 200.0])
    unew = u.copy()
    for _ in range(1000):   # constant error for one second
        unew = integrator_step(unew, e0, k, 1e-3)
    assert np.allclose(unew, u + k * e0 * 1.0, atol=1e-9)


def test_integrator_trapezoid_variant():
    u = np.zeros(2)
    e = np.array([1.0, 1.0])
    out = integrator_step(u, e, np.ones(2), 1e-3, trapezoid=True,
                          e_prev=np.zeros(2))
    assert np.allclose(out, 0.5 * e * 1e-3)


def test_integrator_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        integrator_step(np.zeros(2), np.array([np.nan, 0.0]), np.ones(2),
                        1e-3)


def test_integrator_warmup_decay_rate(params):
    # locked-joint warm-up bench: e decays per step by (1 - k dt)
    k = 300.0
    dt = 1e-3
    u = 0.0
    tau_r = 1.0
    errs = [tau_r - u]
    for _ in range(20):
        u += k * (tau_r - u) * dt
        errs.append(tau_r - u)
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.allclose(ratios, 1 - k * dt, atol=1e-12)
    # 2% settling within 4/k seconds
    settle_steps = int(np.ceil(4.0 / k / dt))
    assert abs(errs[min(settle_steps, 20)]) <= 0.02 + 1e-9


def test_estimate_chi_rules():
    assert estimate_chi(1e-4, 0.0) == 1e-4                 # floor
    assert estimate_chi(1e-4, 0.5) == 0.5                  # new max wins
    assert estimate_chi(0.5, 0.0) == 0.5 * 0.995           # decay
    assert estimate_chi(0.5, 0.4975001) == 0.4975001       # hold at level


def test_chi_estimator_window():
    est = ChiEstimator(window=10)
    est.win[:5] = [0.0, 0.1, 0.5, 0.2, 0.0]
    est.meta[1] = 5
    assert est.update() == 0.5
    est.win[:5] = 0.0
    chi = est.update()
    assert abs(chi - 0.5 * 0.995) < 1e-15


def test_synthesize_gains_plugin_example(params):
    # independent grid oracle for the mass-eigenvalue infimum
    qs = np.linspace(-np.pi, np.pi, 100)
    lam_min = min(np.linalg.eigvalsh(mass_matrix(np.array([a, b]), 0.0,
                                                 params))[0]
                  for a in qs for b in qs)
    Kd = 0.5 * np.eye(2)
    gs = synthesize_gains(np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)),
                          Kd, lam_min, Td=2.0, beta_hat=1.0)
    expected_c = 1.1 * 2.0 * 4.0 * 0.5 / lam_min
    assert abs(gs.c - expected_c) / expected_c < 1e-12
    assert np.allclose(gs.k, expected_c)   # lambda = 1, 1
    assert gs.sigma_rhs == pytest.approx(gs.c)
    assert gs.separation_ok
    assert gs.T0 == pytest.approx(5.0 / (2.0 * gs.lam_bar_lhs))


def test_synthesize_gains_beta_doubles_c(params):
    lam_min, _ = mass_eigen_range(params)
    Kd = 0.5 * np.eye(2)
    gs1 = synthesize_gains(np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)),
                           Kd, lam_min, 2.0, beta_hat=1.0)
    gs2 = synthesize_gains(np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)),
                           Kd, lam_min, 2.0, beta_hat=np.exp(5.0))
    assert gs2.c == pytest.approx(2.0 * gs1.c)


def test_synthesize_gains_dic_violation():
    with pytest.raises(GainFreeze):
        synthesize_gains(np.array([[1.0, 1.0], [1.0, 1.0]]),
                         0.1 * np.ones(2), np.zeros((2, 4)),
                         0.5 * np.eye(2), 0.005, 2.0, 1.0)


def test_synthesize_gains_negative_real_eigenvalue():
    with pytest.raises(GainFreeze):
        synthesize_gains(-np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)),
                         0.5 * np.eye(2), 0.005, 2.0, 1.0)


def test_synthesize_gains_k_cap():
    # a tiny eigenvalue demands a huge per-channel gain; the discrete-loop
    # cap bounds it
    B = np.diag([1.0, 0.01])
    gs = synthesize_gains(B, 0.1 * np.ones(2), np.zeros((2, 4)),
                          0.5 * np.eye(2), 0.005, 2.0, 1.0, dt_inner=1e-3)
    assert gs.k_capped
    assert gs.k.max() <= MAX_K_DT / 1e-3 + 1e-9


def test_mode_gains_diagonal_case():
    d = np.array([0.3, 0.7])
    J0 = np.arange(8.0).reshape(2, 4)
    fam1, fam2, fam3 = mode_gains(np.eye(2), d, J0)
    assert np.allclose(fam1, np.eye(2))
    assert np.allclose(fam2, np.diag(d))
    assert np.allclose(fam3, J0)


def test_mode_analysis_identity_beta():
    B = np.array([[1.1, 0.2], [0.0, 0.9]])
    D = np.array([0.2, 0.3])
    J0 = np.ones((2, 4))
    _, beta = mode_analysis((B, D, J0), (B, D, J0))
    assert beta == 1.0


def test_mode_analysis_brute_force_oracle():
    rng = np.random.Generator(np.random.Philox(5))
    Bn = np.array([[1.0, 0.3], [0.1, 0.8]])
    Dn = np.array([0.2, 0.4])
    Jn = rng.normal(0, 1, (2, 4))
    Bc = 2.0 * Bn
    current = (Bc, Dn, Jn)
    nominal = (Bn, Dn, Jn)
    _, beta = mode_analysis(current, nominal)

    # exhaustive enumeration of |T_ip Gamma_pj| ratios
    def families(B, D, J):
        w, T = np.linalg.eig(B)
        order = np.lexsort((w.imag, w.real))
        T = T[:, order]
        Ti = np.linalg.inv(T)
        return T, (Ti, Ti * D[None, :], Ti @ J)

    Tc, fams_c = families(*current)
    Tn, fams_n = families(*nominal)
    worst = 1.0
    for fc, fn in zip(fams_c, fams_n):
        for i in range(2):
            for p_ in range(2):
                for j in range(fc.shape[1]):
                    num = abs(Tc[i, p_] * fc[p_, j])
                    den = abs(Tn[i, p_] * fn[p_, j])
                    if den > 1e-12:
                        worst = max(worst, num / den)
    assert beta == pytest.approx(min(worst, BETA_CAP))


def test_mode_analysis_ill_conditioned_falls_back():
    B = np.array([[1.0, 1.0], [0.0, 1.0 + 1e-12]])  # near-defective
    D = np.array([0.1, 0.1])
    J0 = np.zeros((2, 4))
    _, beta = mode_analysis((B, D, J0), (B, D, J0))
    assert beta == BETA_CAP


def test_compute_J0_zero_cases(rng):
    net = NetworkParams.warm_start(FeatureConfig(n=2), rng)
    # state-independent outputs (head weights are zero at warm start)
    J0 = compute_J0(net, np.zeros(4), rng.normal(0, 1, 2),
                    rng.normal(0, 1, 2))
    assert np.allclose(J0, 0.0, atol=1e-10)
    # u0 = 0, qd0 = 0
    net.theta += rng.normal(0, 0.3, net.size)
    J0 = compute_J0(net, rng.normal(0, 1, 4), np.zeros(2), np.zeros(2))
    assert np.allclose(J0, 0.0, atol=1e-12)


def test_compute_J0_directional_fd(rng):
    from floatarm.learner import feature_vector
    net = NetworkParams.warm_start(FeatureConfig(n=2), rng)
    net.theta += rng.normal(0, 0.3, net.size)
    x0 = rng.normal(0, 0.5, 4)
    u0 = rng.normal(0, 1, 2)
    qd0 = rng.normal(0, 1, 2)
    J0 = compute_J0(net, x0, u0, qd0)

    def f(x):
        B, D, _ = forward(net, feature_vector(x[:2], x[2:], net.features))
        return np.diag(D) * qd0 - B @ u0

    h = 5e-6   # halved step
    worst = 0.0
    for _ in range(10):
        d = rng.normal(0, 1, 4)
        d /= np.linalg.norm(d)
        fd = (f(x0 + h * d) - f(x0 - h * d)) / (2 * h)
        pred = J0 @ d
        worst = max(worst, np.max(np.abs(fd - pred)) / max(np.max(np.abs(fd)), 1e-9))
    assert worst < 1e-4


def test_gain_scheduler_freeze_timeout():
    sched = GainScheduler(0.5 * np.eye(2), 0.005, 2.0, 1e-3,
                          freeze_timeout=10.0)
    singular = np.array([[1.0, 1.0], [1.0, 1.0]])
    D = 0.1 * np.ones(2)
    J0 = np.zeros((2, 4))
    assert sched.commit(0.0, np.eye(2), D, J0) is not None
    assert sched.commit(1.0, singular, D, J0) is None
    assert sched.commit(5.0, singular, D, J0) is None
    with pytest.raises(GainFreeze):
        sched.commit(11.5, singular, D, J0)
    # recovery clears the freeze clock
    sched2 = GainScheduler(0.5 * np.eye(2), 0.005, 2.0, 1e-3)
    sched2.commit(0.0, np.eye(2), D, J0)
    assert sched2.commit(1.0, singular, D, J0) is None
    assert sched2.commit(2.0, np.eye(2), D, J0) is not None
    assert sched2.freeze_since is None


def test_gain_scheduler_beta_one_on_first_commit():
    sched = GainScheduler(0.5 * np.eye(2), 0.005, 2.0, 1e-3)
    gs = sched.commit(0.0, np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)))
    assert gs.beta == 1.0
