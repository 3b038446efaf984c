"""Executable property checks shared by the CLI verify command and the
acceptance suite.

Each check returns a CheckResult with the measured figure of merit, so a
failure prints the number that broke the bound rather than a bare False.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .dynamics import (RobotParams, shipped_params, mass_matrix,
                       mass_gradient, hamiltonian, dH_dq, mass_eigen_range)
from .learner import (FeatureConfig, NetworkParams, feature_vector,
                      loss_and_gradients, batch_loss, forward)
from .lhs_control import LhsGains, task_pseudoinverse, lyapunov_envelope
from .rhs_control import synthesize_gains
from .sim_engine import run_free
from .truth_plant import Phase


@dataclass
class CheckResult:
    name: str
    passed: bool
    measure: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: measured {self.measure:.3e} "
                f"vs bound {self.bound:.3e} {self.detail}")


def check_energy_conservation(params: RobotParams | None = None,
                              duration: float = 60.0,
                              dt: float = 1e-3) -> CheckResult:
    """Free run from a moving start: relative H drift below 1e-6."""
    params = params or shipped_params()
    n = params.n
    q0 = np.array([0.5, -0.8]) if n == 2 else np.zeros(n)
    M = mass_matrix(q0, 0.0, params)
    p0 = M @ (0.3 * np.ones(n))
    t0 = time.perf_counter()
    _, H, _ = run_free(params, q0, p0, duration, dt)
    wall = time.perf_counter() - t0
    drift = float(np.max(np.abs(H - H[0])) / H[0])
    return CheckResult("energy_conservation", drift < 1e-6, drift, 1e-6,
                       f"(wall {wall:.1f}s)")


def check_power_balance(params: RobotParams | None = None,
                        duration: float = 10.0, dt: float = 1e-3):
    """Driven run: integral of qdot . tau matches H(t) - H(0) to 1e-5."""
    params = params or shipped_params()
    m, i, l, off = params.arrays()
    n = params.n
    state = np.concatenate([np.array([0.5, -0.8]), np.zeros(n + 3)])
    u = np.array([0.05, -0.03])
    dstep = np.zeros(n)
    steps = int(round(duration / dt))
    work = 0.0
    h0 = K.hamiltonian_value(state[:n], state[n:2 * n], state[2 * n + 2],
                             m, i, l, off)
    prev_power = 0.0
    for k in range(steps):
        q, p, th = state[:n], state[n:2 * n], state[2 * n + 2]
        Mq = K.mass_only(q, th, m, i, l, off)
        v = K.spd_solve(Mq, p)
        power = float(v @ u)   # free phase: tau = u
        if k > 0:
            work += 0.5 * (power + prev_power) * dt
        prev_power = power
        state, _ = K.rk4_plant_step(state, u, k * dt, dt, int(Phase.FREE),
                                    m, i, l, off, dstep, 0.0, 0.0)
    q, p, th = state[:n], state[n:2 * n], state[2 * n + 2]
    Mq = K.mass_only(q, th, m, i, l, off)
    v = K.spd_solve(Mq, p)
    work += 0.5 * (float(v @ u) + prev_power) * dt
    h1 = K.hamiltonian_value(q, p, th, m, i, l, off)
    err = abs(h1 - h0 - work) / max(h0, 1.0)
    return CheckResult("power_balance", err < 1e-5, err, 1e-5)


def check_skew_symmetry(params: RobotParams | None = None,
                        samples: int = 1000, seed: int = 0) -> CheckResult:
    """|s^T (Mdot - 2C) s| normalized, over random (q, qdot, s)."""
    params = params or shipped_params()
    rng = np.random.Generator(np.random.Philox(seed))
    n = params.n
    worst = 0.0
    for _ in range(samples):
        q = rng.uniform(-np.pi, np.pi, n)
        qd = rng.uniform(-1.0, 1.0, n)
        s = rng.uniform(-1.0, 1.0, n)
        dM = mass_gradient(q, 0.0, params)
        Mdot = np.einsum("i,ijk->jk", qd, dM)
        C = K.coriolis_from_dm(dM, qd)
        resid = abs(s @ (Mdot - 2.0 * C) @ s)
        worst = max(worst, resid / (s @ s * (1.0 + np.linalg.norm(qd))))
    return CheckResult("skew_symmetry", worst < 1e-6, worst, 1e-6)


def check_mass_gradient_consistency(params: RobotParams | None = None,
                                    samples: int = 50,
                                    seed: int = 1) -> CheckResult:
    """dM/dq at the default step vs a doubled step, 1e-5 relative."""
    params = params or shipped_params()
    rng = np.random.Generator(np.random.Philox(seed))
    n = params.n
    worst = 0.0
    h2 = 2e-6
    for _ in range(samples):
        q = rng.uniform(-np.pi, np.pi, n)
        dM = mass_gradient(q, 0.0, params)
        alt = np.zeros_like(dM)
        for i in range(n):
            qp = q.copy()
            qp[i] += h2
            Mp = mass_matrix(qp, 0.0, params)
            qp[i] -= 2 * h2
            Mm = mass_matrix(qp, 0.0, params)
            alt[i] = (Mp - Mm) / (2 * h2)
        scale = max(1e-12, float(np.max(np.abs(dM))))
        worst = max(worst, float(np.max(np.abs(dM - alt))) / scale)
    return CheckResult("mass_gradient_consistency", worst < 1e-5, worst, 1e-5)


def check_hamiltonian_gradient(params: RobotParams | None = None,
                               samples: int = 100, seed: int = 2):
    """dH/dq against central finite differences of H, 1e-6 relative."""
    params = params or shipped_params()
    rng = np.random.Generator(np.random.Philox(seed))
    n = params.n
    worst = 0.0
    h = 1e-6
    for _ in range(samples):
        q = rng.uniform(-np.pi, np.pi, n)
        p = rng.uniform(-0.5, 0.5, n)
        g = dH_dq(q, p, params)
        fd = np.zeros(n)
        for i in range(n):
            qp = q.copy()
            qp[i] += h
            hp = hamiltonian(qp, p, params)
            qp[i] -= 2 * h
            hm = hamiltonian(qp, p, params)
            fd[i] = (hp - hm) / (2 * h)
        scale = max(1e-9, float(np.max(np.abs(g))))
        worst = max(worst, float(np.max(np.abs(g - fd))) / scale)
    return CheckResult("hamiltonian_gradient", worst < 1e-6, worst, 1e-6)


def check_projectors(samples: int = 200, seed: int = 3) -> CheckResult:
    """Pseudoinverse identities D Ddag = 1, D N = 0, N^2 = N to 1e-10."""
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(samples):
        D = rng.uniform(-2.0, 2.0, 2)
        if np.linalg.norm(D) < 1e-3:
            continue
        Ddag, N = task_pseudoinverse(D)
        worst = max(worst, abs(float(D @ Ddag) - 1.0))
        worst = max(worst, float(np.max(np.abs(D @ N))))
        worst = max(worst, float(np.max(np.abs(N @ N - N))))
    return CheckResult("projector_identities", worst < 1e-10, worst, 1e-10)


def check_learner_gradients(draws: int = 100, seed: int = 4) -> CheckResult:
    """Reverse-mode gradient vs central differences, max relative < 1e-5."""
    rng = np.random.Generator(np.random.Philox(seed))
    fcfg = FeatureConfig(n=2)
    worst = 0.0
    for _ in range(draws):
        net = NetworkParams.warm_start(fcfg, rng)
        net.theta += rng.normal(0.0, 0.3, net.size)
        Xb = rng.normal(0.0, 1.0, (2, fcfg.size))
        ub = rng.normal(0.0, 1.0, (2, 2))
        qdb = rng.normal(0.0, 1.0, (2, 2))
        taub = rng.normal(0.0, 1.0, (2, 2))
        loss, grad = loss_and_gradients(net, Xb, ub, qdb, taub)
        idx = rng.integers(0, net.size, size=12)
        h = 1e-6
        scale = max(float(np.max(np.abs(grad))), 1.0)
        for j in idx:
            theta0 = net.theta[j]
            net.theta[j] = theta0 + h
            lp = batch_loss(net, Xb, ub, qdb, taub)
            net.theta[j] = theta0 - h
            lm = batch_loss(net, Xb, ub, qdb, taub)
            net.theta[j] = theta0
            fd = (lp - lm) / (2 * h)
            # near-zero components are FD-roundoff dominated; normalize by
            # the gradient scale there
            rel = abs(grad[j] - fd) / max(abs(fd), 1e-4 * scale)
            worst = max(worst, rel)
    return CheckResult("learner_gradient", worst < 1e-5, worst, 1e-5)


def check_dissipation_positivity(draws: int = 10000, seed: int = 5):
    """Min learned dissipation entry over random nets and inputs > 0."""
    rng = np.random.Generator(np.random.Philox(seed))
    fcfg = FeatureConfig(n=2)
    lowest = np.inf
    net = NetworkParams.warm_start(fcfg, rng)
    for i in range(draws):
        if i % 100 == 0:
            net = NetworkParams.warm_start(fcfg, rng)
            net.theta += rng.normal(0.0, 1.0, net.size)
        X = rng.normal(0.0, 2.0, fcfg.size)
        _, Dm, _ = forward(net, X)
        lowest = min(lowest, float(np.min(np.diag(Dm))))
    return CheckResult("dissipation_positivity", lowest > 0.0, lowest, 0.0,
                       "(bound is strict positivity)")


def timescale_bench(c: float, dt: float = 1e-3, duration: float = 0.1):
    """Linear-regime step response of the decentralized loop.

    Warm-up model, locked joints: the plant reduces to tau = u, so the
    loop is u <- u + k (tau_r - u) dt per channel with k = c. Returns the
    first time after which |e| stays at or below 2% of the step.
    """
    steps = int(round(duration / dt))
    u = 0.0
    tau_r = 1.0
    settle = 0.0
    for k in range(steps):
        e = tau_r - u
        u += c * e * dt
        if abs(tau_r - u) > 0.02:
            settle = (k + 2) * dt
    return settle


def check_timescale(params: RobotParams | None = None) -> CheckResult:
    """Step settling inside T0 with gains synthesized for the warm-up
    model at the shipped safety factor."""
    params = params or shipped_params()
    lam_min, _ = mass_eigen_range(params)
    Kd = 0.5 * np.eye(params.n)
    gs = synthesize_gains(np.eye(2), 0.1 * np.ones(2), np.zeros((2, 4)),
                          Kd, lam_min, Td=2.0, beta_hat=1.0)
    settle = timescale_bench(gs.c)
    return CheckResult("timescale_separation", settle <= gs.T0, settle,
                       gs.T0, f"(c={gs.c:.1f})")


def check_envelope(params: RobotParams | None = None, duration: float = 10.0,
                   floor_rel: float = 1e-28) -> CheckResult:
    """Measured sliding-surface energy against the analytic exponential
    envelope (5% widened) under exact port application.

    Below floor_rel * V(0) the decay has outrun double-precision
    measurement resolution and the upper bound is not applied.
    """
    params = params or shipped_params()
    lam_min, lam_max = mass_eigen_range(params)
    m, i, l, off = params.arrays()
    n = params.n
    gains = LhsGains(Kd=0.5 * np.eye(n))
    q0 = np.array([0.5, -0.8])
    p0 = np.zeros(n)
    times, V = K.ideal_lyapunov_run(q0, p0, 0.0, duration, 1e-3, gains.Kd,
                                    gains.Lambda, 0.5, 240.0, m, i, l, off)
    lower, upper = lyapunov_envelope(V[0], times, (lam_min, lam_max), gains)
    floor = V[0] * floor_rel
    ok_upper = np.all((V <= 1.05 * upper) | (V <= floor))
    ok_lower = np.all(V >= 0.95 * lower)
    margin = float(np.max(np.where(V > floor, V / np.maximum(upper, 1e-300),
                                   0.0)))
    return CheckResult("lyapunov_envelope", bool(ok_upper and ok_lower),
                       margin, 1.05,
                       f"(V floor {floor:.1e}, lower ok: {bool(ok_lower)})")


def check_nonholonomy(params: RobotParams | None = None) -> CheckResult:
    """Base attitude is path dependent: a closed joint-space loop changes
    theta0 by more than 1e-3 rad versus not moving at all."""
    params = params or shipped_params()
    m, i, l, off = params.arrays()

    def integrate_path(waypoints, seg_time=1.0, dt=1e-3):
        theta = 0.0
        for a, b in zip(waypoints[:-1], waypoints[1:]):
            a = np.asarray(a, float)
            b = np.asarray(b, float)
            qd = (b - a) / seg_time
            steps = int(round(seg_time / dt))
            for k in range(steps):
                # RK4 on theta0 alone; q(t) is prescribed
                def omega(tau_frac, th):
                    q = a + qd * (k + tau_frac) * dt
                    return K.base_rates(q, qd, th, m, i, l, off)[2]
                k1 = omega(0.0, theta)
                k2 = omega(0.5, theta + 0.5 * dt * k1)
                k3 = omega(0.5, theta + 0.5 * dt * k2)
                k4 = omega(1.0, theta + dt * k3)
                theta += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return theta

    loop = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]
    th_loop = integrate_path(loop)
    th_still = 0.0
    delta = abs(th_loop - th_still)
    return CheckResult("nonholonomy_witness", delta > 1e-3, delta, 1e-3,
                       "(bound is a lower bound)")


def verify_suite(params: RobotParams | None = None):
    """The standing property suite behind the CLI verify command."""
    params = params or shipped_params()
    return [
        check_energy_conservation(params),
        check_power_balance(params),
        check_skew_symmetry(params),
        check_mass_gradient_consistency(params),
        check_hamiltonian_gradient(params),
        check_projectors(),
        check_learner_gradients(),
        check_dissipation_positivity(),
        check_timescale(params),
        check_envelope(params),
        check_nonholonomy(params),
    ]
