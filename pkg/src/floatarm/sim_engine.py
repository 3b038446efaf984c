"""Closed-loop scenario engine.

Single-threaded, multi-rate, deterministic: the plant integrates at 1 kHz
with zero-order-held inputs; the outer controller, the learner, and the
gain synthesis run at their own (integer-divisible) cadences. Scheduling
order within a plant step is fixed: measure, outer control (if due),
learner (if due), gains (if due), inner loop, integrate. Reruns with the
same config and seed are bit-identical.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels as K
from .dynamics import RobotParams, SystemState, shipped_params, mass_eigen_range
from .lhs_control import LhsGains, ApfConfig, LhsController
from .learner import (FeatureConfig, NetworkParams, ReplayBuffer,
                      feature_vector, forward, online_update)
from .rhs_control import (PortObserver, ChiEstimator, GainScheduler,
                          GainFreeze, compute_J0)
from .truth_plant import Phase, DisturbanceSpec

log = logging.getLogger(__name__)

MODE_DAC = "dac"
MODE_BASELINE = "baseline"

EVENT_SINGULARITY = 1
EVENT_GAIN_FREEZE = 2
EVENT_DISSIPATION_CLAMP = 4


class NumericAbort(Exception):
    """Non-finite state encountered; carries a diagnostic dump."""

    def __init__(self, message: str, partial_log: "RunLog" = None):
        super().__init__(message)
        self.partial_log = partial_log


class GainFreezeTimeout(Exception):
    """Gain synthesis stayed frozen past the configured timeout."""


@dataclass
class Rates:
    plant_hz: int = 1000
    lhs_hz: int = 100
    learn_hz: int = 100
    gains_hz: int = 1

    def validate(self):
        if self.plant_hz % self.lhs_hz:
            raise ValueError("plant rate must be a multiple of the LHS rate")
        if self.lhs_hz % self.learn_hz:
            raise ValueError("LHS rate must be a multiple of the learn rate")
        if self.lhs_hz % self.gains_hz:
            raise ValueError("LHS rate must be a multiple of the gains rate")


@dataclass
class Trajectory:
    """Reference attitude alpha_d(t) = amp sin(2 pi t / period)."""

    amp: float = 0.5
    period: float = 240.0

    def eval(self, t: float):
        w = 2.0 * math.pi / self.period
        return self.amp * math.sin(w * t), self.amp * w * math.cos(w * t)


@dataclass
class LearnerConfig:
    enabled: bool = True
    lr: float = 1e-3
    batch_size: int = 32
    buffer_size: int = 256
    expanded_features: bool = False
    offset_rate: float = 0.05              # residual-tracker gain, per update
    B_init: np.ndarray | None = None       # warm-start overrides
    D_init_diag: np.ndarray | None = None


@dataclass
class ScenarioConfig:
    params: RobotParams = field(default_factory=shipped_params)
    gains: LhsGains = None
    apf: ApfConfig = field(default_factory=ApfConfig)
    traj: Trajectory = field(default_factory=Trajectory)
    rates: Rates = field(default_factory=Rates)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    disturbance: DisturbanceSpec = None
    phase_durations: tuple = (480.0, 480.0, 480.0)
    warmup_duration: float = 120.0
    mode: str = MODE_DAC
    seed: int = 0
    q0: np.ndarray = field(default_factory=lambda: np.array([0.5, -0.8]))
    p0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    r0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta0: float = 0.0
    Td: float = 2.0
    log_every: int = 10
    use_tanh: bool = True
    trapezoid: bool = False
    chi_window_s: float = 1.0
    gain_slew_tau: float = 2.0
    freeze_timeout: float = 10.0
    eigen_grid: int = 100

    def __post_init__(self):
        if self.gains is None:
            n = self.params.n
            self.gains = LhsGains(Kd=0.5 * np.eye(n))
        if self.disturbance is None:
            self.disturbance = DisturbanceSpec.default(self.params.n)
        self.q0 = np.asarray(self.q0, float)
        self.p0 = np.asarray(self.p0, float)
        self.r0 = np.asarray(self.r0, float)

    def validate(self):
        self.rates.validate()
        if self.mode not in (MODE_DAC, MODE_BASELINE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if np.any(self.p0 != 0.0):
            raise ValueError("nonzero initial momentum is not supported: "
                             "the plant model assumes a rest start")
        if any(d < 0 for d in self.phase_durations) or self.warmup_duration < 0:
            raise ValueError("phase durations must be nonnegative")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        n = self.params.n
        for name, arr, shape in (("q0", self.q0, (n,)), ("p0", self.p0, (n,)),
                                 ("r0", self.r0, (2,))):
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")


def log_columns(n: int):
    """Fixed CSV column order; vectors are flattened with 1-based suffixes."""
    cols = ["t"]
    cols += [f"q{i+1}" for i in range(n)]
    cols += [f"p{i+1}" for i in range(n)]
    cols += ["r0x", "r0y", "theta0", "alpha", "alpha_d"]
    cols += [f"s{i+1}" for i in range(n)]
    cols += ["V"]
    cols += [f"tau_r{i+1}" for i in range(n)]
    cols += [f"tau_o{i+1}" for i in range(n)]
    cols += [f"e_tau{i+1}" for i in range(n)]
    cols += [f"u{i+1}" for i in range(n)]
    cols += [f"d{i+1}" for i in range(n)]
    cols += ["chi", "c"]
    cols += [f"k{i+1}" for i in range(n)]
    cols += ["loss", "err_B", "err_D", "h_lin", "h_ang", "min_clear",
             "phase", "events"]
    return cols


class RunLog:
    """Time-indexed record of one run, with the CSV as its exchange format.

    CSV: UTF-8, one header row, fixed column order, 9 significant digits
    ('%.8e'). The log is a pure record: everything the metrics layer needs
    is a column here.
    """

    def __init__(self, columns, data: np.ndarray, summary: dict | None = None):
        self.columns = list(columns)
        self.data = data
        self.summary = summary or {}
        self._index = {c: i for i, c in enumerate(self.columns)}

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self._index[name]]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def to_csv(self, path):
        np.savetxt(path, self.data, fmt="%.8e", delimiter=",",
                   header=",".join(self.columns), comments="")

    @staticmethod
    def from_csv(path) -> "RunLog":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return RunLog(header, data)


def phase_boundaries(config: ScenarioConfig):
    b = [config.warmup_duration]
    for d in config.phase_durations:
        b.append(b[-1] + d)
    return b


def phase_at(t: float, boundaries) -> Phase:
    if t < boundaries[0]:
        return Phase.WARMUP
    if t < boundaries[1]:
        return Phase.LINEAR
    if t < boundaries[2]:
        return Phase.NONLINEAR
    return Phase.DISTURBED


def rk4_step(state: SystemState, u, dt: float, phase: Phase,
             params: RobotParams,
             spec: DisturbanceSpec | None = None) -> SystemState:
    """One zero-order-hold RK4 step of the plant (public test surface)."""
    spec = spec or DisturbanceSpec.default(params.n)
    m, i, l, off = params.arrays()
    vec, _ = K.rk4_plant_step(state.pack(), np.asarray(u, float), state.t,
                              dt, int(phase), m, i, l, off, spec.step,
                              spec.amp, spec.freq)
    if not np.all(np.isfinite(vec)):
        raise NumericAbort(f"non-finite state at t={state.t}")
    return SystemState.unpack(vec, state.t + dt)


def run_free(params: RobotParams, q0, p0, duration: float, dt: float = 1e-3,
             theta0: float = 0.0):
    """Unactuated, dissipation-free roll-out; returns (times, H, states)."""
    m, i, l, off = params.arrays()
    n = params.n
    state = np.concatenate([np.asarray(q0, float), np.asarray(p0, float),
                            np.zeros(2), [theta0]])
    steps = int(round(duration / dt))
    u = np.zeros(n)
    dstep = np.zeros(n)
    times = np.empty(steps + 1)
    H = np.empty(steps + 1)
    states = np.empty((steps + 1, state.shape[0]))
    for k in range(steps + 1):
        times[k] = k * dt
        states[k] = state
        H[k] = K.hamiltonian_value(state[:n], state[n:2 * n],
                                   state[2 * n + 2], m, i, l, off)
        if k == steps:
            break
        state, _ = K.rk4_plant_step(state, u, times[k], dt, int(Phase.FREE),
                                    m, i, l, off, dstep, 0.0, 0.0)
        if not np.all(np.isfinite(state)):
            raise NumericAbort(f"non-finite state at t={times[k]}")
    return times, H, states


def run(config: ScenarioConfig) -> RunLog:
    """Execute one scenario and return its RunLog.

    In DAC mode the full stack runs; in baseline mode the outer-loop
    torque is applied as the input directly (no inner loop, no learning,
    no robust-term bound).
    """
    config.validate()
    params = config.params
    n = params.n
    m_arr, i_arr, l_arr, off = params.arrays()
    dt = 1.0 / config.rates.plant_hz
    sub = config.rates.plant_hz // config.rates.lhs_hz
    learn_every = config.rates.lhs_hz // config.rates.learn_hz
    gains_every = config.rates.lhs_hz // config.rates.gains_hz
    dac = config.mode == MODE_DAC

    boundaries = phase_boundaries(config)
    total_time = boundaries[-1]
    total_steps = int(round(total_time * config.rates.plant_hz))
    n_blocks = total_steps // sub

    lam_min_M, lam_max_M = mass_eigen_range(params, config.eigen_grid)

    rng = np.random.Generator(np.random.Philox(config.seed))
    fcfg = FeatureConfig(n=n, expanded=config.learner.expanded_features)
    net = NetworkParams.warm_start(fcfg, rng, config.learner.B_init,
                                   config.learner.D_init_diag)
    buffer = ReplayBuffer(config.learner.buffer_size, fcfg.size, n)

    observer = PortObserver(params, dt)
    controller = LhsController(params, config.gains, config.apf,
                               dt * sub, config.use_tanh)
    chi_est = ChiEstimator(int(round(config.chi_window_s
                                     * config.rates.plant_hz)))
    scheduler = GainScheduler(config.gains.Kd, lam_min_M, config.Td, dt,
                              config.freeze_timeout)

    state = np.concatenate([config.q0, config.p0, config.r0,
                            [config.theta0]])
    ws = K.make_ws(n)
    u = np.zeros(n)
    kcur = np.zeros(n)
    ktarget = np.zeros(n)
    c_val = 0.0
    eprev = np.zeros(n)
    kslew_alpha = dt / (config.gain_slew_tau + dt)
    tau_obs = np.zeros(n)
    X = np.empty(fcfg.size)
    grad_buf = np.empty(net.size)
    trapezoid = 1 if config.trapezoid else 0

    columns = log_columns(n)
    max_rows = total_steps // config.log_every + 2
    logbuf = np.zeros((max_rows, len(columns)))
    logmeta = np.zeros(2)   # [next_row, global_step]
    slow = np.zeros(8 + n)
    loss_val = 0.0
    err_b = 0.0
    err_d = 0.0
    clamp_total = 0
    t = 0.0
    t_wall = time.perf_counter()

    for blk in range(n_blocks):
        phase = int(phase_at(t, boundaries))
        q = state[:n]
        p = state[n:2 * n]
        theta0 = state[2 * n + 2]

        observer.measure_into(q, p, theta0, ws, tau_obs)
        v = ws[10].copy()   # qdot left by the observer

        chi = chi_est.update() if dac else 0.0
        alpha_d, alpha_d_dot = config.traj.eval(t)
        tau_r, s_vec, V_val, alpha, aerr, _, _, _, sing = K.lhs_step_ws(
            q, p, theta0, alpha_d, alpha_d_dot, config.gains.Kd,
            chi if dac else 0.0, controller._par, controller._mem,
            config.apf.q_lo, config.apf.q_hi, m_arr, i_arr, l_arr, off,
            controller._ws)
        if sing:
            controller.singular_events += 1

        events = EVENT_SINGULARITY if sing else 0

        if dac and config.learner.enabled and blk % learn_every == 0:
            K.feature_map(q, p, fcfg.mode, X)
            buffer.push(X, u, v, tau_obs)
            out = online_update(net, buffer, rng, config.learner.batch_size,
                                config.learner.lr, grad_buf,
                                config.learner.offset_rate)
            if out is not None:
                loss_val = out
            err_b, err_d = K.estimation_errors(
                net.theta, net.pfeat, 16, 8, n, X, q, p, phase)

        if dac and blk % gains_every == 0:
            K.feature_map(q, p, fcfg.mode, X)
            Bh, Dh, _ = forward(net, X)
            J0 = compute_J0(net, np.concatenate([q, p]), u.copy(), v)
            try:
                gs = scheduler.commit(t, Bh, np.diag(Dh), J0)
            except GainFreeze as exc:
                raise GainFreezeTimeout(
                    f"gain synthesis frozen since t={scheduler.freeze_since}"
                ) from exc
            if gs is not None:
                ktarget = gs.k.astype(float)
                c_val = gs.c
                if blk == 0:
                    kcur = ktarget.copy()
            else:
                events |= EVENT_GAIN_FREEZE

        if not dac:
            u = tau_r.copy()
        elif blk == 0:
            # bumpless integrator start: begin at the requested port so the
            # start-up transient does not inflate the chi window
            u = tau_r.copy()

        slow[0] = alpha
        slow[1] = alpha_d
        slow[2:2 + n] = s_vec
        slow[2 + n] = V_val
        slow[3 + n] = chi
        slow[4 + n] = c_val
        slow[5 + n] = loss_val
        slow[6 + n] = err_b
        slow[7 + n] = err_d

        t, status, clamps = K.inner_block(
            state, t, dt, sub, phase, u, kcur, ktarget, kslew_alpha,
            trapezoid, eprev, tau_r, tau_obs,
            observer.mem, observer.alpha, chi_est.win, chi_est.meta,
            m_arr, i_arr, l_arr, off, config.disturbance.step,
            config.disturbance.amp, config.disturbance.freq,
            logbuf, logmeta, config.log_every, slow, events, ws)
        clamp_total += clamps
        if status != 0:
            partial = RunLog(columns, logbuf[:int(logmeta[0])].copy())
            raise NumericAbort(
                f"non-finite state at t={t:.3f}: q={state[:n]}, "
                f"p={state[n:2 * n]}, u={u}", partial)

    wall = time.perf_counter() - t_wall
    rows = int(logmeta[0])
    summary = {
        "wall_clock_s": wall,
        "mode": config.mode,
        "seed": config.seed,
        "lam_min_M": lam_min_M,
        "lam_max_M": lam_max_M,
        "clamp_events": clamp_total,
        "singular_events": controller.singular_events,
        "freeze_events": scheduler.freeze_events,
    }
    if clamp_total:
        log.warning("dissipation clamped at zero in %d integrator stages",
                    clamp_total)
    return RunLog(columns, logbuf[:rows].copy(), summary)
