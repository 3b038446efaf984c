"""Outer-loop control: sliding-surface attitude tracking with null-space
obstacle/joint-limit avoidance and a robustifying term bounded by the
online inner-loop error estimate.

The module-level functions are the reference implementations used by the
property tests; LhsController is the production path and delegates the
fused per-step computation to the compiled kernel (the two are
cross-checked in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import RobotParams

SINGULARITY_THRESHOLD = 1e-4
NUDOT_FILTER_TAU = 0.02  # s, first-order low-pass on the nu derivative
# Discrete outer-loop stability budget: total proportional gain (Kd plus
# the robust term's slope) stays below this fraction of lam_min(M)/dt.
ROBUST_SLOPE_MARGIN = 0.9


class DynamicSingularity(Exception):
    """Task row lost rank; no joint velocity realizes the task rate."""


@dataclass
class LhsGains:
    Kd: np.ndarray            # n x n, symmetric positive definite
    Lambda: float = 1.0       # 1/s, attitude error feedback
    eta: float = 0.1          # null-space descent gain
    epsilon: float = 0.2      # boundary-layer width of the tanh smoothing
    chi: float = 0.0          # N m, current inner-loop error bound

    def __post_init__(self):
        self.Kd = np.asarray(self.Kd, float)
        if np.max(np.abs(self.Kd - self.Kd.T)) > 1e-12 \
                or np.min(np.linalg.eigvalsh(self.Kd)) <= 0:
            raise ValueError("Kd must be symmetric positive definite")
        if self.Lambda <= 0 or self.epsilon <= 0:
            raise ValueError("Lambda and epsilon must be positive")


@dataclass
class ApfConfig:
    """Repulsive-potential shape: base-centered disc plus joint-limit walls."""

    obstacle_radius: float = 0.13
    influence_dist: float = 0.15
    q_lo: np.ndarray = field(default_factory=lambda: np.array([-2.6, -2.6]))
    q_hi: np.ndarray = field(default_factory=lambda: np.array([2.6, 2.6]))
    limit_margin: float = 0.2
    weight_obstacle: float = 0.02
    weight_limits: float = 0.5

    def __post_init__(self):
        self.q_lo = np.asarray(self.q_lo, float)
        self.q_hi = np.asarray(self.q_hi, float)
        if self.influence_dist <= self.obstacle_radius:
            raise ValueError("influence_dist must exceed obstacle_radius")
        if np.any(self.q_hi <= self.q_lo):
            raise ValueError("joint limit intervals are empty")


@dataclass
class SlidingState:
    """Per-step controller diagnostics."""

    alpha: float
    alpha_d: float
    alpha_d_dot: float
    alpha_err: float
    nu: np.ndarray
    nu_dot: np.ndarray
    s: np.ndarray
    V: float


def task_pseudoinverse(task_row: np.ndarray):
    """Moore-Penrose pseudoinverse of the 1xn task row and the null-space
    projector: Ddag = D^T/(D D^T), N = I - Ddag D."""
    D = np.asarray(task_row, float).reshape(-1)
    norm = float(np.linalg.norm(D))
    if norm <= SINGULARITY_THRESHOLD:
        raise DynamicSingularity(f"task row norm {norm:.3e} below threshold")
    Ddag = D / (norm * norm)
    Nproj = np.eye(D.shape[0]) - np.outer(Ddag, D)
    return Ddag, Nproj


def apf_potential(q, theta0, params: RobotParams, cfg: ApfConfig) -> float:
    """Scalar potential: high close to the base disc and the joint limits."""
    m, i, l, off = params.arrays()
    return float(K.apf_potential(
        np.asarray(q, float), float(theta0), l, off, cfg.obstacle_radius,
        cfg.influence_dist, cfg.weight_obstacle, cfg.q_lo, cfg.q_hi,
        cfg.limit_margin, cfg.weight_limits))


def apf_gradient(q, theta0, params: RobotParams, cfg: ApfConfig) -> np.ndarray:
    """Central-difference gradient of the potential over q."""
    m, i, l, off = params.arrays()
    return K.apf_gradient(
        np.asarray(q, float), float(theta0), l, off, cfg.obstacle_radius,
        cfg.influence_dist, cfg.weight_obstacle, cfg.q_lo, cfg.q_hi,
        cfg.limit_margin, cfg.weight_limits)


def reference_velocity(task_row, alpha_err, alpha_d_dot, gains: LhsGains,
                       xi) -> np.ndarray:
    """nu = Ddag (alpha_d_dot - Lambda alpha_err) + (I - Ddag D) xi."""
    Ddag, Nproj = task_pseudoinverse(task_row)
    return Ddag * (alpha_d_dot - gains.Lambda * alpha_err) \
        + Nproj @ np.asarray(xi, float)


def smc_torque(M, Cp, s, nu, nu_dot, gains: LhsGains, use_tanh: bool = True,
               slope_cap: float | None = None) -> np.ndarray:
    """Requested port: M nudot + C' nu - Kd s minus the robust term.

    slope_cap, when given, bounds the robust term's linear gain chi/eps by
    widening the boundary layer; the term magnitude stays <= chi either
    way.
    """
    s = np.asarray(s, float)
    tau = M @ np.asarray(nu_dot, float) + Cp @ np.asarray(nu, float) \
        - gains.Kd @ s
    if use_tanh:
        eps = gains.epsilon
        if slope_cap is not None:
            eps = max(eps, gains.chi / max(slope_cap, 1e-9))
        tau -= gains.chi * np.tanh(s / eps)
    else:
        norm = np.linalg.norm(s)
        if norm > 1e-12:
            tau -= gains.chi * s / norm
    return tau


def lyapunov_envelope(V0: float, t, dyn_bounds, gains: LhsGains):
    """Exponential bounds on the sliding-surface energy.

    dyn_bounds = (infimum, supremum) of eig(M) over the configuration
    grid. Returns (lower, upper) with lower <= upper for all t >= 0.
    """
    lam_min_M, lam_max_M = dyn_bounds
    w = np.linalg.eigvalsh(gains.Kd)
    t = np.asarray(t, float)
    lower = V0 * np.exp(-2.0 * w[-1] / lam_min_M * t)
    upper = V0 * np.exp(-2.0 * w[0] / lam_max_M * t)
    return lower, upper


class LhsController:
    """Stateful outer loop stepped at the LHS rate (single owner).

    Holds the backward-difference/low-pass memory for the reference
    acceleration and the hold state used across dynamic singularities.
    """

    def __init__(self, params: RobotParams, gains: LhsGains, apf: ApfConfig,
                 dt: float, use_tanh: bool = True):
        self.params = params
        self.gains = gains
        self.apf = apf
        self.dt = float(dt)
        self.use_tanh = use_tanh
        n = params.n
        self._mem = np.zeros(1 + 2 * n)   # [initialized, nu_prev, nudot_f]
        self._arrays = params.arrays()
        self._ws = K.make_ws(n)
        lam_kd_max = float(np.linalg.eigvalsh(gains.Kd)[-1])
        # packed static parameters of the kernel step
        self._par = np.array([
            gains.Lambda, gains.eta, gains.epsilon, SINGULARITY_THRESHOLD,
            self.dt, NUDOT_FILTER_TAU, lam_kd_max, ROBUST_SLOPE_MARGIN,
            1.0 if use_tanh else 0.0, apf.obstacle_radius,
            apf.influence_dist, apf.weight_obstacle, apf.limit_margin,
            apf.weight_limits])
        self.singular_events = 0

    def reset(self):
        self._mem[:] = 0.0
        self.singular_events = 0

    def step(self, q, p, theta0, alpha_d, alpha_d_dot, chi: float):
        """One control update; returns (tau_r, SlidingState, singular)."""
        m, i, l, off = self._arrays
        tau_r, s, V, alpha, aerr, nu, nudot, normD, sing = K.lhs_step_ws(
            np.asarray(q, float), np.asarray(p, float), theta0, alpha_d,
            alpha_d_dot, self.gains.Kd, chi, self._par, self._mem,
            self.apf.q_lo, self.apf.q_hi, m, i, l, off, self._ws)
        if sing:
            self.singular_events += 1
        state = SlidingState(alpha=alpha, alpha_d=alpha_d,
                             alpha_d_dot=alpha_d_dot, alpha_err=aerr,
                             nu=nu, nu_dot=nudot, s=s, V=V)
        return tau_r, state, bool(sing)
