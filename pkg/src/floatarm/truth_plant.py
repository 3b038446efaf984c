"""Ground-truth actuation side of the simulated plant.

Maps the commanded input u through the true (uncertain, state-dependent)
input and dissipation matrices plus the external disturbance to the port
torque realized on the momentum dynamics. The controller never sees these
matrices; only the simulator and the metrics layer do.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels as K
from .dynamics import RobotParams, joint_velocity

log = logging.getLogger(__name__)


class Phase(IntEnum):
    """Scenario phases; FREE disables the actuation side entirely."""

    FREE = 0
    WARMUP = 1
    LINEAR = 2
    NONLINEAR = 3
    DISTURBED = 4


@dataclass(frozen=True)
class DisturbanceSpec:
    """Step plus sinusoid, active only in the DISTURBED phase."""

    step: np.ndarray
    amp: float = 0.05
    freq: float = 0.2  # Hz

    @staticmethod
    def default(n: int = 2) -> "DisturbanceSpec":
        step = np.array([0.2, -0.15]) if n == 2 else np.zeros(n)
        return DisturbanceSpec(step=step)


@dataclass(frozen=True)
class TruthModel:
    """Warm-up nominal matrices plus the disturbance profile."""

    n: int = 2
    disturbance_spec: DisturbanceSpec = None

    def __post_init__(self):
        if self.disturbance_spec is None:
            object.__setattr__(self, "disturbance_spec",
                               DisturbanceSpec.default(self.n))

    @property
    def B_nom(self) -> np.ndarray:
        return np.eye(self.n)

    @property
    def D_nom(self) -> np.ndarray:
        return 0.1 * np.eye(self.n)


def true_matrices(q, p, phase: Phase):
    """True (B, D) at the given state and phase.

    WARMUP returns the constant nominals; LINEAR adds the state-linear
    uncertainty terms; NONLINEAR/DISTURBED add the quadratic ones as well.
    Dissipation entries are floored at zero (with a logged warning) if the
    quadratic momentum term drives one negative.
    """
    q = np.asarray(q, float)
    p = np.asarray(p, float)
    if phase not in (Phase.FREE, Phase.WARMUP) and q.shape[0] != 2:
        raise ValueError("the shipped uncertainty model requires n = 2")
    B, D, clamped = K.truth_mats(q, p, int(phase))
    if clamped:
        log.warning("dissipation entry clamped at zero (p=%s, phase=%s)",
                    p, phase.name)
    return B, D


def disturbance(t: float, phase: Phase,
                spec: DisturbanceSpec | None = None) -> np.ndarray:
    """External joint disturbance d(t); zero outside the DISTURBED phase."""
    spec = spec or DisturbanceSpec.default()
    return K.disturbance_vec(float(t), int(phase), spec.step, spec.amp,
                             spec.freq)


def realized_port(u, q, p, t, phase: Phase, params: RobotParams,
                  theta0: float = 0.0,
                  spec: DisturbanceSpec | None = None) -> np.ndarray:
    """Port torque generated by the plant: tau = B u - D qdot + d(t)."""
    B, D = true_matrices(q, p, phase)
    qdot = joint_velocity(q, p, params, theta0)
    return B @ np.asarray(u, float) - D @ qdot + disturbance(t, phase, spec)
