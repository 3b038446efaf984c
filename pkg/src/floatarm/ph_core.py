"""Energy-based structural layer: interconnection/dissipation/input
matrices and the split of the momentum balance into a conservative flow
plus a single non-conservative port.

The port is the net generalized force entering the momentum dynamics; its
configuration block is zero by construction, so it is carried as the
n-vector tau everywhere past this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PSD_TOL = 1e-12


@dataclass(frozen=True)
class PhStructure:
    """Structure matrices of a port-based state-space model.

    J is built canonically ([[0, I], [-I, 0]]) for mechanical systems and
    is therefore exactly skew-symmetric; R must be symmetric PSD.
    """

    n: int
    J: np.ndarray
    R: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        twon = 2 * self.n
        if self.J.shape != (twon, twon):
            raise ValueError(f"J must be {twon}x{twon}")
        if self.R.shape != (twon, twon):
            raise ValueError(f"R must be {twon}x{twon}")
        if self.g.shape[0] != twon:
            raise ValueError(f"g must have {twon} rows")
        if np.max(np.abs(self.J + self.J.T)) != 0.0:
            raise ValueError("J must be exactly skew-symmetric")
        if np.max(np.abs(self.R - self.R.T)) > 0.0:
            raise ValueError("R must be symmetric")
        if np.min(np.linalg.eigvalsh(self.R)) < -PSD_TOL:
            raise ValueError("R must be positive semi-definite")


def mechanical_structure(n: int, D: np.ndarray | None = None,
                         B: np.ndarray | None = None) -> PhStructure:
    """Canonical mechanical structure with momentum-block dissipation D and
    input map B (both default to zero / identity on the momentum block)."""
    eye = np.eye(n)
    J = np.block([[np.zeros((n, n)), eye], [-eye, np.zeros((n, n))]])
    D = np.zeros((n, n)) if D is None else np.asarray(D, float)
    B = eye if B is None else np.asarray(B, float)
    R = np.block([[np.zeros((n, n)), np.zeros((n, n))],
                  [np.zeros((n, n)), 0.5 * (D + D.T)]])
    g = np.vstack([np.zeros((n, B.shape[1])), B])
    return PhStructure(n=n, J=J, R=R, g=g)


@dataclass(frozen=True)
class PortVariables:
    """Non-conservative generalized force on the momentum dynamics.

    tau is the momentum-block force; the configuration block of the full
    port vector is identically zero and only materialized on demand. u and
    d are the actuation input and disturbance realized at the same instant,
    when known.
    """

    tau: np.ndarray
    u: np.ndarray | None = None
    d: np.ndarray | None = None

    @property
    def Pi(self) -> np.ndarray:
        """Full 2n port vector [0; tau]."""
        return np.concatenate([np.zeros_like(self.tau), self.tau])


def decompose(state_derivative: np.ndarray, hamiltonian_gradient: np.ndarray,
              structure: PhStructure) -> PortVariables:
    """Extract the port from a state derivative: Pi = xdot - J grad(H).

    The momentum block equals pdot + dH/dq; the configuration block must
    vanish for consistent inputs (qdot = dH/dp) and is checked against
    zero at solver precision.
    """
    twon = 2 * structure.n
    xdot = np.asarray(state_derivative, float)
    gH = np.asarray(hamiltonian_gradient, float)
    if xdot.shape != (twon,) or gH.shape != (twon,):
        raise ValueError(f"expected {twon}-vectors, got {xdot.shape} and {gH.shape}")
    Pi = xdot - structure.J @ gH
    n = structure.n
    scale = max(1.0, float(np.max(np.abs(xdot))), float(np.max(np.abs(gH))))
    if np.max(np.abs(Pi[:n])) > 1e-9 * scale:
        raise ValueError("configuration block of the port is nonzero: "
                         "qdot and dH/dp are inconsistent")
    return PortVariables(tau=Pi[n:])


def power_balance(qdot: np.ndarray, port: PortVariables) -> float:
    """Instantaneous power delivered through the port: qdot . tau [W].

    Its time integral matches H(t) - H(0) along any trajectory.
    """
    return float(np.dot(np.asarray(qdot, float), port.tau))
