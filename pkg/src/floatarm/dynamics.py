"""Planar free-floating manipulator dynamics.

Kinematics of an n-link chain on an unactuated base, the zero-momentum
constraint and the reduced Jacobians it induces, the reduced mass and
Coriolis matrices, and the kinetic-energy Hamiltonian with its exact
configuration gradient. Everything is a pure function of value inputs;
heavy lifting is delegated to the compiled kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class NearSingularBase(Exception):
    """Locked-inertia solve failed; should be unreachable for valid params."""


@dataclass(frozen=True)
class RobotParams:
    """Per-body (mass, length, inertia) triples, base first.

    Links are uniform rods with COM at midpoint; joint 1 sits at
    mount_offset from the base COM, joint k+1 at the distal end of link k,
    and the end-effector frame at the distal end of the last link.
    """

    masses: np.ndarray      # kg, bodies 0..N
    lengths: np.ndarray     # m
    inertias: np.ndarray    # kg m^2, about each body COM
    mount_offset: float     # m, base COM to joint-1 axis

    def __post_init__(self):
        object.__setattr__(self, "masses", np.asarray(self.masses, float))
        object.__setattr__(self, "lengths", np.asarray(self.lengths, float))
        object.__setattr__(self, "inertias", np.asarray(self.inertias, float))
        if not (self.masses.shape == self.lengths.shape == self.inertias.shape):
            raise ValueError("masses, lengths, inertias must have equal length")
        if np.any(self.masses <= 0) or np.any(self.inertias <= 0) \
                or np.any(self.lengths <= 0):
            raise ValueError("body parameters must be positive")

    @property
    def n(self) -> int:
        """Joint count (bodies minus the base)."""
        return self.masses.shape[0] - 1

    def arrays(self):
        return self.masses, self.inertias, self.lengths, self.mount_offset


def shipped_params() -> RobotParams:
    """The 2-DOF scenario: base (2, 0.1225, 0.02), links (1, 0.3464, 0.01)."""
    return RobotParams(
        masses=np.array([2.0, 1.0, 1.0]),
        lengths=np.array([0.1225, 0.3464, 0.3464]),
        inertias=np.array([0.02, 0.01, 0.01]),
        mount_offset=0.1225,
    )


@dataclass
class SystemState:
    """Generalized coordinates/momenta plus the integrated base pose."""

    q: np.ndarray
    p: np.ndarray
    r0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta0: float = 0.0
    t: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.q.copy(), self.p.copy(), self.r0.copy(),
                           self.theta0, self.t)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.q, self.p, self.r0, [self.theta0]])

    @staticmethod
    def unpack(vec: np.ndarray, t: float = 0.0) -> "SystemState":
        n = (vec.shape[0] - 3) // 2
        return SystemState(vec[:n].copy(), vec[n:2 * n].copy(),
                           vec[2 * n:2 * n + 2].copy(), float(vec[2 * n + 2]), t)


@dataclass(frozen=True)
class KinematicsBundle:
    """Constraint matrices, per-body reduced Jacobians, and the task row."""

    Hq0: np.ndarray            # 3x3
    Hq: np.ndarray             # 3xn
    gjm_per_link: np.ndarray   # (n+1, 3, n), rows xdot, ydot, omega
    task_row: np.ndarray       # (n,), alphadot = task_row @ qdot


@dataclass(frozen=True)
class DynamicsMatrices:
    M: np.ndarray        # n x n
    dMdq: np.ndarray     # (n, n, n), dMdq[i] = dM/dq_i
    C: np.ndarray        # Coriolis in momentum coordinates, C'(q, p)


def constraint_matrices(q, theta0, params: RobotParams):
    """Momentum-conservation constraint (Hq0, Hq): Hq0 qdot0 + Hq qdot = 0."""
    m, i, l, off = params.arrays()
    return K.constraint_mats(np.asarray(q, float), float(theta0), m, i, l, off)


def base_velocity(q, qd, theta0, params: RobotParams):
    """Base rates (r0dot, omega0) that zero the total momentum."""
    m, i, l, off = params.arrays()
    qd0 = K.base_rates(np.asarray(q, float), np.asarray(qd, float),
                       float(theta0), m, i, l, off)
    if not np.all(np.isfinite(qd0)):
        raise NearSingularBase("base momentum matrix is singular")
    return qd0[:2], qd0[2]


def generalized_jacobian(q, theta0, params: RobotParams) -> KinematicsBundle:
    """Reduced Jacobians embedding the momentum constraint, plus the
    attitude task row (which already carries the base reaction)."""
    m, i, l, off = params.arrays()
    q = np.asarray(q, float)
    Hq0, Hq = K.constraint_mats(q, float(theta0), m, i, l, off)
    stack = K.gjm_stack(q, float(theta0), m, i, l, off)
    return KinematicsBundle(Hq0=Hq0, Hq=Hq, gjm_per_link=stack,
                            task_row=stack[-1, 2, :].copy())


def mass_matrix(q, theta0, params: RobotParams) -> np.ndarray:
    m, i, l, off = params.arrays()
    return K.mass_only(np.asarray(q, float), float(theta0), m, i, l, off)


def mass_gradient(q, theta0, params: RobotParams) -> np.ndarray:
    """dM/dq by central differences (step 1e-6)."""
    m, i, l, off = params.arrays()
    return K.dmdq(np.asarray(q, float), float(theta0), m, i, l, off)


def coriolis_matrix(q, qd, params: RobotParams, theta0: float = 0.0):
    """C(q, qdot) from Christoffel symbols of the reduced mass matrix."""
    m, i, l, off = params.arrays()
    dM = K.dmdq(np.asarray(q, float), float(theta0), m, i, l, off)
    return K.coriolis_from_dm(dM, np.asarray(qd, float))


def coriolis_prime(q, p, params: RobotParams, theta0: float = 0.0):
    """Momentum-coordinates Coriolis matrix C'(q, p) = C(q, M^{-1} p)."""
    m, i, l, off = params.arrays()
    q = np.asarray(q, float)
    M = K.mass_only(q, float(theta0), m, i, l, off)
    v = K.spd_solve(M, np.asarray(p, float))
    dM = K.dmdq(q, float(theta0), m, i, l, off)
    return K.coriolis_from_dm(dM, v)


def dynamics_matrices(q, p, params: RobotParams,
                      theta0: float = 0.0) -> DynamicsMatrices:
    """Mass matrix, its configuration gradient, and C'(q, p) in one pass."""
    m, i, l, off = params.arrays()
    q = np.asarray(q, float)
    M = K.mass_only(q, float(theta0), m, i, l, off)
    dM = K.dmdq(q, float(theta0), m, i, l, off)
    v = K.spd_solve(M, np.asarray(p, float))
    return DynamicsMatrices(M=M, dMdq=dM, C=K.coriolis_from_dm(dM, v))


def hamiltonian(q, p, params: RobotParams, theta0: float = 0.0) -> float:
    """Kinetic energy H(q, p) = p^T M^{-1}(q) p / 2."""
    m, i, l, off = params.arrays()
    return float(K.hamiltonian_value(np.asarray(q, float),
                                     np.asarray(p, float), float(theta0),
                                     m, i, l, off))


def dH_dq(q, p, params: RobotParams, theta0: float = 0.0) -> np.ndarray:
    """Exact configuration gradient -(1/2) v^T (dM/dq_i) v, v = M^{-1} p."""
    m, i, l, off = params.arrays()
    q = np.asarray(q, float)
    M = K.mass_only(q, float(theta0), m, i, l, off)
    v = K.spd_solve(M, np.asarray(p, float))
    dM = K.dmdq(q, float(theta0), m, i, l, off)
    return K.dh_dq_from_dm(dM, v)


def joint_velocity(q, p, params: RobotParams, theta0: float = 0.0):
    """qdot = M^{-1}(q) p."""
    m, i, l, off = params.arrays()
    M = K.mass_only(np.asarray(q, float), float(theta0), m, i, l, off)
    return K.spd_solve(M, np.asarray(p, float))


def end_effector_attitude(q, theta0) -> float:
    """alpha = theta0 + sum(q): absolute orientation of the last link."""
    return float(theta0 + np.sum(q))


def momentum_residual(q, qd, theta0, params: RobotParams):
    """Normalized brute-force (|h_L|, |h_A|) with base rates solved from
    the constraint; both should vanish to solver precision."""
    m, i, l, off = params.arrays()
    return K.momentum_residual(np.asarray(q, float), np.asarray(qd, float),
                               float(theta0), m, i, l, off)


def mass_eigen_range(params: RobotParams, grid: int = 100):
    """(inf, sup) of eig(M) over a grid q in [-pi, pi]^2 (n = 2 chains)."""
    if params.n != 2:
        raise ValueError("eigenvalue sweep is defined for n = 2")
    m, i, l, off = params.arrays()
    lo, hi = K.mass_eig_sweep(grid, m, i, l, off)
    return float(lo), float(hi)
