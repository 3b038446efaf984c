"""Fast inner loop: port observation from measured motion, decentralized
integral control of the port error, and stability-constrained gain
synthesis from the current estimator snapshot.

Gain synthesis follows the modal route: the estimated input matrix is
diagonalized, every disturbance channel's modal input gain is collected,
and drift of those gains between commits enters the stability inequality
for the shared constant c as a worst-case multiplicative factor. Gains
are recomputed at 1 Hz and slewed at the inner rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import RobotParams
from .learner import NetworkParams, FeatureConfig, feature_vector

OBSERVER_CUTOFF_HZ = 50.0
CHI_DECAY = 0.995
CHI_FLOOR = 1e-4
DIC_DET_TOL = 1e-8
BETA_CAP = math.exp(10.0)
COND_LIMIT = 1e8
SAFETY = 1.1
J0_FD_STEP = 1e-5
# Discrete-loop guard: the per-channel loop gain k_p * Re(lambda_true) * dt
# must stay below the stability bound of the sampled loop (~14 with the
# 50 Hz observer low-pass in it). True eigenvalues reach ~1.5 under the
# shipped uncertainty, so capping k_p * dt at 4 leaves a wide margin while
# letting the stability inequality set the gains in nominal operation.
# A biased estimate with a near-zero eigenvalue would otherwise demand an
# unbounded k_p; the continuous-time design has no upper gain limit, the
# sampled implementation does.
MAX_K_DT = 4.0


class GainFreeze(Exception):
    """Gain synthesis rejected; the caller keeps the previous gains."""


@dataclass
class RhsLoopState:
    """Inner-loop bookkeeping at one instant."""

    tau_req: np.ndarray
    tau_obs: np.ndarray
    u: np.ndarray

    @property
    def e_tau(self) -> np.ndarray:
        return self.tau_req - self.tau_obs


class PortObserver:
    """Reconstructs the realized port from measured q, qdot.

    Joint accelerations are estimated by a one-step difference of qdot
    followed by a first-order low-pass at OBSERVER_CUTOFF_HZ; q and qdot
    are taken as exact measurements.
    """

    def __init__(self, params: RobotParams, dt: float,
                 cutoff_hz: float = OBSERVER_CUTOFF_HZ):
        self.params = params
        self.dt = float(dt)
        tau_f = 1.0 / (2.0 * math.pi * cutoff_hz)
        self.alpha = self.dt / (tau_f + self.dt)
        self._mem = np.zeros(1 + 2 * params.n)
        self._arrays = params.arrays()

    @property
    def mem(self) -> np.ndarray:
        return self._mem

    def reset(self):
        self._mem[:] = 0.0

    def measure(self, q, p, theta0: float = 0.0):
        """Returns (tau_obs, qdot) and advances the filter state."""
        m, i, l, off = self._arrays
        return K.observer_step(np.asarray(q, float), np.asarray(p, float),
                               self._mem, self.dt, self.alpha, m, i, l, off,
                               float(theta0))

    def measure_into(self, q, p, theta0, ws, tau_out):
        """Hot-path variant writing into tau_out; qdot is left in the
        workspace velocity slot."""
        m, i, l, off = self._arrays
        K.observer_ws(q, p, self._mem, self.dt, self.alpha, m, i, l, off,
                      theta0, ws, tau_out)


def integrator_step(u: np.ndarray, e_tau: np.ndarray, k: np.ndarray,
                    dt_inner: float, trapezoid: bool = False,
                    e_prev: np.ndarray | None = None) -> np.ndarray:
    """Per-channel integral update u_i += k_i e_i dt (no cross-coupling)."""
    e = np.asarray(e_tau, float)
    if not np.all(np.isfinite(e)):
        raise FloatingPointError("non-finite port error; safe-stop")
    if trapezoid:
        if e_prev is None:
            e_prev = np.zeros_like(e)
        return u + k * 0.5 * (e + e_prev) * dt_inner
    return u + k * e * dt_inner


def estimate_chi(chi_prev: float, window_max: float,
                 decay: float = CHI_DECAY, floor: float = CHI_FLOOR) -> float:
    """Robustness bound: running max of |e_tau| over the window, decayed
    per outer step when no new maximum arrives, floored at a minimum."""
    return max(window_max, chi_prev * decay, floor)


class ChiEstimator:
    """Owns the 1 s ring buffer of |e_tau| written by the inner loop."""

    def __init__(self, window: int, floor: float = CHI_FLOOR,
                 decay: float = CHI_DECAY):
        self.win = np.zeros(window)
        self.meta = np.zeros(2)   # [write_pos, fill]
        self.floor = floor
        self.decay = decay
        self.chi = floor

    def update(self) -> float:
        fill = int(self.meta[1])
        wmax = float(np.max(self.win[:fill])) if fill else 0.0
        self.chi = estimate_chi(self.chi, wmax, self.decay, self.floor)
        return self.chi


@dataclass
class GainSynthesis:
    """Committed gain-synthesis point."""

    B0: np.ndarray
    D0: np.ndarray                 # diagonal entries
    J0: np.ndarray                 # n x 2n state sensitivity
    eigvals: np.ndarray            # complex, sorted
    T: np.ndarray                  # eigenvector matrix (columns)
    Gamma: tuple                   # three channel families of modal gains
    beta: float
    c: float
    k: np.ndarray                  # per-channel integrator gains
    Td: float
    sigma_rhs: float
    T0: float
    lam_bar_lhs: float
    separation_ok: bool = True     # sigma_rhs > Td * lam_bar_lhs
    k_capped: bool = False


def _sorted_eig(B0: np.ndarray):
    w, T = np.linalg.eig(B0)
    order = np.lexsort((w.imag, w.real))
    return w[order], T[:, order]


def mode_gains(Tinv: np.ndarray, d_diag: np.ndarray, J0: np.ndarray):
    """The three modal input-gain families: direct reference/disturbance,
    velocity (scaled by the dissipation diagonal), and state-sensitivity."""
    fam1 = Tinv.copy()
    fam2 = Tinv * d_diag[np.newaxis, :]
    fam3 = Tinv @ J0
    return fam1, fam2, fam3


def mode_analysis(current, nominal):
    """Worst-case multiplicative drift of the modal gains.

    current/nominal are (B0, D0_diag, J0) triples; the nominal one is the
    last committed synthesis point. Returns (Gamma_current, beta) where
    beta >= 1. Ill-conditioned eigenvectors fall back to the cap.
    """
    Bc, Dc, Jc = current
    Bn, Dn, Jn = nominal
    wc, Tc = _sorted_eig(np.asarray(Bc, float))
    wn, Tn = _sorted_eig(np.asarray(Bn, float))
    if np.linalg.cond(Tc) > COND_LIMIT or np.linalg.cond(Tn) > COND_LIMIT:
        gamma = mode_gains(np.linalg.pinv(Tc), np.asarray(Dc, float),
                           np.asarray(Jc, float))
        return gamma, BETA_CAP
    gam_c = mode_gains(np.linalg.inv(Tc), np.asarray(Dc, float),
                       np.asarray(Jc, float))
    gam_n = mode_gains(np.linalg.inv(Tn), np.asarray(Dn, float),
                       np.asarray(Jn, float))
    n = Tc.shape[0]
    beta = 1.0
    for fc, fn in zip(gam_c, gam_n):
        # products T_ip Gamma_pj are eigenvector-normalization invariant
        prod_c = np.abs(Tc[:, :, np.newaxis] * fc[np.newaxis, :, :])
        prod_n = np.abs(Tn[:, :, np.newaxis] * fn[np.newaxis, :, :])
        tol = 1e-12 * max(1.0, float(prod_n.max()))
        mask = prod_n > tol
        if np.any(mask):
            beta = max(beta, float(np.max(prod_c[mask] / prod_n[mask])))
    return gam_c, min(beta, BETA_CAP)


def synthesize_gains(B_hat: np.ndarray, D_hat_diag: np.ndarray,
                     J_hat: np.ndarray, Kd: np.ndarray,
                     lam_min_M_inf: float, Td: float, beta_hat: float,
                     dt_inner: float | None = None,
                     safety: float = SAFETY) -> GainSynthesis:
    """Integrator gains satisfying the closed-loop stability inequality.

    c = safety * 2 Td^2 (lam_max(Kd)/lam_inf(M)) (1 + ln(beta)/5) and
    k_p = c / Re(lambda_p); a complex-conjugate eigenvalue pair shares one
    gain through its common real part. Raises GainFreeze on a singular
    estimated input matrix (no decentralized integral controllability),
    on a non-positive-real eigenvalue, or when c would violate the
    discrete-loop guard.
    """
    B0 = np.asarray(B_hat, float)
    if abs(np.linalg.det(B0)) < DIC_DET_TOL:
        raise GainFreeze("estimated input matrix is singular (no DIC)")
    w, T = _sorted_eig(B0)
    if np.any(w.real <= 0.0):
        raise GainFreeze(f"eigenvalue with non-positive real part: {w}")
    beta = min(max(float(beta_hat), 1.0), BETA_CAP)
    lam_kd_max = float(np.linalg.eigvalsh(np.asarray(Kd, float))[-1])
    lam_bar_lhs = 2.0 * lam_kd_max / lam_min_M_inf
    c_min = Td * Td * lam_bar_lhs * (1.0 + math.log(beta) / 5.0)
    c = safety * c_min
    k = c / w.real
    capped = False
    if dt_inner is not None:
        k_cap = MAX_K_DT / dt_inner
        if np.any(k > k_cap):
            k = np.minimum(k, k_cap)
            capped = True
    sigma_rhs = float(np.min(k * w.real))
    T0 = 5.0 / (Td * lam_bar_lhs)
    separation_ok = sigma_rhs > Td * lam_bar_lhs
    gamma = mode_gains(np.linalg.inv(T), np.asarray(D_hat_diag, float),
                       np.asarray(J_hat, float))
    return GainSynthesis(B0=B0, D0=np.asarray(D_hat_diag, float),
                         J0=np.asarray(J_hat, float), eigvals=w, T=T,
                         Gamma=gamma, beta=beta, c=c, k=k, Td=Td,
                         sigma_rhs=sigma_rhs, T0=T0,
                         lam_bar_lhs=lam_bar_lhs,
                         separation_ok=separation_ok, k_capped=capped)


def compute_J0(net: NetworkParams, x0: np.ndarray, u0: np.ndarray,
               qd0: np.ndarray) -> np.ndarray:
    """Sensitivity of the estimated port defect to the state, by central
    differences over x of x -> D_hat(x) qd0 - B_hat(x) u0 (step 1e-5)."""
    from .learner import forward

    n = u0.shape[0]
    x0 = np.asarray(x0, float)
    J0 = np.zeros((n, x0.shape[0]))
    h = J0_FD_STEP

    def f(x):
        X = feature_vector(x[:n], x[n:], net.features)
        Bh, Dh, _ = forward(net, X)
        return np.diag(Dh) * qd0 - Bh @ u0

    for j in range(x0.shape[0]):
        xp = x0.copy()
        xp[j] += h
        fp = f(xp)
        xp[j] -= 2 * h
        fm = f(xp)
        J0[:, j] = (fp - fm) / (2.0 * h)
    return J0


class GainScheduler:
    """Commits gain syntheses at the slow cadence and tracks freezes.

    The nominal modal point for the drift factor is the last committed
    synthesis; on the first commit the current estimates are their own
    nominal, so beta = 1 there by construction.
    """

    def __init__(self, Kd: np.ndarray, lam_min_M_inf: float, Td: float,
                 dt_inner: float, freeze_timeout: float = 10.0):
        self.Kd = np.asarray(Kd, float)
        self.lam_min_M = float(lam_min_M_inf)
        self.Td = float(Td)
        self.dt_inner = float(dt_inner)
        self.freeze_timeout = freeze_timeout
        self.nominal = None          # (B0, D0_diag, J0)
        self.last: GainSynthesis | None = None
        self.freeze_since: float | None = None
        self.freeze_events = 0

    def commit(self, t: float, B0, D0_diag, J0):
        """Attempt a synthesis at time t; returns the new GainSynthesis or
        None if frozen (previous gains stay active). Raises GainFreeze
        once a freeze persists past the timeout."""
        current = (np.asarray(B0, float), np.asarray(D0_diag, float),
                   np.asarray(J0, float))
        nominal = self.nominal if self.nominal is not None else current
        try:
            _, beta = mode_analysis(current, nominal)
            gs = synthesize_gains(current[0], current[1], current[2],
                                  self.Kd, self.lam_min_M, self.Td, beta,
                                  dt_inner=self.dt_inner)
        except GainFreeze:
            self.freeze_events += 1
            if self.freeze_since is None:
                self.freeze_since = t
            elif t - self.freeze_since > self.freeze_timeout:
                raise
            return None
        self.freeze_since = None
        self.nominal = current
        self.last = gs
        return gs
