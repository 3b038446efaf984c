"""Online two-branch estimator of the actuation map.

Two small MLPs share a state-feature input: one emits the full input
matrix (reshaped row-major from a linear head), the other the diagonal of
the dissipation matrix through a softplus head, which keeps every learned
dissipation entry positive. A constant offset head absorbs the
low-frequency part of the external disturbance; without it a persistent
disturbance forces the input-matrix estimate singular (the fit
B u = B_true u + d has a null direction at the rejection equilibrium),
which would permanently freeze the gain synthesis. Training is plain reverse-mode backprop with
ADAM on a mean-squared port-prediction loss; all of it runs inside one
compiled kernel so the 100 Hz cadence costs microseconds.

The estimator is warm-started exactly at the nominal matrices: head
weights start at zero with head biases set to the nominal values, so the
initial output is state-independent and equal to the nominal model while
the randomly initialized hidden layers still propagate gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

HIDDEN1 = 16
HIDDEN2 = 8
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
OFFSET_TRACK_RATE = 0.05   # offset head: fraction of mean residual/update

CHECKPOINT_VERSION = 1


class TrainingDiverged(Exception):
    """Non-finite estimator output; training halts and gains freeze."""


@dataclass(frozen=True)
class FeatureConfig:
    """State-feature map: normalized raw state, optionally expanded with
    degree-2 products and sin/cos of the joint angles."""

    n: int = 2
    expanded: bool = False

    @property
    def size(self) -> int:
        base = 2 * self.n
        if not self.expanded:
            return base
        return base + base * (base + 1) // 2 + 2 * self.n

    @property
    def mode(self) -> int:
        return 1 if self.expanded else 0


def feature_vector(q, p, cfg: FeatureConfig) -> np.ndarray:
    """X(x): joint angles scaled by pi, momenta by 2 (load-time constants)."""
    out = np.empty(cfg.size)
    K.feature_map(np.asarray(q, float), np.asarray(p, float), cfg.mode, out)
    return out


def _layer_sizes(pfeat: int, n: int):
    nsq = n * n
    return [
        ("W1_B", (HIDDEN1, pfeat)), ("b1_B", (HIDDEN1,)),
        ("W2_B", (HIDDEN2, HIDDEN1)), ("b2_B", (HIDDEN2,)),
        ("Wh_B", (nsq, HIDDEN2)), ("bh_B", (nsq,)),
        ("W1_D", (HIDDEN1, pfeat)), ("b1_D", (HIDDEN1,)),
        ("W2_D", (HIDDEN2, HIDDEN1)), ("b2_D", (HIDDEN2,)),
        ("Wh_D", (n, HIDDEN2)), ("bh_D", (n,)),
        ("off_d", (n,)),
    ]


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


class NetworkParams:
    """Flat parameter vector with ADAM state and named views per layer."""

    def __init__(self, feature_cfg: FeatureConfig, theta: np.ndarray):
        self.features = feature_cfg
        self.n = feature_cfg.n
        self.pfeat = feature_cfg.size
        sizes = _layer_sizes(self.pfeat, self.n)
        total = sum(int(np.prod(shape)) for _, shape in sizes)
        if theta.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {theta.shape}")
        self.theta = theta
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.step = 0

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def views(self) -> dict:
        """Named (reshaped) views into the flat parameter vector."""
        out = {}
        off = 0
        for name, shape in _layer_sizes(self.pfeat, self.n):
            k = int(np.prod(shape))
            out[name] = self.theta[off:off + k].reshape(shape)
            off += k
        return out

    @staticmethod
    def warm_start(feature_cfg: FeatureConfig, rng: np.random.Generator,
                   B_init: np.ndarray | None = None,
                   D_init_diag: np.ndarray | None = None) -> "NetworkParams":
        """Hidden weights ~ uniform(+-1/sqrt(fan_in)) * 0.1, hidden biases
        and head weights zero, head biases at the nominal matrices."""
        n = feature_cfg.n
        pfeat = feature_cfg.size
        if B_init is None:
            B_init = np.eye(n)
        if D_init_diag is None:
            D_init_diag = 0.1 * np.ones(n)
        pieces = []
        for name, shape in _layer_sizes(pfeat, n):
            if name.startswith("W1"):
                lim = 0.1 / math.sqrt(pfeat)
                pieces.append(rng.uniform(-lim, lim, size=shape).ravel())
            elif name.startswith("W2"):
                lim = 0.1 / math.sqrt(HIDDEN1)
                pieces.append(rng.uniform(-lim, lim, size=shape).ravel())
            elif name == "bh_B":
                pieces.append(np.asarray(B_init, float).ravel())
            elif name == "bh_D":
                pieces.append(np.array([softplus_inverse(d)
                                        for d in D_init_diag]))
            else:
                # hidden biases, head weights, and the port-offset head
                # start at zero
                pieces.append(np.zeros(int(np.prod(shape))))
        return NetworkParams(feature_cfg, np.concatenate(pieces))

    def save(self, path):
        np.savez(path, version=CHECKPOINT_VERSION, n=self.n,
                 expanded=int(self.features.expanded), theta=self.theta,
                 m=self.m, v=self.v, step=self.step)

    @staticmethod
    def load(path) -> "NetworkParams":
        data = np.load(path)
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data['version']}")
        cfg = FeatureConfig(n=int(data["n"]), expanded=bool(int(data["expanded"])))
        net = NetworkParams(cfg, data["theta"].copy())
        net.m = data["m"].copy()
        net.v = data["v"].copy()
        net.step = int(data["step"])
        return net


def forward(net: NetworkParams, X: np.ndarray):
    """Estimate (B_hat, D_hat) at the feature vector X.

    D_hat is returned as the full diagonal matrix; caches carries the
    learned dissipation diagonal and the constant port-offset head that
    absorbs the low-frequency disturbance.
    """
    Bhat, Ddiag, offset = K.net_forward(net.theta, net.pfeat, HIDDEN1,
                                        HIDDEN2, net.n, np.asarray(X, float))
    if not (np.all(np.isfinite(Bhat)) and np.all(np.isfinite(Ddiag))):
        raise TrainingDiverged("estimator produced non-finite output")
    caches = {"D_diag": Ddiag, "offset": offset}
    return Bhat, np.diag(Ddiag), caches


@dataclass
class ReplaySample:
    X: np.ndarray
    u: np.ndarray
    qdot: np.ndarray
    tau_obs: np.ndarray
    t: float


class ReplayBuffer:
    """Fixed-capacity FIFO ring of training tuples."""

    def __init__(self, capacity: int, pfeat: int, n: int):
        self.capacity = capacity
        self.X = np.zeros((capacity, pfeat))
        self.u = np.zeros((capacity, n))
        self.qd = np.zeros((capacity, n))
        self.tau = np.zeros((capacity, n))
        self._pos = 0
        self._fill = 0

    def __len__(self) -> int:
        return self._fill

    def push(self, X, u, qd, tau):
        i = self._pos
        self.X[i] = X
        self.u[i] = u
        self.qd[i] = qd
        self.tau[i] = tau
        self._pos = (i + 1) % self.capacity
        self._fill = min(self._fill + 1, self.capacity)

    def sample_indices(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return rng.integers(0, self._fill, size=k)

    def sample(self, rng: np.random.Generator, k: int):
        idx = self.sample_indices(rng, k)
        return self.X[idx], self.u[idx], self.qd[idx], self.tau[idx]


def loss_and_gradients(net: NetworkParams, Xb, ub, qdb, taub):
    """Mean squared port-prediction error over the batch and its gradient
    with respect to the flat parameter vector (reverse mode)."""
    Xb = np.atleast_2d(np.asarray(Xb, float))
    ub = np.atleast_2d(np.asarray(ub, float))
    qdb = np.atleast_2d(np.asarray(qdb, float))
    taub = np.atleast_2d(np.asarray(taub, float))
    if Xb.shape[0] == 0:
        raise ValueError("batch is empty")
    grad = np.empty_like(net.theta)
    idx = np.arange(Xb.shape[0], dtype=np.int64)
    loss = K.net_loss_grad_idx(net.theta, net.pfeat, HIDDEN1, HIDDEN2, net.n,
                               Xb, ub, qdb, taub, idx, grad)
    return float(loss), grad


def batch_loss(net: NetworkParams, Xb, ub, qdb, taub) -> float:
    """Loss only (used by the finite-difference gradient checks)."""
    loss, _ = loss_and_gradients(net, Xb, ub, qdb, taub)
    return loss


def adam_step(net: NetworkParams, grads: np.ndarray, lr: float = 1e-3):
    """Standard ADAM update with bias correction, in place."""
    net.step = K.adam_apply(net.theta, net.m, net.v, grads, net.step,
                            lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    return net


def online_update(net: NetworkParams, buffer: ReplayBuffer,
                  rng: np.random.Generator, batch_size: int = 32,
                  lr: float = 1e-3, grad_buf: np.ndarray | None = None,
                  offset_rate: float = OFFSET_TRACK_RATE):
    """One ADAM step on a uniformly drawn mini-batch; skipped (returns
    None) until the buffer holds at least batch_size samples. The port
    offset head tracks the batch-mean residual at offset_rate instead of
    taking ADAM steps."""
    if len(buffer) < batch_size:
        return None
    idx = buffer.sample_indices(rng, batch_size)
    if grad_buf is None:
        grad_buf = np.empty_like(net.theta)
    loss, net.step = K.learner_update(
        net.theta, net.m, net.v, net.step, buffer.X, buffer.u, buffer.qd,
        buffer.tau, idx, net.pfeat, HIDDEN1, HIDDEN2, net.n, lr,
        ADAM_BETA1, ADAM_BETA2, ADAM_EPS, offset_rate, grad_buf)
    if not math.isfinite(loss):
        raise TrainingDiverged("non-finite training loss")
    return float(loss)
