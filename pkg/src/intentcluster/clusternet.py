"""Two-layer clustering projection with exact analytic gradients.

The map is I = Dropout(tanh(E W1^T)) W2 with no bias terms.  W1 is (H, H),
W2 is (H, k); rows of E are input embeddings, rows of I are k-dimensional
intent representations.  Dropout is inverted (survivors scaled by
1/(1-rate)) so eval mode is the identity.  All arithmetic is float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import rng_from
from .errors import NonFiniteGradientError

_MAGIC_CKPT = b"CDAC"


@dataclass
class ClusterNetParams:
    W1: np.ndarray  # (H, H)
    W2: np.ndarray  # (H, k)
    dropout_rate: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.W1.ndim != 2 or self.W1.shape[0] != self.W1.shape[1]:
            raise ValueError("W1 must be square (H x H)")
        if self.W2.ndim != 2 or self.W2.shape[0] != self.W1.shape[0]:
            raise ValueError("W2 must be (H x k) with matching H")
        if self.W2.shape[1] < 2:
            raise ValueError("cluster count k must be >= 2")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError("mode must be 'train' or 'eval'")

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.W2.shape[1]

    def eval_view(self) -> "ClusterNetParams":
        """Same weights, eval mode (shared arrays, not a copy)."""
        return ClusterNetParams(self.W1, self.W2, self.dropout_rate, "eval")


@dataclass
class ForwardCache:
    E: np.ndarray
    tanh_out: np.ndarray
    dropped: np.ndarray  # tanh_out after dropout, the input to W2
    mask: np.ndarray | None  # None in eval mode
    W1: np.ndarray
    W2: np.ndarray


@dataclass
class Gradients:
    dW1: np.ndarray
    dW2: np.ndarray
    dE: np.ndarray


def init_params(H: int, k: int, seed: int, dropout_rate: float = 0.1) -> ClusterNetParams:
    """Symmetric uniform init with bound sqrt(6 / (fan_in + fan_out))."""
    if H < 1 or k < 2:
        raise ValueError("need H >= 1 and k >= 2")
    rng = rng_from(seed)
    b1 = np.sqrt(6.0 / (H + H))
    b2 = np.sqrt(6.0 / (H + k))
    W1 = rng.uniform(-b1, b1, size=(H, H))
    W2 = rng.uniform(-b2, b2, size=(H, k))
    return ClusterNetParams(W1=W1, W2=W2, dropout_rate=dropout_rate)


def forward(params: ClusterNetParams, E: np.ndarray,
            dropout_seed: int = 0) -> tuple[np.ndarray, ForwardCache]:
    """Batch forward pass; returns (I, cache for backward)."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != params.hidden_dim:
        raise ValueError(
            f"expected (n, {params.hidden_dim}) input, got {E.shape}")
    T = np.tanh(E @ params.W1.T)
    mask = None
    if params.mode == "train" and params.dropout_rate > 0.0:
        keep = 1.0 - params.dropout_rate
        mask = (rng_from(dropout_seed).random(T.shape) < keep) / keep
        D = T * mask
    else:
        D = T
    I = D @ params.W2
    return I, ForwardCache(E=E, tanh_out=T, dropped=D, mask=mask,
                           W1=params.W1, W2=params.W2)


def backward(cache: ForwardCache, dL_dI: np.ndarray) -> Gradients:
    """Exact chain rule through the forward pass that produced ``cache``."""
    dL_dI = np.asarray(dL_dI, dtype=np.float64)
    n, k = cache.dropped.shape[0], cache.W2.shape[1]
    if dL_dI.shape != (n, k):
        raise ValueError(
            f"upstream gradient shape {dL_dI.shape} does not match cache ({n}, {k})")
    dW2 = cache.dropped.T @ dL_dI
    dD = dL_dI @ cache.W2.T
    dT = dD if cache.mask is None else dD * cache.mask
    dZ = dT * (1.0 - cache.tanh_out ** 2)
    dW1 = dZ.T @ cache.E
    dE = dZ @ cache.W1
    return Gradients(dW1=dW1, dW2=dW2, dE=dE)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state (decay 0.9/0.999, epsilon 1e-8).

    Slots are keyed by parameter name so extra tensors (e.g. centroids)
    share the same optimizer with independent accumulators.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")

    def _slot(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.slots:
            self.slots[name] = (np.zeros(shape), np.zeros(shape))
        m, v = self.slots[name]
        if m.shape != tuple(shape):
            raise ValueError(f"slot {name} shape {m.shape} != gradient shape {shape}")
        return m, v

    def update(self, tensors: dict[str, np.ndarray],
               grads: dict[str, np.ndarray], phase: str = "training") -> None:
        """One bias-corrected step over named tensors, in place."""
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(phase, f"gradient of {name}")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            t = tensors[name]
            m, v = self._slot(name, g.shape)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.isfinite(t).all():
                raise NonFiniteGradientError(phase, f"updated {name}")


def step(params: ClusterNetParams, opt: AdamState, grads: Gradients,
         phase: str = "training") -> tuple[ClusterNetParams, AdamState]:
    """Apply one optimizer step to the network weights."""
    opt.update({"W1": params.W1, "W2": params.W2},
               {"W1": grads.dW1, "W2": grads.dW2}, phase=phase)
    return params, opt


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ClusterNetParams, lam: float,
                    centroids: np.ndarray | None = None) -> None:
    """Binary checkpoint: magic, shapes, W1, W2, lambda, optional centroids."""
    H, k = params.hidden_dim, params.num_clusters
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CKPT)
        fh.write(struct.pack("<IIB", H, k, 1 if centroids is not None else 0))
        fh.write(np.ascontiguousarray(params.W1, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.W2, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", float(lam)))
        if centroids is not None:
            if centroids.shape != (k, k):
                raise ValueError("centroids must be (k, k)")
            fh.write(np.ascontiguousarray(centroids, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ClusterNetParams, float, np.ndarray | None]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC_CKPT:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        H, k, has_u = struct.unpack("<IIB", fh.read(9))
        W1 = np.frombuffer(fh.read(H * H * 8), dtype="<f8").reshape(H, H).copy()
        W2 = np.frombuffer(fh.read(H * k * 8), dtype="<f8").reshape(H, k).copy()
        (lam,) = struct.unpack("<d", fh.read(8))
        U = None
        if has_u:
            U = np.frombuffer(fh.read(k * k * 8), dtype="<f8").reshape(k, k).copy()
    params = ClusterNetParams(W1=W1, W2=W2, mode="eval")
    return params, lam, U
