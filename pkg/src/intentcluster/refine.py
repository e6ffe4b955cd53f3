"""Cluster refinement: sharpen assignments by pulling representations
toward high-confidence clusters.

Centroids are initialized by k-means on the intent representations.  Each
epoch recomputes the Student-t soft assignment Q and a sharpened target
distribution P over the full training set, then runs minibatch gradient
steps on KL(P || Q) that update the projection weights and the centroids
jointly.  The loop stops once the fraction of samples whose hard
assignment changed between consecutive epochs falls below delta_label.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import clusternet
from .clusternet import AdamState, ClusterNetParams
from .dataset import EmbeddedDataset, batches_over, derive_seed, rng_from

_FREQ_FLOOR = 1e-12


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans(X: np.ndarray, k: int, seed: int,
           max_iters: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeding.

    Runs until the assignment reaches a fixpoint or max_iters.  An empty
    cluster is re-seeded to the point currently farthest from its own
    centroid.  Deterministic given the seed.
    """
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if m < k:
        raise ValueError(f"cannot fit {k} clusters to {m} points")
    rng = rng_from(seed)
    centroids = _kmeans_pp(X, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(X, centroids)
        new_assign = d2.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=k)
        for j in range(k):
            if counts[j]:
                centroids[j] = X[new_assign == j].mean(axis=0)
        if not counts.all():
            own = d2[np.arange(m), new_assign].copy()
            for j in np.flatnonzero(counts == 0):
                far = int(own.argmax())
                centroids[j] = X[far]
                new_assign[far] = j
                own[far] = 0.0
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids, assign


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[int(rng.integers(m))]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(m, p=d2 / total))
        else:
            idx = int(rng.integers(m))  # all remaining points coincide
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))
    return centroids


def soft_assign(I: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Student-t kernel (one degree of freedom) normalized per row."""
    kern = 1.0 / (1.0 + _sq_dists(np.asarray(I, dtype=np.float64),
                                  np.asarray(U, dtype=np.float64)))
    return kern / kern.sum(axis=1, keepdims=True)


def target_distribution(Q: np.ndarray) -> np.ndarray:
    """Sharpened self-training target: square Q, normalize by soft cluster
    frequency, renormalize rows.  Dead clusters get a frequency floor so
    an over-provisioned k cannot divide by zero."""
    f = np.maximum(Q.sum(axis=0), _FREQ_FLOOR)
    weight = Q ** 2 / f
    return weight / weight.sum(axis=1, keepdims=True)


def kld_loss(P: np.ndarray, Q: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P || Q) summed over all entries, with 0 * log(0/q) = 0.

    P is treated as a constant; the returned gradient is with respect to
    Q entries only."""
    if P.shape != Q.shape:
        raise ValueError("P and Q must share a shape")
    ratio = np.where(P > 0, P / Q, 1.0)
    loss = float(np.where(P > 0, P * np.log(ratio), 0.0).sum())
    grad = np.where(P > 0, -P / Q, 0.0)
    return max(loss, 0.0), grad


def soft_assign_backward(I: np.ndarray, U: np.ndarray, Q: np.ndarray,
                         dL_dQ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain a gradient on Q back to representations and centroids."""
    diff = I[:, None, :] - U[None, :, :]
    kern = 1.0 / (1.0 + (diff ** 2).sum(axis=2))
    ksum = kern.sum(axis=1, keepdims=True)
    dK = (dL_dQ - (dL_dQ * Q).sum(axis=1, keepdims=True)) / ksum
    dd = -(kern ** 2) * dK
    dI = 2.0 * (dd[:, :, None] * diff).sum(axis=1)
    dU = -2.0 * (dd[:, :, None] * diff).sum(axis=0)
    return dI, dU


def infer(I: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Hard assignment: per-row argmax of Q, ties to the lowest index.

    Equivalent to nearest centroid since the row normalization is
    monotone in the unnormalized kernel."""
    return _sq_dists(np.asarray(I, dtype=np.float64),
                     np.asarray(U, dtype=np.float64)).argmin(axis=1)


# ---------------------------------------------------------------------------
# refinement loop
# ---------------------------------------------------------------------------

@dataclass
class RefinementState:
    centroids: np.ndarray  # (k, k)
    previous_assignments: np.ndarray
    delta_label: float = 0.001

    def __post_init__(self):
        if not (0.0 < self.delta_label < 1.0):
            raise ValueError("delta_label must be in (0, 1)")
        if not np.isfinite(self.centroids).all():
            raise ValueError("centroids must be finite")


@dataclass
class RefineConfig:
    batch_size: int = 256
    epoch_cap: int = 100
    seed: int = 0


@dataclass
class RefineEpoch:
    epoch: int
    kld_loss: float
    changed_fraction: float
    occupied_clusters: int


def init_refinement(ds: EmbeddedDataset, params: ClusterNetParams, k: int,
                    seed: int, delta_label: float = 0.001) -> RefinementState:
    """K-means over eval-mode training representations seeds the centroids."""
    X = ds.embeddings[ds.split_indices("train")]
    I, _ = clusternet.forward(params.eval_view(), X)
    U, assign = kmeans(I, k, seed)
    return RefinementState(centroids=U, previous_assignments=assign,
                           delta_label=delta_label)


def run_refinement(ds: EmbeddedDataset, params: ClusterNetParams,
                   opt: AdamState, state: RefinementState,
                   config: RefineConfig) -> tuple[ClusterNetParams, RefinementState, np.ndarray, list[RefineEpoch]]:
    """Joint KLD training of projection weights and centroids.

    Returns the trained parameters, the updated state, the final
    training-split assignments and the per-epoch log."""
    train_idx = ds.split_indices("train")
    X = ds.embeddings[train_idx]
    eval_params = params.eval_view()
    U = state.centroids
    prev = np.asarray(state.previous_assignments)
    assignments = prev
    log: list[RefineEpoch] = []
    for epoch in range(1, config.epoch_cap + 1):
        I_full, _ = clusternet.forward(eval_params, X)
        Q = soft_assign(I_full, U)
        P = target_distribution(Q)
        epoch_loss, _ = kld_loss(P, Q)
        for batch in batches_over(np.arange(X.shape[0]), config.batch_size,
                                  derive_seed(config.seed, epoch)):
            rows = batch.indices
            Ib, cache = clusternet.forward(eval_params, X[rows])
            Qb = soft_assign(Ib, U)
            _, dQb = kld_loss(P[rows], Qb)
            dIb, dU = soft_assign_backward(Ib, U, Qb, dQb)
            grads = clusternet.backward(cache, dIb)
            opt.update({"W1": params.W1, "W2": params.W2, "U": U},
                       {"W1": grads.dW1, "W2": grads.dW2, "U": dU},
                       phase="cluster refinement")
        I_end, _ = clusternet.forward(eval_params, X)
        assignments = infer(I_end, U)
        changed = float(np.mean(assignments != prev))
        log.append(RefineEpoch(
            epoch=epoch,
            kld_loss=epoch_loss,
            changed_fraction=changed,
            occupied_clusters=int(np.unique(assignments).size),
        ))
        prev = assignments
        state.previous_assignments = assignments
        if changed < state.delta_label:
            break
    state.centroids = U
    return params, state, assignments, log


def write_refinement_log(log: list[RefineEpoch], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "kld_loss", "changed_fraction", "occupied_clusters"])
        for row in log:
            w.writerow([row.epoch, repr(row.kld_loss),
                        repr(row.changed_fraction), row.occupied_clusters])
