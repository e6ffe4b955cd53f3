"""Pairwise-classification training: clustering recast as deciding, for
every sentence pair in a batch, whether the two belong together.

Pair labels come from two sources that alternate every epoch:

* supervised pass: batches of labeled samples only; a pair is similar iff
  the class labels match.
* self-supervised pass: batches mix labeled and unlabeled samples; pairs
  are pseudo-labeled by thresholding the cosine similarity matrix (similar
  above u(lambda), dissimilar below l(lambda), unselected in between),
  with ground-truth labels taking precedence whenever both samples are
  labeled.

lambda grows by eta * 1.1 per epoch, narrowing the (l, u) band so that
progressively harder pairs join training; when u(lambda) <= l(lambda) the
phase ends.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import clusternet
from .clusternet import AdamState, ClusterNetParams
from .dataset import Batch, EmbeddedDataset, ExperimentMask, batches_over, derive_seed
from .errors import DegenerateRepresentationError, EmptySelectionError

SIMILAR = 1
DISSIMILAR = 0
NOT_SELECTED = -1

_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class ThresholdState:
    """Adaptive selection parameter lambda and its threshold schedule.

    u(lambda) = 0.95 - lambda, l(lambda) = 0.455 + 0.1 * lambda.
    """

    lam: float = 0.0
    eta: float = 0.009
    u_intercept: float = 0.95
    u_slope: float = -1.0
    l_intercept: float = 0.455
    l_slope: float = 0.1

    def upper(self) -> float:
        return self.u_intercept + self.u_slope * self.lam

    def lower(self) -> float:
        return self.l_intercept + self.l_slope * self.lam

    def active(self) -> bool:
        return self.upper() > self.lower()


def update_lambda(ts: ThresholdState) -> ThresholdState:
    """Gradient step on the band penalty u(lambda) - l(lambda).

    The penalty's derivative is u_slope - l_slope (constant), so lambda
    moves by eta * (l_slope - u_slope) each call: +0.0099 under defaults.
    """
    band_derivative = ts.u_slope - ts.l_slope
    return replace(ts, lam=ts.lam - ts.eta * band_derivative)


def similarity_matrix(I: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities of representation rows.

    Raises DegenerateRepresentationError when a row has norm below 1e-12,
    which signals collapsed training rather than a recoverable input.
    """
    I = np.asarray(I, dtype=np.float64)
    norms = np.linalg.norm(I, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise DegenerateRepresentationError(
            f"representation row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    unit = I / norms[:, None]
    S = unit @ unit.T
    S = np.clip((S + S.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S


def label_matrix(labels) -> np.ndarray:
    """Ground-truth pair labels: similar iff the class labels match."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a non-empty 1-D sequence")
    eq = labels[:, None] == labels[None, :]
    return np.where(eq, SIMILAR, DISSIMILAR).astype(np.int8)


def self_label_matrix(S: np.ndarray, ts: ThresholdState, labels=None,
                      labeled=None) -> np.ndarray:
    """Threshold-driven pseudo-labels with ground-truth precedence.

    ``labels`` and ``labeled`` are per-sample class codes and a boolean
    labeled mask; label rules apply only to pairs where both samples are
    labeled and override any threshold decision for those pairs.
    """
    if not ts.active():
        raise ValueError("thresholds have crossed (u <= l); training phase over")
    u, l = ts.upper(), ts.lower()
    out = np.full(S.shape, NOT_SELECTED, dtype=np.int8)
    out[S > u] = SIMILAR
    out[S < l] = DISSIMILAR
    if labels is not None:
        labels = np.asarray(labels)
        if labeled is None:
            labeled = np.ones(labels.shape, dtype=bool)
        labeled = np.asarray(labeled, dtype=bool)
        both = labeled[:, None] & labeled[None, :]
        eq = labels[:, None] == labels[None, :]
        out[both & eq] = SIMILAR
        out[both & ~eq] = DISSIMILAR
    return out


def similarity_loss(S: np.ndarray, L: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy over selected off-diagonal pairs.

    S is clamped to [1e-7, 1-1e-7] inside the logarithms only; the
    gradient is zero at unselected entries and wherever the clamp is
    active.  Returns (mean loss, dloss/dS).
    """
    if S.shape != L.shape:
        raise ValueError("similarity and label matrices must share a shape")
    sel = L != NOT_SELECTED
    np.fill_diagonal(sel, False)
    count = int(sel.sum())
    if count == 0:
        raise EmptySelectionError("no selected pairs in batch")
    Sc = np.clip(S, _CLAMP_LO, _CLAMP_HI)
    R = (L == SIMILAR).astype(np.float64)
    per_pair = -(R * np.log(Sc) + (1.0 - R) * np.log(1.0 - Sc))
    loss = float(per_pair[sel].sum() / count)
    grad = np.zeros_like(S)
    grad[sel] = (-(R / Sc) + (1.0 - R) / (1.0 - Sc))[sel] / count
    grad[(S < _CLAMP_LO) | (S > _CLAMP_HI)] = 0.0
    return loss, grad


def cosine_backward(I: np.ndarray, dL_dS: np.ndarray) -> np.ndarray:
    """Chain a gradient on the cosine matrix back to the representations."""
    I = np.asarray(I, dtype=np.float64)
    norms = np.linalg.norm(I, axis=1)
    unit = I / norms[:, None]
    S = unit @ unit.T
    Gs = dL_dS + dL_dS.T
    return (Gs @ unit - (Gs * S).sum(axis=1)[:, None] * unit) / norms[:, None]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class PairwiseConfig:
    batch_size: int = 256
    epoch_cap: int = 100
    seed: int = 0


@dataclass
class PairwiseEpoch:
    epoch: int
    sup_loss: float
    selfsup_loss: float
    lam: float
    upper: float
    lower: float
    selected_fraction: float


def _loss_step(params: ClusterNetParams, opt: AdamState, E: np.ndarray,
               pair_labels: np.ndarray, dropout_seed: int, phase: str) -> float:
    I, cache = clusternet.forward(params, E, dropout_seed=dropout_seed)
    S = similarity_matrix(I)
    loss, dS = similarity_loss(S, pair_labels)
    dI = cosine_backward(I, dS)
    grads = clusternet.backward(cache, dI)
    clusternet.step(params, opt, grads, phase=phase)
    return loss


def run_pairwise_training(ds: EmbeddedDataset, mask: ExperimentMask | None,
                          params: ClusterNetParams, opt: AdamState,
                          ts: ThresholdState,
                          config: PairwiseConfig) -> tuple[ClusterNetParams, ThresholdState, list[PairwiseEpoch]]:
    """Alternate supervised and self-supervised passes until the threshold
    band closes or the epoch cap is hit.  Returns the trained parameters,
    the final threshold state and the per-epoch log."""
    train_idx = ds.split_indices("train")
    labeled_ids = mask.labeled_sample_ids if mask is not None else set()
    labeled_rows = np.array([i for i in train_idx if ds.ids[i] in labeled_ids],
                            dtype=np.intp)
    labeled_flag = np.zeros(ds.num_samples, dtype=bool)
    labeled_flag[labeled_rows] = True

    codes = None
    if ds.labels is not None:
        code_of = {c: j for j, c in enumerate(ds.class_ids())}
        codes = np.array([-1 if l is None else code_of[l] for l in ds.labels])

    log: list[PairwiseEpoch] = []
    for epoch in range(1, config.epoch_cap + 1):
        sup_losses: list[float] = []
        if labeled_rows.size and codes is not None:
            for b, batch in enumerate(batches_over(
                    labeled_rows, config.batch_size,
                    derive_seed(config.seed, epoch, 0))):
                if batch.size < 2:
                    continue
                try:
                    sup_losses.append(_loss_step(
                        params, opt, ds.embeddings[batch.indices],
                        label_matrix(codes[batch.indices]),
                        derive_seed(config.seed, epoch, 0, b),
                        phase="supervised similarity loss"))
                except EmptySelectionError:
                    continue

        selfsup_losses: list[float] = []
        selected = 0
        total_pairs = 0
        for b, batch in enumerate(batches_over(
                train_idx, config.batch_size, derive_seed(config.seed, epoch, 1))):
            if batch.size < 2:
                continue
            I_probe, cache = clusternet.forward(
                params, ds.embeddings[batch.indices],
                dropout_seed=derive_seed(config.seed, epoch, 1, b))
            S = similarity_matrix(I_probe)
            L = self_label_matrix(
                S, ts,
                labels=None if codes is None else codes[batch.indices],
                labeled=labeled_flag[batch.indices])
            n = batch.size
            off_diag = ~np.eye(n, dtype=bool)
            selected += int(((L != NOT_SELECTED) & off_diag).sum())
            total_pairs += n * n - n
            try:
                loss, dS = similarity_loss(S, L)
            except EmptySelectionError:
                continue
            dI = cosine_backward(I_probe, dS)
            grads = clusternet.backward(cache, dI)
            clusternet.step(params, opt, grads,
                            phase="self-supervised similarity loss")
            selfsup_losses.append(loss)

        ts = update_lambda(ts)
        log.append(PairwiseEpoch(
            epoch=epoch,
            sup_loss=float(np.mean(sup_losses)) if sup_losses else math.nan,
            selfsup_loss=float(np.mean(selfsup_losses)) if selfsup_losses else math.nan,
            lam=ts.lam,
            upper=ts.upper(),
            lower=ts.lower(),
            selected_fraction=selected / total_pairs if total_pairs else 0.0,
        ))
        if not ts.active():
            break
    return params, ts, log


def write_training_log(log: list[PairwiseEpoch], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "sup_loss", "selfsup_loss", "lambda", "u", "l",
                    "selected_fraction"])
        for row in log:
            w.writerow([row.epoch, repr(row.sup_loss), repr(row.selfsup_loss),
                        repr(row.lam), repr(row.upper), repr(row.lower),
                        repr(row.selected_fraction)])
