"""Clustering evaluation: NMI, ARI and Hungarian-aligned accuracy.

All three scores are invariant to permutations of the predicted cluster
identifiers.  NMI normalizes mutual information by the arithmetic mean of
the two partition entropies (natural log); other normalizations exist, so
cross-tool comparisons must account for this choice.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass
class ContingencyTable:
    """Joint counts of (true class, predicted cluster) pairs."""

    counts: np.ndarray  # (n_classes, n_clusters) int64
    row_labels: list    # class identifiers
    col_labels: list    # cluster identifiers

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def build_contingency(true_labels, predicted, classes=None,
                      clusters=None) -> ContingencyTable:
    """Count co-occurrences.  Explicit ``clusters`` lets callers include
    clusters that received no samples (they show up as zero columns)."""
    true_labels = list(true_labels)
    predicted = list(predicted)
    if len(true_labels) != len(predicted):
        raise ValueError(
            f"length mismatch: {len(true_labels)} labels vs {len(predicted)} predictions")
    if not true_labels:
        raise ValueError("cannot evaluate an empty prediction set")
    row_labels = sorted(set(true_labels)) if classes is None else list(classes)
    col_labels = sorted(set(predicted)) if clusters is None else list(clusters)
    ri = {c: i for i, c in enumerate(row_labels)}
    ci = {c: i for i, c in enumerate(col_labels)}
    counts = np.zeros((len(row_labels), len(col_labels)), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        counts[ri[t], ci[p]] += 1
    return ContingencyTable(counts=counts, row_labels=row_labels,
                            col_labels=col_labels)


def _entropy(freq: np.ndarray) -> float:
    p = freq[freq > 0]
    return float(-(p * np.log(p)).sum())


def nmi(true_labels, predicted) -> float:
    """Mutual information over the arithmetic mean of the entropies.

    Conventions: 1.0 when both partitions are single-cluster (0/0 case),
    0.0 when exactly one of them is."""
    table = build_contingency(true_labels, predicted)
    n = table.total
    joint = table.counts / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    ha, hb = _entropy(pa), _entropy(pb)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    nz = joint > 0
    mi = float((joint[nz] * np.log(
        joint[nz] / np.outer(pa, pb)[nz])).sum())
    return min(1.0, max(0.0, mi / ((ha + hb) / 2.0)))


def _comb2(x: int) -> int:
    return x * (x - 1) // 2


def ari(true_labels, predicted) -> float:
    """Pair-counting adjusted Rand index (exact integer combinatorics)."""
    table = build_contingency(true_labels, predicted)
    n = table.total
    if n < 2:
        raise ValueError("ARI needs at least 2 samples")
    index = sum(_comb2(int(c)) for c in table.counts.ravel())
    sum_a = sum(_comb2(int(c)) for c in table.counts.sum(axis=1))
    sum_b = sum(_comb2(int(c)) for c in table.counts.sum(axis=0))
    total = _comb2(n)
    expected = sum_a * sum_b / total
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns.

    Potentials-based O(n^3) algorithm; rectangular inputs are padded to
    square with zero-cost cells, so with more columns than rows every row
    is matched and the surplus columns stay unassigned (and vice versa).
    Returns (row, column) pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    r, c = cost.shape
    n = max(r, c)
    a = np.zeros((n + 1, n + 1))
    a[1:r + 1, 1:c + 1] = cost
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.intp)  # row matched to each column
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            free = ~used[1:]
            cur = a[i0, 1:] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(masked.argmin()) + 1
            delta = masked[j1 - 1]
            u[match_row[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_row[j0] = match_row[j1]
            j0 = j1
    pairs = [(int(match_row[j]) - 1, j - 1) for j in range(1, n + 1)
             if match_row[j] != 0]
    return sorted((ri, cj) for ri, cj in pairs if ri < r and cj < c)


def acc(true_labels, predicted, clusters=None) -> tuple[float, dict]:
    """Best-alignment clustering accuracy.

    The Hungarian assignment runs on negated contingency counts; clusters
    beyond the matched set contribute no correct samples.  Returns the
    accuracy and the cluster -> class alignment map."""
    table = build_contingency(true_labels, predicted, clusters=clusters)
    pairs = hungarian(-table.counts.astype(np.float64))
    matched = sum(int(table.counts[ri, cj]) for ri, cj in pairs)
    alignment = {table.col_labels[cj]: table.row_labels[ri] for ri, cj in pairs}
    return matched / table.total, alignment


@dataclass
class MetricsReport:
    nmi: float
    ari: float
    acc: float
    alignment: dict
    confusion: ContingencyTable

    def scores(self) -> dict[str, float]:
        return {"nmi": self.nmi, "ari": self.ari, "acc": self.acc}


def evaluate(true_labels, predicted, clusters=None) -> MetricsReport:
    """All three clustering scores plus the confusion table."""
    a, alignment = acc(true_labels, predicted, clusters=clusters)
    return MetricsReport(
        nmi=nmi(true_labels, predicted),
        ari=ari(true_labels, predicted),
        acc=a,
        alignment=alignment,
        confusion=build_contingency(true_labels, predicted, clusters=clusters),
    )


def confusion_to_csv(table: ContingencyTable, path,
                     include_empty: bool = False) -> None:
    """Write the class x cluster table; zero-count clusters are hidden
    unless ``include_empty`` is set."""
    keep = [j for j in range(len(table.col_labels))
            if include_empty or table.counts[:, j].sum() > 0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [table.col_labels[j] for j in keep])
        for i, row_label in enumerate(table.row_labels):
            w.writerow([row_label] + [int(table.counts[i, j]) for j in keep])
