"""Clustering comparison and classification metrics.

All entropies use natural logarithms with ``0 log 0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ldpo.core import LabelVector, ValidationError


def _as_labels(x) -> np.ndarray:
    if isinstance(x, LabelVector):
        return x.labels
    return np.asarray(x, dtype=np.int64).reshape(-1)


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray
    row_ids: np.ndarray
    col_ids: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def contingency(a, b) -> ContingencyTable:
    la, lb = _as_labels(a), _as_labels(b)
    if la.size != lb.size:
        raise ValidationError(f"label vectors differ in length ({la.size} vs {lb.size})")
    if isinstance(a, LabelVector) and isinstance(b, LabelVector):
        a.check_aligned(b)
    ra, ia = np.unique(la, return_inverse=True)
    rb, ib = np.unique(lb, return_inverse=True)
    counts = np.zeros((ra.size, rb.size), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts, ra, rb)


def purity(a, b) -> float:
    """Fraction of items covered by the best-matching ``b`` cluster of each ``a`` cluster."""
    table = contingency(a, b)
    if table.total == 0:
        raise ValidationError("purity of empty labelings is undefined")
    return float(table.counts.max(axis=1).sum() / table.total)


def _entropy(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(a, b) -> float:
    """Mutual information normalised by the arithmetic mean of the two entropies.

    Two single-cluster labelings count as identical and score 1.
    """
    table = contingency(a, b)
    n = table.total
    if n == 0:
        raise ValidationError("NMI of empty labelings is undefined")
    c = table.counts.astype(np.float64)
    ha = _entropy(c.sum(axis=1))
    hb = _entropy(c.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    pij = c / n
    outer = np.outer(c.sum(axis=1), c.sum(axis=0)) / n ** 2
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def topk_accuracy(scores, truth, k: int) -> float:
    """Fraction of rows whose true label is among the ``k`` best scores.

    Ties are broken towards the lower class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = _as_labels(truth)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise ValidationError("scores must be N x K with one row per label")
    n, n_classes = scores.shape
    if not 1 <= k <= n_classes:
        raise ValidationError(f"k={k} outside [1, {n_classes}]")
    if n == 0:
        raise ValidationError("top-k accuracy of an empty set is undefined")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


def mean_class_scores(proba, truth, n_classes: int | None = None) -> np.ndarray:
    """``out[i, j]`` = mean probability of class ``j`` over items whose true class is ``i``."""
    proba = np.asarray(proba, dtype=np.float64)
    y = _as_labels(truth)
    if proba.ndim != 2 or proba.shape[0] != y.size:
        raise ValidationError("proba must be N x K with one row per label")
    k = proba.shape[1] if n_classes is None else n_classes
    sums = np.zeros((k, proba.shape[1]))
    np.add.at(sums, y, proba)
    counts = np.bincount(y, minlength=k)
    empty = np.flatnonzero(counts[:k] == 0)
    if empty.size:
        raise ValidationError(f"class {int(empty[0])} has no items")
    return sums / counts[:k, None]
