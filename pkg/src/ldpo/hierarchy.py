"""Category hierarchy from classifier confusion.

Level-0 affinity between classes ``i`` and ``j`` is the symmetrised mean
cross-class score ``(P(j|i) + P(i|j)) / 2``.  Affinity propagation groups the
classes; a merged node's score for another node is the summed level-0
probability over that node's member classes, averaged over the merged node's
items, so every level is recomputed from the single N x K probability matrix.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from ldpo.core import LabelVector, ValidationError, dump_json
from ldpo.metrics import mean_class_scores

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AffinityMatrix:
    a: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("affinity matrix must be square")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12):
            raise ValidationError("affinity matrix must be symmetric")
        if np.any(a < -1e-12) or np.any(a > 1 + 1e-12):
            raise ValidationError("affinities must lie in [0, 1]")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))


def class_affinity(class_scores) -> AffinityMatrix:
    """``A = (M + M^T) / 2`` for ``M`` from :func:`ldpo.metrics.mean_class_scores`."""
    m = np.asarray(class_scores, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError("class scores must be K x K")
    return AffinityMatrix(0.5 * (m + m.T), tuple(range(m.shape[0])))


@dataclass(frozen=True)
class ApResult:
    exemplars: np.ndarray   # sorted exemplar indices
    labels: np.ndarray      # index into ``exemplars`` for every point
    converged: bool
    n_iter: int

    @property
    def assignment(self) -> np.ndarray:
        """Exemplar index of every point."""
        return self.exemplars[self.labels]


def affinity_propagation(s, preference=None, damping: float = 0.5, max_iter: int = 500,
                         convergence_iter: int = 15) -> ApResult:
    """Responsibility/availability message passing on a similarity matrix.

    The diagonal of ``s`` is replaced by ``preference`` (default: median of
    the off-diagonal similarities).  Stops once the exemplar set has been
    unchanged for ``convergence_iter`` iterations; hitting ``max_iter``
    first returns the current assignment with ``converged=False`` and a
    warning.  Exact ties (identical points) are broken by an eps-scale
    perturbation drawn from a fixed seed, so results stay deterministic.
    """
    s = np.array(s, dtype=np.float64)
    k = s.shape[0]
    if s.ndim != 2 or s.shape[1] != k or k < 2:
        raise ValidationError("need a square similarity matrix with K >= 2")
    if not 0.5 <= damping < 1:
        raise ValidationError("damping must be in [0.5, 1)")
    off = ~np.eye(k, dtype=bool)
    if preference is None:
        preference = np.median(s[off])
    s[np.diag_indices(k)] = np.broadcast_to(np.asarray(preference, dtype=np.float64), (k,))
    s_work = s + (1e-12 * np.abs(s) + 1e-100) * \
        np.random.default_rng(0).standard_normal((k, k))

    scale = max(np.abs(s).max(), np.finfo(np.float64).tiny)
    r = np.zeros((k, k))
    a = np.zeros((k, k))
    rows = np.arange(k)
    last = None
    stable = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sa = a + s_work
        first = np.argmax(sa, axis=1)
        top = sa[rows, first]
        sa[rows, first] = -np.inf
        second = sa.max(axis=1)
        r_new = s_work - top[:, None]
        r_new[rows, first] = s_work[rows, first] - second
        r_prev, a_prev = r, a
        r = damping * r + (1 - damping) * r_new

        rp = np.maximum(r, 0)
        rp[rows, rows] = r[rows, rows]
        col = rp.sum(axis=0)
        a_new = col[None, :] - rp
        diag = a_new[rows, rows].copy()
        a_new = np.minimum(a_new, 0)
        a_new[rows, rows] = diag
        a = damping * a + (1 - damping) * a_new

        ex = tuple(np.flatnonzero(np.diag(r) + np.diag(a) > 0))
        frozen = max(np.abs(r - r_prev).max(), np.abs(a - a_prev).max()) <= 1e-14 * scale
        # an empty exemplar set only counts as settled once the messages stop moving
        if ex == last and (ex or frozen):
            stable += 1
        else:
            stable, last = 0, ex
        if stable >= convergence_iter:
            converged = True
            break

    exemplars = np.flatnonzero(np.diag(r) + np.diag(a) > 0)
    if exemplars.size == 0:
        # no point accumulated evidence for being an exemplar: nothing merges
        exemplars = rows.copy()
    if not converged:
        warnings.warn(f"affinity propagation did not converge in {max_iter} iterations",
                      RuntimeWarning, stacklevel=2)
    labels = np.argmax(s[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    # move each exemplar to the member that best represents its cluster
    for c in range(exemplars.size):
        idx = np.flatnonzero(labels == c)
        exemplars[c] = idx[np.argmax(s[np.ix_(idx, idx)].sum(axis=0))]
    exemplars = np.sort(exemplars)
    # a point gaining nothing from its exemplar stands alone; ties favour no merge
    assigned = exemplars[np.argmax(s[:, exemplars], axis=1)]
    lone = s[rows, assigned] <= np.diag(s)
    exemplars = np.union1d(exemplars, rows[lone])
    labels = np.argmax(s[:, exemplars], axis=1)
    labels[exemplars] = np.arange(exemplars.size)
    return ApResult(exemplars, labels, converged, it)


def net_similarity(s, preference, exemplars, assignment) -> float:
    """Sum of point-to-exemplar similarities plus the exemplars' preferences."""
    s = np.asarray(s, dtype=np.float64)
    pref = np.broadcast_to(np.asarray(preference, dtype=np.float64), (s.shape[0],))
    total = float(np.sum(pref[list(exemplars)]))
    for i, e in enumerate(assignment):
        if i != e:
            total += s[i, e]
    return total


@dataclass
class TreeNode:
    node_id: int
    members: list[int]       # node ids on the previous level
    exemplar: int            # node id on the previous level
    classes: list[int]       # original (level-0) classes covered


@dataclass
class CategoryTree:
    levels: list[list[TreeNode]] = field(default_factory=list)
    affinities: list[np.ndarray] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "levels": [[{"node_id": n.node_id, "members": n.members,
                         "exemplar": n.exemplar, "classes": n.classes} for n in lvl]
                       for lvl in self.levels],
            "affinities": [a.tolist() for a in self.affinities],
        }

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryTree":
        levels = [[TreeNode(n["node_id"], list(n["members"]), n["exemplar"], list(n["classes"]))
                   for n in lvl] for lvl in d["levels"]]
        return cls(levels, [np.asarray(a, dtype=np.float64) for a in d["affinities"]])


def merged_affinity(proba: np.ndarray, truth: np.ndarray, groups: list[list[int]]) -> np.ndarray:
    """Affinity between groups of original classes, from level-0 probabilities."""
    g = len(groups)
    summed = np.stack([proba[:, grp].sum(axis=1) for grp in groups], axis=1)  # (N, G)
    node_of = np.empty(proba.shape[1], dtype=np.int64)
    for gi, grp in enumerate(groups):
        node_of[grp] = gi
    m = mean_class_scores(summed, node_of[truth], g)
    return 0.5 * (m + m.T)


def build_category_tree(proba, truth: LabelVector, max_levels: int = 5,
                        damping: float = 0.5, max_iter: int = 500) -> CategoryTree:
    """Recursive affinity-propagation merging of classes.

    Level 0 has one node per class.  Recursion stops at a single node, when
    a level brings no reduction (that level is not stored), or after
    ``max_levels`` merge levels.
    """
    proba = np.asarray(proba, dtype=np.float64)
    y = truth.labels
    if proba.ndim != 2 or proba.shape[0] != y.size:
        raise ValidationError("proba must be N x K with one row per label")
    k = proba.shape[1]
    groups = [[c] for c in range(k)]
    tree = CategoryTree([[TreeNode(c, [c], c, [c]) for c in range(k)]],
                        [class_affinity(mean_class_scores(proba, y, k)).a])
    for _ in range(max_levels):
        if len(groups) < 2:
            break
        ap = affinity_propagation(tree.affinities[-1], damping=damping, max_iter=max_iter)
        if ap.exemplars.size >= len(groups):
            break
        nodes, new_groups = [], []
        for ni, ex in enumerate(ap.exemplars):
            members = [int(i) for i in np.flatnonzero(ap.labels == ni)]
            classes = sorted(c for mbr in members for c in groups[mbr])
            nodes.append(TreeNode(ni, members, int(ex), classes))
            new_groups.append(classes)
        groups = new_groups
        tree.levels.append(nodes)
        tree.affinities.append(merged_affinity(proba, y, groups))
    return tree
