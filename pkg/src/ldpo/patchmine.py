"""Mid-level element discovery over patch activations.

Pipeline for one round of mining::

    transactions  = build_transactions(patches, k_top)
    per group:      mine_frequent_patterns -> select_top_patterns -> LDA detectors
    vocabulary    = merge_patterns_global(all groups' elements)
    image vector  = encode_bag_of_elements(image patches, vocabulary)

Groups are image clusters, or random image groups before any clustering
exists.  Class labels are never used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ldpo.core import (FeatureMatrix, LabelVector, PatchActivationSet, PatchImage,
                       ValidationError, dump_json, read_model, write_model)

PatchKey = tuple[str, int]


@dataclass(frozen=True)
class Transaction:
    image_id: str
    patch_index: int
    items: tuple[int, ...]

    @property
    def key(self) -> PatchKey:
        return (self.image_id, self.patch_index)


@dataclass(frozen=True)
class Pattern:
    itemset: tuple[int, ...]
    covered_patches: frozenset[PatchKey]

    def __post_init__(self):
        if not self.itemset:
            raise ValidationError("pattern itemset must be non-empty")
        object.__setattr__(self, "itemset", tuple(sorted(self.itemset)))
        object.__setattr__(self, "covered_patches", frozenset(self.covered_patches))

    @property
    def support_count(self) -> int:
        return len(self.covered_patches)


@dataclass(frozen=True)
class LdaDetector:
    weight: np.ndarray
    bias: float

    def score(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias


@dataclass(frozen=True)
class Element:
    pattern: Pattern
    detector: LdaDetector
    provenance: frozenset[int] = frozenset()
    merged_itemsets: tuple[tuple[int, ...], ...] = ()


@dataclass
class ElementVocabulary:
    elements: list[Element] = field(default_factory=list)

    def __len__(self):
        return len(self.elements)

    @property
    def weights(self) -> np.ndarray:
        return np.stack([e.detector.weight for e in self.elements])

    @property
    def biases(self) -> np.ndarray:
        return np.array([e.detector.bias for e in self.elements])

    def summary(self) -> list[dict]:
        return [{"itemset": list(e.pattern.itemset),
                 "support": e.pattern.support_count,
                 "provenance": sorted(e.provenance),
                 "merged_itemsets": [list(s) for s in e.merged_itemsets]}
                for e in self.elements]

    def save(self, path, summary_path=None) -> None:
        """Detectors go to the binary container; itemsets etc. ride in its metadata."""
        meta = {"elements": self.summary(),
                "covered": [sorted([list(k) for k in e.pattern.covered_patches])
                            for e in self.elements]}
        write_model(path, "vocabulary", {"weights": self.weights.reshape(len(self), -1),
                                         "biases": self.biases}, meta)
        if summary_path is not None:
            dump_json(self.summary(), summary_path)

    @classmethod
    def load(cls, path) -> "ElementVocabulary":
        _, arrays, meta = read_model(path, "vocabulary")
        elements = []
        for i, info in enumerate(meta["elements"]):
            covered = frozenset((a, int(b)) for a, b in meta["covered"][i])
            elements.append(Element(
                Pattern(tuple(info["itemset"]), covered),
                LdaDetector(arrays["weights"][i], float(arrays["biases"][i])),
                frozenset(info["provenance"]),
                tuple(tuple(s) for s in info["merged_itemsets"])))
        return cls(elements)


# ---------------------------------------------------------------------------
# Transactions and mining
# ---------------------------------------------------------------------------


def top_k_indices(activation: np.ndarray, k_top: int) -> tuple[int, ...]:
    """Indices of the ``k_top`` largest entries, lower index first on ties."""
    order = np.argsort(-np.asarray(activation), kind="stable")[:k_top]
    return tuple(int(i) for i in np.sort(order))


def build_transactions(patches, k_top: int) -> list[Transaction]:
    images = patches.images if isinstance(patches, PatchActivationSet) else [patches]
    out = []
    for im in images:
        dim = im.activations.shape[1]
        if not 1 <= k_top <= dim:
            raise ValidationError(f"k_top={k_top} must be in [1, dim={dim}]")
        order = np.argsort(-im.activations, axis=1, kind="stable")[:, :k_top]
        order.sort(axis=1)
        for j, row in enumerate(order):
            out.append(Transaction(im.image_id, j, tuple(int(i) for i in row)))
    return out


def mine_frequent_patterns(transactions: Sequence[Transaction], min_support: float = 0.01,
                           max_len: int = 4, min_len: int = 2) -> list[Pattern]:
    """Exact frequent itemsets (Apriori over bitset tid-lists).

    Returns every itemset with ``min_len <= len <= max_len`` whose support
    fraction is at least ``min_support``, ordered by descending support and
    then lexicographically.
    """
    if not transactions:
        raise ValidationError("no transactions to mine")
    if not 0 < min_support <= 1:
        raise ValidationError("min_support must be in (0, 1]")
    n = len(transactions)
    tids: dict[int, int] = {}
    for t, tr in enumerate(transactions):
        bit = 1 << t
        for item in tr.items:
            tids[item] = tids.get(item, 0) | bit

    def frequent(mask: int) -> bool:
        return mask.bit_count() / n >= min_support

    level = {(i,): m for i, m in sorted(tids.items()) if frequent(m)}
    found = dict(level) if min_len <= 1 else {}
    size = 1
    while level and size < max_len:
        keys = sorted(level)
        nxt = {}
        for a_i, a in enumerate(keys):
            for b in keys[a_i + 1:]:
                if a[:-1] != b[:-1]:
                    break
                cand = a + (b[-1],)
                if any(sub not in level for sub in combinations(cand, size)):
                    continue
                mask = level[a] & tids[b[-1]]
                if frequent(mask):
                    nxt[cand] = mask
        size += 1
        level = nxt
        if size >= min_len:
            found.update(level)

    keys = [tr.key for tr in transactions]
    out = []
    for itemset, mask in found.items():
        covered = frozenset(keys[t] for t in _bits(mask))
        out.append(Pattern(itemset, covered))
    out.sort(key=lambda p: (-p.support_count, p.itemset))
    return out


def _bits(mask: int):
    t = 0
    while mask:
        if mask & 1:
            yield t
        mask >>= 1
        t += 1


def select_top_patterns(patterns: Sequence[Pattern], per_cluster: int = 50) -> list[Pattern]:
    """Greedy maximum-coverage selection.

    Each pick adds the most not-yet-covered patches; equal gains prefer the
    longer itemset, then input order.  Patterns that add nothing are still
    taken, last, until ``per_cluster`` is reached.
    """
    remaining = list(patterns)
    covered: set[PatchKey] = set()
    chosen = []
    while remaining and len(chosen) < per_cluster:
        best_i, best_key = 0, None
        for i, p in enumerate(remaining):
            key = (len(p.covered_patches - covered), len(p.itemset))
            if best_key is None or key > best_key:
                best_i, best_key = i, key
        pick = remaining.pop(best_i)
        covered |= pick.covered_patches
        chosen.append(pick)
    return chosen


# ---------------------------------------------------------------------------
# Detectors
# ---------------------------------------------------------------------------


def background_statistics(patches) -> tuple[np.ndarray, np.ndarray]:
    x = patches.stacked() if isinstance(patches, PatchActivationSet) else np.asarray(patches)
    if x.shape[0] < 2:
        raise ValidationError("background statistics need at least two patches")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def train_lda_detector(positive, background_mean, background_cov,
                       ridge: float = 1e-3) -> LdaDetector:
    """Whitened mean-difference detector, biased to score +1 on the positive mean."""
    pos = np.asarray(positive, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] < 2:
        raise ValidationError("an LDA detector needs at least two positive patches")
    cov = np.asarray(background_cov, dtype=np.float64)
    d = cov.shape[0]
    eps = ridge * np.trace(cov) / d
    reg = cov + eps * np.eye(d)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise ValidationError("background covariance is singular even after ridge") from None
    mu = pos.mean(axis=0)
    diff = mu - np.asarray(background_mean, dtype=np.float64)
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, diff))
    return LdaDetector(w, float(1.0 - w @ mu))


def cross_score(d: LdaDetector, patches) -> float:
    """Mean of ``w·x`` (no bias) over a patch set."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("cross_score needs a non-empty patch set")
    if x.shape[1] != d.weight.size:
        raise ValidationError("detector and patch dims differ")
    return float(np.mean(x @ d.weight))


def patch_matrix(keys, lookup: dict[str, PatchImage]) -> np.ndarray:
    keys = sorted(keys)
    return np.stack([lookup[img].activations[j] for img, j in keys])


def merge_patterns_global(elements: Sequence[Element], patches: PatchActivationSet,
                          background=None, threshold: float | None = None,
                          ratio: float = 0.5, max_rounds: int = 100) -> ElementVocabulary:
    """Merge elements whose detectors fire on each other's patches.

    ``S[i, j]`` is detector ``i``'s mean response on element ``j``'s patches.
    A pair is merged when both ``S[i, j]`` and ``S[j, i]`` exceed the
    threshold: ``threshold`` if given, otherwise ``ratio * min(S[i, i], S[j, j])``
    (pairs whose self-scores are not positive never merge under the relative
    rule).  Connected components of the mutual-merge graph become one element
    with a detector retrained on the union of patches.  Rounds repeat until
    nothing merges, so the output is a fixed point.
    """
    lookup = patches.by_id()
    if background is None:
        background = background_statistics(patches)
    bg_mean, bg_cov = background
    current = list(elements)
    for _ in range(max_rounds):
        if len(current) < 2:
            break
        groups = merge_groups(current, lookup, threshold, ratio)
        if all(len(g) == 1 for g in groups):
            break
        merged = []
        for g in groups:
            if len(g) == 1:
                merged.append(current[g[0]])
                continue
            members = [current[i] for i in g]
            covered = frozenset().union(*(m.pattern.covered_patches for m in members))
            rep = min(members, key=lambda m: (-m.pattern.support_count, m.pattern.itemset))
            det = train_lda_detector(patch_matrix(covered, lookup), bg_mean, bg_cov)
            itemsets = sorted({s for m in members
                               for s in (m.merged_itemsets or (m.pattern.itemset,))})
            merged.append(Element(Pattern(rep.pattern.itemset, covered), det,
                                  frozenset().union(*(m.provenance for m in members)),
                                  tuple(itemsets)))
        current = merged
    return ElementVocabulary(current)


def score_matrix(elements: Sequence[Element], lookup: dict[str, PatchImage]) -> np.ndarray:
    w = np.stack([e.detector.weight for e in elements])
    means = np.stack([patch_matrix(e.pattern.covered_patches, lookup).mean(axis=0)
                      for e in elements])
    return w @ means.T


def merge_groups(elements: Sequence[Element], lookup, threshold=None,
                 ratio: float = 0.5) -> list[list[int]]:
    """Connected components of the mutual-merge graph, each sorted, in order of first member."""
    s = score_matrix(elements, lookup)
    diag = np.diag(s)
    if threshold is None:
        tau = ratio * np.minimum.outer(diag, diag)
        valid = np.minimum.outer(diag, diag) > 0
    else:
        tau = np.full_like(s, float(threshold))
        valid = np.ones_like(s, dtype=bool)
    edges = (s > tau) & (s.T > tau) & valid
    np.fill_diagonal(edges, False)
    n_comp, comp = connected_components(csr_matrix(edges), directed=False)
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(comp):
        groups.setdefault(c, []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


# ---------------------------------------------------------------------------
# Vocabulary construction and encoding
# ---------------------------------------------------------------------------


@dataclass
class MiningConfig:
    k_top: int = 20
    min_support: float = 0.01
    min_len: int = 2
    max_len: int = 4
    per_cluster: int = 50
    merge_threshold: float | None = None
    merge_ratio: float = 0.5
    ridge: float = 1e-3


def random_groups(image_ids: Sequence[str], k: int, seed: int) -> LabelVector:
    """Seeded random partition of images into ``k`` non-empty groups."""
    n = len(image_ids)
    if not 1 <= k <= n:
        raise ValidationError(f"cannot split {n} images into {k} groups")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % k
    return LabelVector(labels, k, tuple(image_ids))


def mine_vocabulary(patches: PatchActivationSet, groups: LabelVector,
                    config: MiningConfig | None = None) -> ElementVocabulary:
    """Mine, select and detector-train per group, then merge globally."""
    cfg = config or MiningConfig()
    group_of = dict(zip(groups.item_ids, groups.labels))
    missing = [i for i in patches.image_ids if i not in group_of]
    if missing:
        raise ValidationError(f"image {missing[0]!r} has no group label")
    lookup = patches.by_id()
    bg_mean, bg_cov = background_statistics(patches)
    transactions = build_transactions(patches, cfg.k_top)
    by_group: dict[int, list[Transaction]] = {}
    for tr in transactions:
        by_group.setdefault(int(group_of[tr.image_id]), []).append(tr)
    elements = []
    for g in sorted(by_group):
        mined = mine_frequent_patterns(by_group[g], cfg.min_support, cfg.max_len, cfg.min_len)
        for p in select_top_patterns(mined, cfg.per_cluster):
            if p.support_count < 2:
                continue
            det = train_lda_detector(patch_matrix(p.covered_patches, lookup), bg_mean,
                                     bg_cov, cfg.ridge)
            elements.append(Element(p, det, frozenset([g]), (p.itemset,)))
    if not elements:
        raise ValidationError("no patterns survived mining; lower min_support or k_top")
    return merge_patterns_global(elements, patches, (bg_mean, bg_cov),
                                 cfg.merge_threshold, cfg.merge_ratio)


def encode_bag_of_elements(patches, vocab: ElementVocabulary,
                           per_scale_pool: bool = False,
                           scales: Sequence[float] | None = None) -> np.ndarray:
    """Max-pooled detector responses ``max_p (w_n·x_p + b_n)``.

    With ``per_scale_pool`` the max is taken separately for every value in
    ``scales`` and the blocks are concatenated; a scale absent from the image
    contributes zeros.
    """
    if len(vocab) == 0:
        raise ValidationError("empty element vocabulary")
    if isinstance(patches, PatchImage):
        x, sc = patches.activations, patches.scale
    else:
        x = np.atleast_2d(np.asarray(patches, dtype=np.float64))
        sc = np.ones(x.shape[0])
    if x.shape[0] == 0:
        raise ValidationError("cannot encode an image with no patches")
    resp = x @ vocab.weights.T + vocab.biases
    if not per_scale_pool:
        return resp.max(axis=0)
    if scales is None:
        raise ValidationError("per-scale pooling needs the list of scales")
    blocks = []
    for s in scales:
        sel = np.isclose(sc, s)
        blocks.append(resp[sel].max(axis=0) if sel.any() else np.zeros(len(vocab)))
    return np.concatenate(blocks)


def encode_patch_images(patches: PatchActivationSet, vocab: ElementVocabulary,
                        **kwargs) -> FeatureMatrix:
    rows = [encode_bag_of_elements(im, vocab, **kwargs) for im in patches.images]
    return FeatureMatrix(np.vstack(rows), patches.image_ids)


def vocabulary_json(vocab: ElementVocabulary) -> str:
    return json.dumps(vocab.summary(), sort_keys=True, indent=2)
