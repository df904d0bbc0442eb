"""k-means and regularized information maximization (RIM) clustering.

RIM fits a multilogit model ``p(c=k|f) ∝ exp(w_k·f + b_k)`` by maximising

    H(mean_i p(.|f_i)) - mean_i H(p(.|f_i)) - lam * sum_k |w_k|^2

The first two terms estimate the mutual information between features and
labels; the penalty makes unpopulated classes free, so starting from an
over-segmented k-means partition the number of clusters shrinks to what the
data supports.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import log_softmax, softmax

from ldpo.core import FeatureMatrix, LabelVector, LdpoError, ValidationError

log = logging.getLogger(__name__)


class RimDivergenceError(LdpoError):
    def __init__(self, iteration: int):
        super().__init__(f"RIM objective became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ClusteringResult:
    labels: LabelVector
    k_effective: int
    objective: float
    method: str
    seed: int | None
    centers: np.ndarray | None = None
    trace: list[float] = field(default_factory=list)

    def metadata(self) -> dict:
        return {"k_effective": self.k_effective, "objective": float(self.objective),
                "seed": self.seed, "method": self.method}


def _as_matrix(x) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(x, FeatureMatrix):
        return x.data, x.item_ids
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError("features must be 2-D")
    return a, tuple(f"item{i}" for i in range(a.shape[0]))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def sq_distances(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances, (n, k), computed in row chunks."""
    out = np.empty((x.shape[0], centers.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - centers[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = sq_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass is on duplicates of chosen centers
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, sq_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 300):
    """Lloyd iterations from the given centers.

    Returns ``(centers, labels, objective, trace)`` where ``trace[t]`` is the
    sum of squared distances after iteration ``t``; it never increases.
    """
    centers = centers.copy()
    k = centers.shape[0]
    d2 = sq_distances(x, centers)
    labels = np.argmin(d2, axis=1)
    trace = [float(d2[np.arange(len(x)), labels].sum())]
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # move an empty center onto the point worst served by its center
            own = d2[np.arange(len(x)), labels]
            far = int(np.argmax(own))
            centers[j] = x[far]
            labels[far] = j
            d2[far, :] = sq_distances(x[far:far + 1], centers)[0]
        d2 = sq_distances(x, centers)
        new_labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centers, labels, trace[-1], trace


def kmeans(x, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> ClusteringResult:
    """Best of ``restarts`` k-means++ seeded Lloyd runs."""
    data, ids = _as_matrix(x)
    n = data.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} must be in [1, n_items={n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        init = kmeans_plusplus(data, k, rng)
        centers, labels, obj, trace = lloyd(data, init, max_iter)
        if best is None or obj < best[2]:
            best = (centers, labels, obj, trace)
    centers, labels, obj, trace = best
    lv = LabelVector(labels, k, ids).densify()
    used = np.unique(labels)
    return ClusteringResult(lv, lv.k, obj, "kmeans", seed, centers[used], trace)


# ---------------------------------------------------------------------------
# RIM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RimModel:
    weights: np.ndarray  # (K, D)
    biases: np.ndarray   # (K,)
    lam: float = 1.0

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        b = np.asarray(self.biases, dtype=np.float64).reshape(-1)
        if w.shape[0] != b.size or b.size < 1:
            raise ValidationError("need one bias per weight row and K >= 1")
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("RIM parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def n_classes(self) -> int:
        return self.biases.size

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.biases])

    @classmethod
    def unpack(cls, theta: np.ndarray, k: int, d: int, lam: float) -> "RimModel":
        return cls(theta[:k * d].reshape(k, d), theta[k * d:], lam)


class RimGradient(NamedTuple):
    weights: np.ndarray
    biases: np.ndarray


def _check_dim(m: RimModel, x: np.ndarray) -> None:
    if x.shape[-1] != m.dim:
        raise ValidationError(f"feature dim {x.shape[-1]} != model dim {m.dim}")


def rim_posterior(m: RimModel, f) -> np.ndarray:
    """Class posteriors for one vector (length K) or a matrix (N x K)."""
    f = f.data if isinstance(f, FeatureMatrix) else np.asarray(f, dtype=np.float64)
    _check_dim(m, f)
    return softmax(f @ m.weights.T + m.biases, axis=-1)


def _objective_parts(w, b, lam, x):
    logp = log_softmax(x @ w.T + b, axis=1)
    p = np.exp(logp)
    pbar = p.mean(axis=0)
    nz = pbar > 0
    h_mean = -np.sum(pbar[nz] * np.log(pbar[nz]))
    cond = -np.mean(np.sum(p * logp, axis=1))
    penalty = lam * np.sum(w * w)
    return h_mean - cond - penalty, p, logp, pbar


def _objective_and_grad(w, b, lam, x):
    f, p, logp, pbar = _objective_parts(w, b, lam, x)
    n = x.shape[0]
    logpbar = np.log(np.maximum(pbar, np.finfo(float).tiny))
    g = (logp - logpbar) / n
    ds = p * (g - np.sum(p * g, axis=1, keepdims=True))
    gw = ds.T @ x - 2.0 * lam * w
    gb = ds.sum(axis=0)
    return f, gw, gb


def rim_objective(m: RimModel, x) -> float:
    data, _ = _as_matrix(x)
    _check_dim(m, data)
    return float(_objective_parts(m.weights, m.biases, m.lam, data)[0])


def rim_gradient(m: RimModel, x) -> RimGradient:
    """Exact gradient of :func:`rim_objective` w.r.t. weights and biases."""
    data, _ = _as_matrix(x)
    _check_dim(m, data)
    _, gw, gb = _objective_and_grad(m.weights, m.biases, m.lam, data)
    return RimGradient(gw, gb)


def _multilogit_objective_and_grad(w, b, lam, x, y):
    n = x.shape[0]
    logp = log_softmax(x @ w.T + b, axis=1)
    f = np.mean(logp[np.arange(n), y]) - lam * np.sum(w * w)
    ds = -np.exp(logp)
    ds[np.arange(n), y] += 1.0
    ds /= n
    return f, ds.T @ x - 2.0 * lam * w, ds.sum(axis=0)


def lbfgs_maximize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
                   theta: np.ndarray, max_iter: int, rtol: float = 1e-6,
                   memory: int = 10, armijo: float = 1e-4):
    """Limited-memory BFGS ascent with halving backtracking line search.

    Every accepted step satisfies the Armijo condition, so the returned trace
    of objective values is non-decreasing.  Returns ``(theta, trace)``.
    """
    f, g = fun(theta)
    if not np.isfinite(f):
        raise RimDivergenceError(0)
    trace = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    step0 = 1.0 / max(np.linalg.norm(g), 1e-12)
    for it in range(1, max_iter + 1):
        # two-loop recursion on the negated problem
        q = -g
        alphas = []
        for s, y in reversed(list(zip(s_hist, y_hist))):
            a = s @ q / (y @ s)
            alphas.append(a)
            q = q - a * y
        if s_hist:
            s, y = s_hist[-1], y_hist[-1]
            q = q * (s @ y) / (y @ y)
            step = 1.0
        else:
            step = step0
        for (s, y), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            bcoef = y @ q / (y @ s)
            q = q + s * (a - bcoef)
        direction = -q
        slope = g @ direction
        if not slope > 0:
            s_hist.clear()
            y_hist.clear()
            direction = g
            slope = g @ g
            step = step0
        if slope <= 0:
            break
        accepted = False
        for _ in range(60):
            cand = theta + step * direction
            f_new, g_new = fun(cand)
            if not np.isfinite(f_new):
                step *= 0.5
                continue
            if f_new >= f + armijo * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s_vec, y_vec = cand - theta, g - g_new
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        change = abs(f_new - f)
        theta, f, g = cand, f_new, g_new
        if not np.isfinite(f):
            raise RimDivergenceError(it)
        trace.append(f)
        if change <= rtol * max(abs(f), 1e-12):
            break
    return theta, trace


def fit_multilogit(x, labels, lam: float = 1.0, n_iter: int = 10,
                   n_classes: int | None = None) -> RimModel:
    """Supervised multilogit fit; used to carry a partition into RIM parameters."""
    data, _ = _as_matrix(x)
    y = labels.labels if isinstance(labels, LabelVector) else np.asarray(labels, np.int64)
    k = n_classes or (labels.k if isinstance(labels, LabelVector) else int(y.max()) + 1)
    d = data.shape[1]

    def fun(theta):
        w, b = theta[:k * d].reshape(k, d), theta[k * d:]
        f, gw, gb = _multilogit_objective_and_grad(w, b, lam, data, y)
        return f, np.concatenate([gw.ravel(), gb])

    theta, _ = lbfgs_maximize(fun, np.zeros(k * d + k), n_iter, rtol=0.0)
    return RimModel.unpack(theta, k, d, lam)


def rim_fit(x, init_labels: LabelVector, lam: float = 1.0, max_iter: int = 500,
            tol: float = 1e-6, warm_iters: int = 10,
            warm_lam: float | None = None) -> tuple[RimModel, ClusteringResult]:
    """Fit RIM from an (over-segmented) initial partition.

    Parameters start from a short supervised multilogit fit to ``init_labels``
    and are then refined by ascent on :func:`rim_objective`.  Final labels are
    the posterior argmax; classes that end up with no items are dropped and
    the remaining ones renumbered densely, so ``k_effective <= init_labels.k``.
    """
    data, ids = _as_matrix(x)
    if isinstance(x, FeatureMatrix):
        init_labels.check_aligned(x)
    if init_labels.n_items != data.shape[0]:
        raise ValidationError("init_labels length differs from feature rows")
    k, d = init_labels.k, data.shape[1]
    warm = fit_multilogit(data, init_labels, lam if warm_lam is None else warm_lam,
                          warm_iters, n_classes=k)

    def fun(theta):
        w, b = theta[:k * d].reshape(k, d), theta[k * d:]
        f, gw, gb = _objective_and_grad(w, b, lam, data)
        return f, np.concatenate([gw.ravel(), gb])

    theta, trace = lbfgs_maximize(fun, warm.pack(), max_iter, rtol=tol)
    full = RimModel.unpack(theta, k, d, lam)
    post = rim_posterior(full, data)
    raw = np.argmax(post, axis=1)
    used = np.unique(raw)
    model = RimModel(full.weights[used], full.biases[used], lam)
    labels = LabelVector(np.searchsorted(used, raw), used.size, ids)
    result = ClusteringResult(labels, int(used.size), float(trace[-1]), "rim", None,
                              None, [float(t) for t in trace])
    log.debug("rim_fit: K %d -> %d after %d iterations", k, used.size, len(trace) - 1)
    return model, result


def default_oversegment(n_items: int) -> int:
    return int(max(2, min(1000, n_items // 10)))


def kmeans_rim(x, k0: int | None = None, seed: int = 0, lam: float = 1.0,
               restarts: int = 3, **rim_kwargs) -> tuple[RimModel, ClusteringResult]:
    """Over-segmented k-means followed by RIM model selection."""
    data, ids = _as_matrix(x)
    k0 = default_oversegment(data.shape[0]) if k0 is None else k0
    km = kmeans(x, min(k0, data.shape[0]), seed=seed, restarts=restarts)
    model, res = rim_fit(x, km.labels, lam=lam, **rim_kwargs)
    res = ClusteringResult(res.labels, res.k_effective, res.objective, "kmeans_rim",
                           seed, None, res.trace)
    return model, res
