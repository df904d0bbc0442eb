"""PCA reduction and dense pooling encoders (VLAD, Fisher vectors)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ldpo.clustering import kmeans, sq_distances
from ldpo.core import (FeatureMatrix, PatchActivationSet, PatchImage, ValidationError,
                       read_model, write_model)

VARIANCE_FLOOR = 1e-6


def _activations(patches) -> np.ndarray:
    if isinstance(patches, PatchImage):
        return patches.activations
    if isinstance(patches, PatchActivationSet):
        return patches.stacked()
    a = np.asarray(patches, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray              # (D, d_out), orthonormal columns
    explained_variance: np.ndarray

    @property
    def d_out(self) -> int:
        return self.basis.shape[1]

    def transform(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.mean.size:
            raise ValidationError(f"input dim {x.shape[-1]} != PCA dim {self.mean.size}")
        return (x - self.mean) @ self.basis

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return z @ self.basis.T + self.mean

    def save(self, path) -> None:
        write_model(path, "pca", {"mean": self.mean, "basis": self.basis,
                                  "explained_variance": self.explained_variance})

    @classmethod
    def load(cls, path) -> "PcaModel":
        _, a, _ = read_model(path, "pca")
        return cls(a["mean"], a["basis"], a["explained_variance"])


def fit_pca(x, d_out: int) -> PcaModel:
    """Top ``d_out`` principal directions (sample covariance, ddof=1)."""
    data = x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    n, dim = data.shape
    if not 1 <= d_out <= min(n, dim):
        raise ValidationError(f"d_out={d_out} must be in [1, min(n_items, dim)={min(n, dim)}]")
    mean = data.mean(axis=0)
    centered = data - mean
    if not np.any(centered):
        raise ValidationError("zero variance: all rows identical")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:d_out].T.copy()
    # sign convention: largest-magnitude loading of each axis is positive
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(d_out)])
    basis *= np.where(flip == 0, 1.0, flip)
    var = s[:d_out] ** 2 / max(n - 1, 1)
    return PcaModel(mean, basis, var)


def apply_pca(m: PcaModel, x: FeatureMatrix) -> FeatureMatrix:
    if x.dim != m.mean.size:
        raise ValidationError(f"feature dim {x.dim} != PCA input dim {m.mean.size}")
    return x.with_data(m.transform(x.data))


# ---------------------------------------------------------------------------
# VLAD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def save(self, path) -> None:
        write_model(path, "codebook", {"centers": self.centers})

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls(read_model(path, "codebook")[1]["centers"])


def fit_codebook(patches, k: int = 64, seed: int = 0, restarts: int = 3) -> Codebook:
    """k-means centers of all pooled patch vectors."""
    x = _activations(patches)
    if x.shape[0] < k:
        raise ValidationError(f"{x.shape[0]} patches are fewer than k={k}")
    res = kmeans(x, k, seed=seed, restarts=restarts)
    return Codebook(res.centers)


def encode_vlad(patches, cb: Codebook, normalize: bool = True,
                intra_norm: bool = False) -> np.ndarray:
    """Hard-assignment VLAD; length ``k * D``.

    Block ``j`` holds the summed residuals of patches whose nearest center is
    ``j``.  ``intra_norm`` L2-normalises each block before the global norm.
    """
    x = _activations(patches)
    if x.shape[0] == 0:
        raise ValidationError("cannot encode an image with no patches")
    if x.shape[1] != cb.dim:
        raise ValidationError(f"patch dim {x.shape[1]} != codebook dim {cb.dim}")
    nearest = np.argmin(sq_distances(x, cb.centers), axis=1)
    v = np.zeros_like(cb.centers)
    np.add.at(v, nearest, x - cb.centers[nearest])
    if intra_norm:
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    v = v.ravel()
    if normalize:
        nrm = np.linalg.norm(v)
        if nrm > 0:
            v = v / nrm
    return v


# ---------------------------------------------------------------------------
# GMM + Fisher vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray    # (G,)
    means: np.ndarray      # (G, D)
    variances: np.ndarray  # (G, D), diagonal
    log_likelihood: list[float] = field(default_factory=list, compare=False)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """``log w_g + log N(x | mu_g, diag var_g)`` for every row and component."""
        inv = 1.0 / self.variances
        quad = ((x ** 2) @ inv.T - 2.0 * x @ (self.means * inv).T
                + np.sum(self.means ** 2 * inv, axis=1))
        logdet = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (quad + logdet + x.shape[1] * np.log(2 * np.pi))

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        lj = self.log_joint(x)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def mean_log_likelihood(self, x: np.ndarray) -> float:
        return float(np.mean(logsumexp(self.log_joint(x), axis=1)))

    def save(self, path) -> None:
        write_model(path, "gmm", {"weights": self.weights, "means": self.means,
                                  "variances": self.variances})

    @classmethod
    def load(cls, path) -> "GmmModel":
        a = read_model(path, "gmm")[1]
        return cls(a["weights"], a["means"], a["variances"])


def fit_gmm(patches, g: int = 64, seed: int = 0, max_iter: int = 300,
            tol: float = 1e-6, floor: float = VARIANCE_FLOOR) -> GmmModel:
    """Diagonal-covariance EM started from k-means.

    The returned model carries the mean log-likelihood after every EM
    iteration in ``log_likelihood``; it is non-decreasing.
    """
    x = _activations(patches)
    n, d = x.shape
    if n < g:
        raise ValidationError(f"{n} patches are fewer than g={g} components")
    km = kmeans(x, g, seed=seed, restarts=1)
    labels = np.searchsorted(np.unique(km.labels.labels), km.labels.labels)
    means = np.zeros((g, d))
    variances = np.ones((g, d))
    weights = np.zeros(g)
    for j in range(g):
        pts = x[labels == j]
        if len(pts):
            means[j] = pts.mean(axis=0)
            variances[j] = pts.var(axis=0)
            weights[j] = len(pts) / n
        else:
            means[j] = x[j % n]
            variances[j] = x.var(axis=0)
            weights[j] = 1.0 / n
    weights /= weights.sum()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        variances = np.maximum(variances, floor)
    model = GmmModel(weights, means, variances)
    trace = [model.mean_log_likelihood(x)]
    clamped = False
    for _ in range(max_iter):
        resp = model.responsibilities(x)
        nk = resp.sum(axis=0)
        keep = nk > 10 * np.finfo(float).eps
        w = nk / n
        mu = model.means.copy()
        var = model.variances.copy()
        mu[keep] = (resp[:, keep].T @ x) / nk[keep, None]
        ex2 = (resp[:, keep].T @ (x * x)) / nk[keep, None]
        raw_var = ex2 - mu[keep] ** 2
        if np.any(raw_var < floor):
            clamped = True
        var[keep] = np.maximum(raw_var, floor)
        w = np.where(keep, w, 0.0)
        w = np.maximum(w, np.finfo(float).tiny)
        model = GmmModel(w / w.sum(), mu, var)
        ll = model.mean_log_likelihood(x)
        prev = trace[-1]
        trace.append(ll)
        if abs(ll - prev) <= tol * abs(prev):
            break
    if clamped:
        warnings.warn(f"GMM variance below {floor:g} clamped", RuntimeWarning, stacklevel=2)
    return GmmModel(model.weights, model.means, model.variances, trace)


def fisher_vector_raw(patches, gmm: GmmModel) -> np.ndarray:
    """Unnormalised Fisher vector, shape ``(G, 2, D)``.

    ``[g, 0]`` is the gradient w.r.t. the mean of component ``g`` and
    ``[g, 1]`` the gradient w.r.t. its standard deviation, both with the
    usual ``1 / (T sqrt(w_g))`` and ``1 / (T sqrt(2 w_g))`` scaling.
    """
    x = _activations(patches)
    if x.shape[0] == 0:
        raise ValidationError("cannot encode an image with no patches")
    if x.shape[1] != gmm.dim:
        raise ValidationError(f"patch dim {x.shape[1]} != GMM dim {gmm.dim}")
    t = x.shape[0]
    gamma = gmm.responsibilities(x)                          # (T, G)
    sd = np.sqrt(gmm.variances)
    z = (x[:, None, :] - gmm.means[None]) / sd[None]        # (T, G, D)
    u = np.einsum("tg,tgd->gd", gamma, z) / (t * np.sqrt(gmm.weights))[:, None]
    v = np.einsum("tg,tgd->gd", gamma, z ** 2 - 1.0) / (t * np.sqrt(2 * gmm.weights))[:, None]
    return np.stack([u, v], axis=1)


def encode_fisher(patches, gmm: GmmModel, power_norm: bool = True,
                  l2_norm: bool = True) -> np.ndarray:
    """Improved Fisher vector of one image; length ``2 * G * D``."""
    fv = fisher_vector_raw(patches, gmm).ravel()
    if power_norm:
        fv = np.sign(fv) * np.sqrt(np.abs(fv))
    if l2_norm:
        nrm = np.linalg.norm(fv)
        if nrm > 0:
            fv = fv / nrm
    return fv


def encode_images(patches: PatchActivationSet, encoder, **kwargs) -> FeatureMatrix:
    """Apply a per-image encoder (e.g. ``lambda im: encode_vlad(im, cb)``) to every image."""
    rows = [encoder(im, **kwargs) for im in patches.images]
    return FeatureMatrix(np.vstack(rows), patches.image_ids)
