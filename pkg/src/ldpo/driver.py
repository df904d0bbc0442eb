"""The LDPO loop: encode -> cluster -> check convergence -> retrain -> repeat."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ldpo import clustering, encoding, hierarchy, metrics, patchmine, pseudotask, textmine
from ldpo.core import (FeatureMatrix, IterationRecord, LabelVector, LdpoError, LoopTrace,
                       PatchActivationSet, ValidationError, dump_json, load_feature_matrix,
                       load_labels, load_patches, make_split, write_feature_matrix,
                       write_labels)
from ldpo.patchmine import MiningConfig
from ldpo.pseudotask import TrainConfig

log = logging.getLogger(__name__)

ENCODERS = ("raw", "pca", "vlad", "fisher", "patch_mining")
CLUSTERINGS = ("kmeans", "kmeans_rim")


class LoopError(LdpoError):
    """A stage failed inside the loop; ``iteration`` says where."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


@dataclass
class LdpoConfig:
    encoder: str = "raw"
    clustering: str = "kmeans"
    k: int | None = None
    k_oversegment: int | None = None
    lam: float = 1.0
    purity_min: float = 0.85
    nmi_min: float = 0.85
    max_iterations: int = 12
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    kmeans_restarts: int = 10
    rim_max_iter: int = 500
    standardize: bool = False
    l2_normalize: bool = False
    pca_dim: int = 4096
    pca_refit: bool = True
    vlad_k: int = 64
    vlad_intra_norm: bool = False
    gmm_components: int = 64
    fisher_power_norm: bool = True
    fisher_l2_norm: bool = True
    per_scale_pool: bool = False
    fresh_encoder: bool = False
    tree_split: str = "test"
    tree_max_levels: int = 5
    keywords_top_n: int = 10
    keywords_commonality: float = 0.8
    pseudotask: TrainConfig = field(default_factory=TrainConfig)
    patch_mining: MiningConfig = field(default_factory=MiningConfig)

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValidationError(f"encoder must be one of {ENCODERS}")
        if self.clustering not in CLUSTERINGS:
            raise ValidationError(f"clustering must be one of {CLUSTERINGS}")
        if self.clustering == "kmeans" and not self.k:
            raise ValidationError("kmeans clustering needs k")
        for name in ("purity_min", "nmi_min"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must be in (0, 1]")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.tree_split not in ("train", "validation", "test", "all"):
            raise ValidationError("tree_split must be train, validation, test or all")
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if isinstance(self.pseudotask, dict):
            self.pseudotask = _sub(TrainConfig, self.pseudotask, "pseudotask")
        if isinstance(self.patch_mining, dict):
            self.patch_mining = _sub(MiningConfig, self.patch_mining, "patch_mining")

    @classmethod
    def from_dict(cls, d: dict) -> "LdpoConfig":
        d = dict(d)
        d.pop("dataset", None)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return _sub(cls, d, "config")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        d["split_ratios"] = list(self.split_ratios)
        return d


def _sub(kind, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValidationError(f"unknown {where} field(s): {', '.join(unknown)}")
    try:
        return kind(**d)
    except TypeError as e:
        raise ValidationError(f"{where}: {e}") from None


@dataclass
class DatasetManifest:
    """Inputs of one run.  Ground truth is optional and only used for reporting."""

    features: FeatureMatrix | None = None
    patches: PatchActivationSet | None = None
    documents: textmine.DocumentSet | None = None
    truth: LabelVector | None = None

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "DatasetManifest":
        base = Path(base_dir)
        unknown = sorted(set(d) - {"features", "patches", "documents", "truth"})
        if unknown:
            raise ValidationError(f"unknown dataset field(s): {', '.join(unknown)}")

        def p(key):
            return base / d[key] if d.get(key) else None

        features = load_feature_matrix(p("features")) if p("features") else None
        patches = load_patches(p("patches")) if p("patches") else None
        docs = textmine.load_documents(p("documents")) if p("documents") else None
        truth = load_labels(p("truth")) if p("truth") else None
        return cls(features, patches, docs, truth)

    @property
    def item_ids(self) -> tuple[str, ...]:
        if self.features is not None:
            return self.features.item_ids
        return self.patches.image_ids


@dataclass
class ConvergenceDecision:
    converged: bool
    purity: float
    nmi: float
    k_change: int


def check_convergence(prev: LabelVector, curr: LabelVector, purity_min: float = 0.85,
                      nmi_min: float = 0.85) -> ConvergenceDecision:
    """Both purity(curr, prev) and NMI must reach their thresholds."""
    if len(prev) != len(curr):
        raise ValidationError("label vectors differ in length")
    pur = metrics.purity(curr, prev)
    nm = metrics.nmi(curr, prev)
    k_used = abs(np.unique(curr.labels).size - np.unique(prev.labels).size)
    return ConvergenceDecision(bool(pur >= purity_min and nm >= nmi_min), pur, nm, k_used)


@dataclass
class RunResult:
    trace: LoopTrace
    labels: LabelVector
    converged: bool
    label_history: list[LabelVector]
    features: FeatureMatrix
    encoder: pseudotask.EncoderModel | None = None
    encoder_labels: LabelVector | None = None
    tree: hierarchy.CategoryTree | None = None
    keywords: textmine.KeywordReport | None = None
    vocabulary: patchmine.ElementVocabulary | None = None
    final_eval: pseudotask.EvalReport | None = None

    def report(self, config: LdpoConfig) -> dict:
        out = {
            "converged": self.converged,
            "n_iterations": len(self.trace),
            "k_final": self.labels.k,
            "config": config.to_dict(),
            "trace": self.trace.to_dicts(timing=False),
        }
        if self.final_eval is not None:
            out["final_eval"] = self.final_eval.to_dict()
        return out


def _preprocess(x: FeatureMatrix, cfg: LdpoConfig) -> FeatureMatrix:
    data = x.data
    if cfg.standardize:
        sd = data.std(axis=0)
        data = (data - data.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    if cfg.l2_normalize:
        nrm = np.linalg.norm(data, axis=1, keepdims=True)
        data = data / np.where(nrm > 0, nrm, 1.0)
    return x.with_data(data) if data is not x.data else x


def _pca(x: FeatureMatrix, dim: int, model=None):
    d_out = min(dim, x.n_items, x.dim)
    if model is None or model.mean.size != x.dim:
        model = encoding.fit_pca(x, d_out)
    return encoding.apply_pca(model, x), model


def _dense_pooled(cfg: LdpoConfig, ds: DatasetManifest) -> FeatureMatrix:
    patches = ds.patches
    if cfg.encoder == "vlad":
        cb = encoding.fit_codebook(patches, cfg.vlad_k, cfg.seed)
        rows = [encoding.encode_vlad(im, cb, intra_norm=cfg.vlad_intra_norm)
                for im in patches.images]
    else:
        gmm = encoding.fit_gmm(patches, cfg.gmm_components, cfg.seed)
        rows = [encoding.encode_fisher(im, gmm, cfg.fisher_power_norm, cfg.fisher_l2_norm)
                for im in patches.images]
    pooled = FeatureMatrix(np.vstack(rows), patches.image_ids)
    return _pca(pooled, cfg.pca_dim)[0]


def _scales(patches: PatchActivationSet) -> list[float]:
    return sorted({float(s) for im in patches.images for s in im.scale})


def run_ldpo(config: LdpoConfig, dataset: DatasetManifest, out_dir=None) -> RunResult:
    """Run the loop until adjacent clusterings agree or ``max_iterations`` is hit.

    Iteration ``t`` encodes, clusters (seed ``seed + t``), compares with
    iteration ``t-1`` and, unless converged or at the cap, trains the
    pseudo-task encoder on a fresh 70/10/20 split (seed ``seed + t``).  The
    encoder's hidden layer applied to the input features gives the next
    iteration's clustering features.  On convergence the encoder is trained
    once more on the final labels and used for the category tree.
    """
    cfg = config
    if cfg.encoder in ("raw", "pca") and dataset.features is None:
        raise ValidationError(f"encoder {cfg.encoder!r} needs a feature matrix")
    if cfg.encoder in ("vlad", "fisher", "patch_mining") and dataset.patches is None:
        raise ValidationError(f"encoder {cfg.encoder!r} needs a patch activation file")

    base = None
    if cfg.encoder in ("raw", "pca"):
        base = dataset.features
    elif cfg.encoder in ("vlad", "fisher"):
        try:
            base = _dense_pooled(cfg, dataset)
        except LdpoError as e:
            raise LoopError(0, e) from e
    ids = dataset.item_ids

    trace = LoopTrace()
    history: list[LabelVector] = []
    encoder_model = None
    trained = None          # (model, labels, split, eval) of the latest training
    pca_model = None
    vocab = None
    converged = False
    feats = None
    prev = None
    for it in range(cfg.max_iterations):
        t0 = time.perf_counter()
        try:
            # (1) encode
            if cfg.encoder == "patch_mining":
                k_groups = cfg.k or clustering.default_oversegment(len(ids))
                groups = (patchmine.random_groups(ids, k_groups, cfg.seed) if prev is None
                          else prev)
                vocab = patchmine.mine_vocabulary(dataset.patches, groups, cfg.patch_mining)
                scales = _scales(dataset.patches) if cfg.per_scale_pool else None
                base = patchmine.encode_patch_images(dataset.patches, vocab,
                                                     per_scale_pool=cfg.per_scale_pool,
                                                     scales=scales)
                feats = base
            else:
                feats = (base if encoder_model is None
                         else pseudotask.encode_refined(encoder_model, base))
            feats = _preprocess(feats, cfg)
            if cfg.encoder == "pca":
                feats, pca_model = _pca(feats, cfg.pca_dim,
                                        None if cfg.pca_refit else pca_model)

            # (2) cluster
            rim_obj = None
            if cfg.clustering == "kmeans":
                res = clustering.kmeans(feats, cfg.k, seed=cfg.seed + it,
                                        restarts=cfg.kmeans_restarts)
            else:
                _, res = clustering.kmeans_rim(feats, cfg.k_oversegment, seed=cfg.seed + it,
                                               lam=cfg.lam, max_iter=cfg.rim_max_iter)
                rim_obj = res.objective
            labels = res.labels
            history.append(labels)

            # (3) convergence
            rec = IterationRecord(it, labels.k, rim_objective=rim_obj)
            if prev is not None:
                dec = check_convergence(prev, labels, cfg.purity_min, cfg.nmi_min)
                rec.purity_adjacent, rec.nmi_adjacent = dec.purity, dec.nmi
                converged = dec.converged
            if dataset.truth is not None:
                truth = _aligned_truth(dataset.truth, ids)
                rec.extra["purity_truth"] = metrics.purity(labels.labels, truth)
                rec.extra["nmi_truth"] = metrics.nmi(labels.labels, truth)

            # (4) retrain on the current labels
            if not converged and it == cfg.max_iterations - 1:
                rec.wall_seconds = time.perf_counter() - t0
                trace.append(rec)
                break
            if labels.k >= 2:
                split = make_split(len(ids), cfg.split_ratios, cfg.seed + it)
                model, report = _train(cfg, base, labels, split, it,
                                       None if cfg.fresh_encoder else encoder_model)
                rec.top1, rec.top5 = report.top1, report.top5
                rec.extra["top5_defined"] = report.top5_defined
                trained = (model, labels, split, report)
                encoder_model = model
        except LdpoError as e:
            raise LoopError(it, e) from e
        rec.wall_seconds = time.perf_counter() - t0
        trace.append(rec)
        log.info("iteration %d: k=%d purity=%s nmi=%s top1=%s", it, labels.k,
                 rec.purity_adjacent, rec.nmi_adjacent, rec.top1)
        if converged:
            break
        prev = labels

    result = RunResult(trace, history[-1], converged, history, feats, vocabulary=vocab)
    if trained is not None:
        model, tlabels, split, report = trained
        result.encoder, result.encoder_labels, result.final_eval = model, tlabels, report
        part = (np.arange(len(ids)) if cfg.tree_split == "all"
                else split.indices(cfg.tree_split))
        if np.unique(tlabels.labels[part]).size < tlabels.k:
            log.warning("tree split lacks some classes; using all items")
            part = np.arange(len(ids))
        proba = pseudotask.predict_proba(model, base.take(part))
        result.tree = hierarchy.build_category_tree(proba, tlabels.take(part),
                                                    cfg.tree_max_levels)
    if dataset.documents is not None:
        result.keywords = textmine.extract_keywords(dataset.documents, result.labels,
                                                    cfg.keywords_top_n,
                                                    cfg.keywords_commonality)
    if out_dir is not None:
        write_artifacts(result, cfg, out_dir)
    return result


def _aligned_truth(truth: LabelVector, ids) -> np.ndarray:
    pos = dict(zip(truth.item_ids, truth.labels))
    try:
        return np.array([pos[i] for i in ids], dtype=np.int64)
    except KeyError as e:
        raise ValidationError(f"truth labels lack item {e.args[0]!r}") from None


def _train(cfg: LdpoConfig, base: FeatureMatrix, labels: LabelVector, split, it: int, warm):
    tr, va, te = split.train, split.validation, split.test
    # every class must be trainable: move one item of a class absent from train
    counts = np.bincount(labels.labels[tr], minlength=labels.k)
    if np.any(counts == 0):
        codes = np.array(split.codes)
        for c in np.flatnonzero(counts == 0):
            codes[np.flatnonzero(labels.labels == c)[0]] = 0
        tr, va, te = (np.flatnonzero(codes == i) for i in range(3))
    tcfg = dataclasses.replace(cfg.pseudotask, seed=cfg.pseudotask.seed + it)
    model = pseudotask.train_encoder(base.take(tr), labels.take(tr),
                                     base.take(va) if va.size else None,
                                     labels.take(va) if va.size else None, tcfg, warm)
    test = te if te.size else tr
    return model, pseudotask.evaluate(model, base.take(test), labels.take(test))


def write_artifacts(result: RunResult, cfg: LdpoConfig, out_dir) -> None:
    """Everything except ``timing.json`` is a deterministic function of the inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(result.labels, out / "labels.csv")
    dump_json(result.report(cfg), out / "report.json")
    dump_json([r.wall_seconds for r in result.trace], out / "timing.json")
    write_feature_matrix(result.features, out / "features.ldpo")
    if result.encoder is not None:
        result.encoder.save(out / "encoder.ldpm")
        write_labels(result.encoder_labels, out / "encoder_labels.csv")
    if result.tree is not None:
        result.tree.save(out / "tree.json")
    if result.keywords is not None:
        result.keywords.save(out / "keywords.json")
    if result.vocabulary is not None:
        result.vocabulary.save(out / "vocabulary.ldpm", out / "vocabulary.json")


def load_run_config(path) -> tuple[LdpoConfig, DatasetManifest]:
    """Read a JSON config whose ``dataset`` block holds paths relative to the file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON: {e}") from None
    if "dataset" not in raw:
        raise ValidationError(f"{path}: missing 'dataset' block")
    ds = DatasetManifest.from_dict(raw["dataset"], path.parent)
    return LdpoConfig.from_dict(raw), ds
