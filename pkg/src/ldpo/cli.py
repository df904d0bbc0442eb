"""Command line entry point.

Exit status: 0 on success, 1 when inputs fail validation, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ldpo import clustering, encoding, hierarchy, metrics, patchmine, textmine
from ldpo.core import (FormatError, ValidationError, dump_json, load_feature_matrix,
                       load_labels, load_patches, write_feature_matrix, write_labels)
from ldpo.driver import LoopError, load_run_config, run_ldpo


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cmd_run(args) -> None:
    cfg, ds = load_run_config(args.config)
    res = run_ldpo(cfg, ds, args.out)
    print(json.dumps({"converged": res.converged, "iterations": len(res.trace),
                      "k": res.labels.k}))


def _cmd_cluster(args) -> None:
    x = load_feature_matrix(args.features)
    if args.method == "kmeans":
        if args.k is None:
            raise UsageError("kmeans needs --k")
        res = clustering.kmeans(x, args.k, seed=args.seed, restarts=args.restarts)
    else:
        _, res = clustering.kmeans_rim(x, args.k, seed=args.seed, lam=args.lam)
    write_labels(res.labels, args.out)
    dump_json(res.metadata(), Path(args.out).with_suffix(".json"))


def _cmd_metrics(args) -> None:
    a, b = load_labels(args.a), load_labels(args.b)
    a.check_aligned(b)
    print(json.dumps({"purity": metrics.purity(a, b), "nmi": metrics.nmi(a, b)},
                     sort_keys=True))


def _cmd_tree(args) -> None:
    proba = load_feature_matrix(args.proba)
    labels = load_labels(args.labels, k=proba.dim, features=proba)
    tree = hierarchy.build_category_tree(proba.data, labels, args.max_levels)
    tree.save(args.out)


def _cmd_keywords(args) -> None:
    docs = textmine.load_documents(args.docs)
    labels = load_labels(args.labels)
    stop = textmine.load_stopwords(args.stopwords) if args.stopwords else textmine.STOPWORDS
    report = textmine.extract_keywords(docs, labels, args.top_n, args.commonality, stop)
    report.save(args.out)


def _cmd_encode(args) -> None:
    if args.method == "pca":
        x = load_feature_matrix(args.input)
        model = encoding.fit_pca(x, args.dim)
        out = encoding.apply_pca(model, x)
        if args.model_out:
            model.save(args.model_out)
    else:
        patches = load_patches(args.input)
        if args.method == "vlad":
            cb = encoding.fit_codebook(patches, args.k or 64, args.seed)
            out = encoding.encode_images(patches, lambda im: encoding.encode_vlad(im, cb))
            if args.model_out:
                cb.save(args.model_out)
        elif args.method == "fisher":
            gmm = encoding.fit_gmm(patches, args.k or 64, args.seed)
            out = encoding.encode_images(patches, lambda im: encoding.encode_fisher(im, gmm))
            if args.model_out:
                gmm.save(args.model_out)
        else:
            if args.groups:
                groups = load_labels(args.groups)
            else:
                groups = patchmine.random_groups(patches.image_ids, args.k or 2, args.seed)
            cfg = patchmine.MiningConfig(k_top=args.k_top, min_support=args.min_support)
            vocab = patchmine.mine_vocabulary(patches, groups, cfg)
            out = patchmine.encode_patch_images(patches, vocab)
            if args.model_out:
                vocab.save(args.model_out, Path(args.model_out).with_suffix(".json"))
        if args.dim:
            model = encoding.fit_pca(out, min(args.dim, out.n_items, out.dim))
            out = encoding.apply_pca(model, out)
    write_feature_matrix(out, args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldpo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("run", help="run the full loop from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("cluster", help="cluster one feature file")
    s.add_argument("--method", choices=("kmeans", "rim"), required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, help="k for kmeans, initial over-segmentation for rim")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_cluster)

    s = sub.add_parser("metrics", help="purity and NMI between two label files")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=_cmd_metrics)

    s = sub.add_parser("tree", help="category tree from class probabilities")
    s.add_argument("--proba", required=True, help="N x K feature-matrix file")
    s.add_argument("--labels", required=True)
    s.add_argument("--max-levels", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_tree)

    s = sub.add_parser("keywords", help="per-cluster keyword report")
    s.add_argument("--docs", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--top-n", type=int, default=10)
    s.add_argument("--commonality", type=float, default=0.8)
    s.add_argument("--stopwords")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_keywords)

    s = sub.add_parser("encode", help="PCA / VLAD / Fisher / bag-of-elements encoding")
    s.add_argument("--method", choices=("pca", "vlad", "fisher", "patch"), required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dim", type=int, help="PCA output dimension")
    s.add_argument("--k", type=int, help="codebook size, GMM components or random groups")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--groups", help="labels CSV grouping images for pattern mining")
    s.add_argument("--k-top", type=int, default=20)
    s.add_argument("--min-support", type=float, default=0.01)
    s.add_argument("--model-out")
    s.set_defaults(func=_cmd_encode)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "encode" and args.method == "pca" and not args.dim:
            raise UsageError("pca encoding needs --dim")
        args.func(args)
    except LoopError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if isinstance(e.cause, ValidationError) else 2
    except (ValidationError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
