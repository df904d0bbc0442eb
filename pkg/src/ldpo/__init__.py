"""Looped deep pseudo-task optimization: joint feature and label mining.

The package is organised by stage of the loop::

    core        feature/label/patch containers, binary + CSV IO, splits
    encoding    PCA, VLAD and Fisher vector pooling
    patchmine   transactions, frequent patterns, LDA detectors, merging
    clustering  k-means and RIM discriminative clustering
    metrics     purity, NMI, top-k accuracy, class score matrices
    pseudotask  shallow softmax encoder trained on cluster labels
    hierarchy   confusion affinities and affinity-propagation category tree
    textmine    per-cluster keyword reports
    driver      the loop itself
"""

from ldpo.core import (
    FeatureMatrix,
    FormatError,
    LabelVector,
    LdpoError,
    LoopTrace,
    PatchActivationSet,
    PatchImage,
    SplitAssignment,
    ValidationError,
    load_feature_matrix,
    load_labels,
    load_patches,
    make_split,
    write_feature_matrix,
    write_labels,
    write_patches,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureMatrix",
    "FormatError",
    "LabelVector",
    "LdpoError",
    "LoopTrace",
    "PatchActivationSet",
    "PatchImage",
    "SplitAssignment",
    "ValidationError",
    "load_feature_matrix",
    "load_labels",
    "load_patches",
    "make_split",
    "write_feature_matrix",
    "write_labels",
    "write_patches",
]
