"""Mid-level patterns, image clusters and the words attached to them.

Each synthetic image is a bag of patch activations.  Images of one hidden
category share a pair of strongly firing channels on half of their patches.
The loop starts from random image groups, mines frequent channel sets per
group, trains an LDA detector per pattern, and encodes every image by its
best detector responses.  Clustering those codes and mining again repeats
until the grouping stabilises.  A short report attached to each image then
yields per-cluster keywords, with words common to every cluster removed.

    python3 demos/03_patch_mining_and_keywords.py
"""

import numpy as np

from ldpo.core import LabelVector, PatchActivationSet, PatchImage
from ldpo.driver import DatasetManifest, LdpoConfig, run_ldpo
from ldpo.metrics import purity
from ldpo.textmine import DocumentSet

rng = np.random.default_rng(5)
findings = ["nodule", "effusion", "fracture"]
images, texts, truth = [], {}, []
for i in range(45):
    c = i % 3
    act = rng.random((8, 12))
    act[:4, 2 * c:2 * c + 2] += 3.0
    image_id = f"img{i:03d}"
    images.append(PatchImage.from_activations(image_id, act))
    extra = rng.choice(["small", "left", "right", "stable"], 2)
    texts[image_id] = f"Study shows {findings[c]} {' '.join(extra)}; {findings[c]} noted."
    truth.append(c)
patches = PatchActivationSet.from_images(images)

config = LdpoConfig.from_dict({
    "encoder": "patch_mining", "k": 3, "max_iterations": 6,
    "patch_mining": {"k_top": 4, "min_support": 0.2, "per_cluster": 5},
    "pseudotask": {"hidden_dim": 8, "epochs": 30},
    "keywords_commonality": 1.0})
dataset = DatasetManifest(patches=patches, documents=DocumentSet.from_texts(texts),
                          truth=LabelVector.from_labels(truth, patches.image_ids))
result = run_ldpo(config, dataset)

for rec in result.trace:
    print(f"iteration {rec.iteration}: purity vs hidden categories "
          f"{rec.extra['purity_truth']:.3f}")
print(f"converged={result.converged}; final purity "
      f"{purity(result.labels.labels, truth):.3f}")

print(f"\n{len(result.vocabulary)} mid-level elements after merging, for example:")
for element in result.vocabulary.elements[:4]:
    print(f"  channels {element.pattern.itemset} from groups {sorted(element.provenance)}")

print("\nkeywords per cluster (words shared by all clusters removed: "
      f"{', '.join(result.keywords.removed_common)})")
for cluster, words in result.keywords.keywords.items():
    print(f"  cluster {cluster}: " + ", ".join(f"{t} ({n})" for t, n in words[:3]))
