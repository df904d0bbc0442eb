"""The loop finds structure that raw k-means cannot see.

Five classes live on concentric spheres around one origin, so every class
has the same mean and k-means on the raw coordinates cuts the data into
angular wedges.  Each loop iteration trains a small network on the current
cluster labels and re-clusters its hidden activations.  Rectified units
respond in proportion to the radius, so the shells separate a little more
with every pass until adjacent clusterings agree.

    python3 demos/02_looped_refinement.py
"""

import numpy as np

from ldpo.core import FeatureMatrix, LabelVector
from ldpo.driver import DatasetManifest, LdpoConfig, run_ldpo
from ldpo.pseudotask import TrainConfig

rng = np.random.default_rng(0)
n_per = 200
truth = np.repeat(np.arange(5), n_per)
u = rng.normal(size=(truth.size, 3))
u /= np.linalg.norm(u, axis=1, keepdims=True)
x = u * (1.5 + truth)[:, None] + 0.15 * rng.normal(size=(truth.size, 3))

features = FeatureMatrix.from_array(x)
dataset = DatasetManifest(features=features,
                          truth=LabelVector.from_labels(truth, features.item_ids))
config = LdpoConfig(k=5, kmeans_restarts=5,
                    pseudotask=TrainConfig(hidden_dim=16, epochs=50))
result = run_ldpo(config, dataset)

print("iter  purity-vs-truth  purity-vs-prev  nmi-vs-prev  top-1")
for rec in result.trace:
    adj = (f"{rec.purity_adjacent:14.3f}  {rec.nmi_adjacent:11.3f}"
           if rec.purity_adjacent is not None else f"{'-':>14}  {'-':>11}")
    top1 = f"{rec.top1:.3f}" if rec.top1 is not None else "-"
    print(f"{rec.iteration:4d}  {rec.extra['purity_truth']:15.3f}  {adj}  {top1}")
print(f"converged={result.converged} after {len(result.trace)} iterations")

tree = result.tree
print(f"\ncategory tree from the final encoder: {len(tree.levels)} level(s)")
for depth, level in enumerate(tree.levels):
    print(f"  level {depth}: " + " ".join(str(node.classes) for node in level))
