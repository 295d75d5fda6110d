"""Embed each modality of a synthetic dataset with t-SNE and group by distance.

Prints the 2-D centroid of every modality, the distance matrix, and the
groups found at the median threshold and at a sweep of thresholds.
"""
import numpy as np

from mbsl import datagen
from mbsl.grouping import embed_modalities, group_by_threshold, inter_modal_distances, median_threshold

ds = datagen.generate(seed=0, n_windows=512, fs=50.0, window_len=256, specs=datagen.default_specs())
centroids = embed_modalities(ds, method="tsne", seed=0)
D = inter_modal_distances(centroids)

for name, (x, y) in zip(ds.names, centroids):
    print(f"{name:>10}  ({x:7.2f}, {y:7.2f})")
print("\ndistances\n", np.array2string(D, precision=2))

thr = median_threshold(D)
print(f"\nmedian threshold {thr:.2f} -> groups {group_by_threshold(D, thr).groups}")
for i in np.geomspace(D[D > 0].min() * 0.5, D.max() * 1.5, 6):
    print(f"threshold {i:8.2f} -> {len(group_by_threshold(D, i).groups)} groups")
