"""A walk through the synthetic detection benchmark.

Renders the default benchmark, prints what is in each pool, writes a few
images as PPM files and shows how cleanly the cached ROI features separate
the classes.

    python3 demos/01_benchmark_tour.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from metatune.synthbench import POOLS, generate, write_ppm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/tour")
out.mkdir(parents=True, exist_ok=True)

bench = generate()
spec = bench.spec
print(f"{len(bench)} images of {spec.image_size}x{spec.image_size}, {spec.n_classes} classes")
print("base:", [spec.class_name(c) for c in spec.base_classes])
print("novel:", [spec.class_name(c) for c in spec.novel_classes])

for name in POOLS:
    ids = bench.pool(name)
    counts = bench.instance_counts(ids)
    print(f"{name:>9}: {len(ids):5d} images, instances per class {counts.tolist()}")

# a handful of query images to look at
for i in bench.pool("query")[:4]:
    write_ppm(out / f"query_{i:05d}.ppm", bench.images[i])
    print(f"image {i}:", [(spec.class_name(a.class_id), a.x, a.y, a.w, a.h) for a in bench.annotations[i]])

# class-mean features of the positive proposals, compared by cosine after
# removing what all classes share
feats, labels = [], []
for i in bench.pool("query")[:400]:
    rois = bench.rois(i)
    keep = rois.labels >= 0
    feats.append(rois.features[keep])
    labels.append(rois.labels[keep])
feats, labels = np.concatenate(feats), np.concatenate(labels)
present = np.unique(labels)
means = np.stack([feats[labels == c].mean(axis=0) for c in present]) - feats.mean(axis=0)
means /= np.linalg.norm(means, axis=1, keepdims=True)
cos = means @ means.T
off = cos[~np.eye(len(present), dtype=bool)]
print(f"positive ROIs: {len(labels)}, feature dim {feats.shape[1]}")
print(f"cosine between centered class means: max {off.max():.3f}, mean {off.mean():.3f}")
pairs = np.unravel_index(np.argsort(-cos, axis=None), cos.shape)
a, b = next((i, j) for i, j in zip(*pairs) if i < j)
print(f"closest pair: {spec.class_name(present[a])} / {spec.class_name(present[b])}")
print("images written to", out)
