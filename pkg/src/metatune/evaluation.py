"""Detection metrics: IoU, VOC-style AP, mAP, harmonic mean and CI."""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .synthbench import box_iou, iou_matrix


class Detection(NamedTuple):
    image_id: int
    x: int
    y: int
    w: int
    h: int
    class_id: int
    score: float

    @property
    def box(self):
        return (self.x, self.y, self.w, self.h)


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h, ...) boxes."""
    return box_iou(a, b)


def ap_from_ranking(is_tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP for detections already sorted by confidence.

    Each true positive adds ``1 / n_gt`` recall at the precision envelope
    (best precision at this rank or later).  Envelope values are ratios of
    small integers, so the sum is taken exactly and rounded once.
    """
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt == 0 or not is_tp.any():
        return 0.0
    tp = np.cumsum(is_tp)
    rank = np.arange(1, is_tp.size + 1)
    precision = tp / rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    values, counts = np.unique(envelope[is_tp], return_counts=True)
    # recover the integer ratio behind each envelope value; distinct ratios
    # with denominators this small never share a double
    first = {}
    for k in np.flatnonzero(np.isin(precision, values)):
        first.setdefault(precision[k], k)
    total = sum((Fraction(int(c) * int(tp[first[v]]), int(rank[first[v]]))
                 for v, c in zip(values, counts)), Fraction(0))
    return float(total / n_gt)


def match_detections(dets: Sequence, gts: Sequence, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy VOC matching; returns TP flags in descending-confidence order.

    ``dets`` are (image_id, box, score) triples and ``gts`` (image_id, box)
    pairs of a single class.  Ties in confidence keep insertion order.
    """
    order = sorted(range(len(dets)), key=lambda k: -dets[k][2])
    by_image: dict = {}
    for g, (image_id, box) in enumerate(gts):
        by_image.setdefault(image_id, []).append((g, box))
    matched: set[int] = set()
    flags = np.zeros(len(dets), dtype=bool)
    for rank, k in enumerate(order):
        image_id, box, _ = dets[k]
        best, best_iou = None, iou_thr
        for g, gbox in by_image.get(image_id, ()):
            if g in matched:
                continue
            o = box_iou(box, gbox)
            if o >= best_iou:
                best, best_iou = g, o
        if best is not None:
            matched.add(best)
            flags[rank] = True
    return flags


def average_precision(dets: Sequence, gts: Sequence, iou_thr: float = 0.5) -> float:
    """AP of one class; 0 when there are no ground truths."""
    return ap_from_ranking(match_detections(dets, gts, iou_thr), len(gts))


def class_ap(dets: Sequence, gts: Sequence, iou_thr: float = 0.5) -> tuple[float, bool]:
    """(AP, empty) where ``empty`` flags a class with neither GTs nor detections."""
    if not gts and not dets:
        return 0.0, True
    return average_precision(dets, gts, iou_thr), False


def mean_ap(per_class_ap: Mapping[int, float], classes: Iterable[int],
            empty: Iterable[int] = ()) -> float:
    """Arithmetic mean AP over ``classes``, skipping flagged empty classes."""
    classes = list(classes)
    if not classes:
        raise ValueError("mean AP over an empty class subset")
    empty = set(empty)
    kept = [per_class_ap[c] for c in classes if c not in empty]
    if not kept:
        raise ValueError("every class in the subset is empty")
    return float(np.mean(kept))


def harmonic_mean(map_base: float, map_novel: float) -> float:
    a, b = float(map_base), float(map_novel)
    if a <= 0.0 or b <= 0.0:
        return 0.0
    return 2.0 * a * b / (a + b)


def confidence_interval(scores: Sequence[float]) -> float:
    """Half-width 1.96 s / sqrt(n) of a 95% interval, s with n - 1 dof."""
    scores = np.asarray(scores, dtype=float)
    if scores.size < 2:
        raise ValueError("a confidence interval needs at least two runs")
    return float(1.96 * scores.std(ddof=1) / math.sqrt(scores.size))


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map_base: float
    map_novel: float
    map_all: float
    hm: float
    n_images: int
    empty_classes: set[int] = field(default_factory=set)
    class_names: dict[int, str] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("map_base", self.map_base), ("map_novel", self.map_novel),
               ("map_all", self.map_all), ("hm", self.hm), ("n_images", self.n_images)]
        out += [(f"ap_{c}", ap) for c, ap in sorted(self.per_class_ap.items())]
        return out

    def to_text(self) -> str:
        lines = [f"images evaluated: {self.n_images}",
                 f"mAP base  : {100 * self.map_base:6.2f}",
                 f"mAP novel : {100 * self.map_novel:6.2f}",
                 f"mAP all   : {100 * self.map_all:6.2f}",
                 f"HM        : {100 * self.hm:6.2f}",
                 "per class AP:"]
        for c, ap in sorted(self.per_class_ap.items()):
            name = self.class_names.get(c, str(c))
            flag = "  (empty)" if c in self.empty_classes else ""
            lines.append(f"  {c:3d} {name:<14s} {100 * ap:6.2f}{flag}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for name, value in self.rows():
                w.writerow([name, repr(float(value)) if name != "n_images" else value])


def _safe_mean(per_class, classes, empty):
    try:
        return mean_ap(per_class, classes, empty)
    except ValueError:
        return 0.0


def evaluate_detections(detections: Iterable[Detection], annotations: Mapping[int, Sequence] | Sequence,
                        image_ids: Iterable[int], base_classes: Iterable[int],
                        novel_classes: Iterable[int], iou_thr: float = 0.5,
                        class_names: Mapping[int, str] | None = None) -> EvalReport:
    """Per-class AP over ``image_ids`` and the base/novel/all summaries.

    ``annotations`` maps image id to (x, y, w, h, class_id) records (a list
    indexed by image id works too).  A subset
    whose classes are all empty contributes an mAP of 0.
    """
    if not isinstance(annotations, Mapping):
        annotations = dict(enumerate(annotations))
    image_ids = sorted(set(image_ids))
    keep = set(image_ids)
    base, novel = sorted(base_classes), sorted(novel_classes)
    dets_by_class: dict[int, list] = {c: [] for c in base + novel}
    for d in detections:
        if d.image_id in keep and d.class_id in dets_by_class:
            dets_by_class[d.class_id].append((d.image_id, d.box, d.score))
    gts_by_class: dict[int, list] = {c: [] for c in base + novel}
    for i in image_ids:
        for a in annotations.get(i, ()):
            if a[4] in gts_by_class:
                gts_by_class[a[4]].append((i, tuple(a[:4])))
    per_class, empty = {}, set()
    for c in base + novel:
        per_class[c], is_empty = class_ap(dets_by_class[c], gts_by_class[c], iou_thr)
        if is_empty:
            empty.add(c)
    map_base = _safe_mean(per_class, base, empty)
    map_novel = _safe_mean(per_class, novel, empty)
    return EvalReport(per_class, map_base, map_novel, _safe_mean(per_class, base + novel, empty),
                      harmonic_mean(map_base, map_novel), len(image_ids), empty,
                      dict(class_names or {}))


def read_detections(path) -> list[Detection]:
    with open(path, newline="") as fh:
        return [Detection(int(r["image_id"]), int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"]),
                          int(r["class_id"]), float(r["score"])) for r in csv.DictReader(fh)]


def write_detections(path, detections: Iterable[Detection]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "x", "y", "w", "h", "class_id", "score"])
        for d in detections:
            w.writerow([d.image_id, d.x, d.y, d.w, d.h, d.class_id, repr(float(d.score))])


class RoiEvaluator:
    """Vectorized AP over a fixed set of images with cached proposals.

    Every proposal is matched ahead of time to the ground truth it overlaps
    with IoU >= ``iou_thr`` (at most one, since ground truths do not
    overlap), which reduces greedy matching to first-hit detection.
    """

    def __init__(self, benchmark, image_ids: Iterable[int], iou_thr: float = 0.5):
        self.image_ids = sorted(set(image_ids))
        feats, gt_id, gt_cls, boxes, owner = [], [], [], [], []
        n_gt = np.zeros(benchmark.spec.n_classes, dtype=np.int64)
        offset = 0
        for i in self.image_ids:
            rois = benchmark.rois(i)
            anns = benchmark.annotations[i]
            gts = np.array([a[:4] for a in anns], dtype=float)
            ov = iou_matrix(rois.boxes, gts)
            best = ov.argmax(axis=1)
            hit = ov[np.arange(len(best)), best] >= iou_thr
            if (np.sum(ov >= iou_thr, axis=1) > 1).any():
                raise ValueError(f"image {i}: a proposal overlaps two ground truths")
            gt_id.append(np.where(hit, best + offset, -1))
            gt_cls.append(np.where(hit, np.array([a.class_id for a in anns])[best], -1))
            feats.append(rois.features)
            boxes.append(rois.boxes)
            owner.append(np.full(len(best), i))
            for a in anns:
                n_gt[a.class_id] += 1
            offset += len(anns)
        self.features = np.concatenate(feats)
        self.gt_id = np.concatenate(gt_id)
        self.gt_class = np.concatenate(gt_cls)
        self.boxes = np.concatenate(boxes)
        self.owner = np.concatenate(owner)
        self.n_gt = n_gt

    def per_class_ap(self, pred_class: np.ndarray, score: np.ndarray,
                     classes: Iterable[int]) -> tuple[dict[int, float], set[int]]:
        """AP per class for predictions on the cached proposals (-1 = none)."""
        out, empty = {}, set()
        for c in classes:
            sel = np.flatnonzero(pred_class == c)
            if self.n_gt[c] == 0 and sel.size == 0:
                out[c] = 0.0
                empty.add(c)
                continue
            order = sel[np.argsort(-score[sel], kind="stable")]
            candidate = np.where(self.gt_class[order] == c, self.gt_id[order], -1)
            tp = candidate >= 0
            if tp.any():
                hits = np.flatnonzero(tp)
                _, first = np.unique(candidate[hits], return_index=True)
                tp[:] = False
                tp[hits[first]] = True
            out[c] = ap_from_ranking(tp, int(self.n_gt[c]))
        return out, empty
