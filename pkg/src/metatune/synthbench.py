"""A small, fully deterministic few-shot detection benchmark.

Scenes are RGB images holding one to a few colored shapes on a dark,
noisy background.  A class is a (shape, hue band) pair; with the default
two bands per shape, sibling classes differ only in hue, which makes
strong hue augmentation genuinely harmful.

Region proposals stand in for an RPN (ground-truth boxes with jitter plus
random background boxes) and a fixed 33-d descriptor stands in for a
backbone, so a linear softmax head is the whole trainable detector.

On disk a benchmark is a directory::

    images/NNNN.ppm      binary P6, 8-bit
    annotations.csv      image_id,x,y,w,h,class_id
    classes.csv          class_id,name
    splits.csv           image_id,pool      (pretrain | support | query)
    benchmark.txt        key = value generation settings
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .augment import Strengths, apply_strengths, hsv_to_rgb
from .streams import stream

SHAPES = ("circle", "square", "triangle", "cross", "bar")
POOLS = ("pretrain", "support", "query")
FEATURE_DIM = 33
HIST_BINS = 8
# the shape mask keeps pixels brighter than the midpoint of the crop's own
# value range, so it survives brightness and contrast changes; nearly flat
# crops get an empty mask
MASK_MIN_SPREAD = 0.06
# (p, q) orders of the mask moments.  (0, 0) is the fraction of the box the
# mask fills, which separates discs from squares where the higher moments
# barely do; the others are normalized central moments with a per-order
# scale that brings them to roughly unit range, passed through a signed
# log1p because sparse or fragmented masks (a sliver of an object in a
# background box) give values in the thousands
SHAPE_MOMENTS = ((0, 0), (2, 0), (0, 2), (2, 2), (4, 0), (0, 4), (0, 3))
MOMENT_SCALE = {2: 10.0, 3: 20.0, 4: 40.0}


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    n_classes: int = 10
    n_novel: int = 3
    objects_per_image: int = 3
    n_images: int = 2000
    query_fraction: float = 0.15
    support_fraction: float = 0.15
    noise_std: float = 0.02
    band_halfwidth: float = 30.0
    band_spacing: float = 120.0
    illumination: float = 0.15
    jitter: float = 0.2
    negatives_per_positive: int = 3

    def __post_init__(self):
        if self.n_classes < 4:
            raise ValueError("need at least 4 classes")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if not 1 <= self.n_novel < self.n_classes:
            raise ValueError("n_novel must be between 1 and n_classes - 1")
        if self.objects_per_image < 1:
            raise ValueError("objects_per_image must be positive")
        if self.n_bands * self.band_spacing > 360.0 or self.band_spacing < 2 * self.band_halfwidth:
            raise ValueError("hue bands must not overlap")
        if self.query_fraction + self.support_fraction >= 1.0:
            raise ValueError("query and support fractions leave no pretrain pool")

    @property
    def n_bands(self) -> int:
        return math.ceil(self.n_classes / len(SHAPES))

    def class_shape(self, class_id: int) -> str:
        return SHAPES[class_id % len(SHAPES)]

    def class_band(self, class_id: int) -> int:
        return class_id // len(SHAPES)

    def band_center(self, band: int) -> float:
        return (30.0 + band * self.band_spacing) % 360.0

    def class_name(self, class_id: int) -> str:
        return f"{self.class_shape(class_id)}-{int(self.band_center(self.class_band(class_id)))}"

    @property
    def novel_classes(self) -> tuple[int, ...]:
        return tuple(range(self.n_classes - self.n_novel, self.n_classes))

    @property
    def base_classes(self) -> tuple[int, ...]:
        return tuple(range(self.n_classes - self.n_novel))


class BoxAnnotation(NamedTuple):
    x: int
    y: int
    w: int
    h: int
    class_id: int


def box_iou(a, b) -> float:
    ax, ay, aw, ah = a[:4]
    bx, by, bw, bh = b[:4]
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) xywh boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


# ---------------------------------------------------------------- rendering

def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w]
    u = (u + 0.5) / w
    v = (v + 0.5) / h
    if shape == "circle":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape in ("square", "bar"):
        return np.ones((h, w), dtype=bool)
    if shape == "triangle":
        return np.abs(u - 0.5) <= v / 2.0
    if shape == "cross":
        return (np.abs(u - 0.5) <= 1.0 / 6.0) | (np.abs(v - 0.5) <= 1.0 / 6.0)
    raise ValueError(f"unknown shape {shape!r}")


def _object_box(spec: SceneSpec, shape: str, rng: np.random.Generator):
    side = int(rng.integers(round(0.22 * spec.image_size), round(0.4 * spec.image_size) + 1))
    if shape == "bar":
        thin = max(3, round(side / 3))
        return (side, thin) if rng.random() < 0.5 else (thin, side)
    return side, side


def _place(spec: SceneSpec, w: int, h: int, taken: list, rng: np.random.Generator):
    for _ in range(50):
        x = int(rng.integers(0, spec.image_size - w + 1))
        y = int(rng.integers(0, spec.image_size - h + 1))
        if all(x + w + 1 <= tx or tx + tw + 1 <= x or y + h + 1 <= ty or ty + th + 1 <= y
               for tx, ty, tw, th in taken):
            return x, y
    return None


def render_scene(spec: SceneSpec, rng: np.random.Generator):
    """Render one image; returns (uint8 image, list of BoxAnnotation)."""
    size = spec.image_size
    bg_hsv = np.array([rng.random(), rng.uniform(0.0, 0.3), rng.uniform(0.08, 0.3)])
    img = np.broadcast_to(hsv_to_rgb(bg_hsv), (size, size, 3)).copy()
    n_obj = int(rng.integers(1, spec.objects_per_image + 1))
    annotations: list[BoxAnnotation] = []
    taken: list[tuple[int, int, int, int]] = []
    for _ in range(n_obj):
        class_id = int(rng.integers(0, spec.n_classes))
        shape = spec.class_shape(class_id)
        w, h = _object_box(spec, shape, rng)
        spot = _place(spec, w, h, taken, rng)
        hue = spec.band_center(spec.class_band(class_id)) + rng.uniform(-spec.band_halfwidth, spec.band_halfwidth)
        color = hsv_to_rgb(np.array([(hue / 360.0) % 1.0, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0)]))
        if spot is None:
            continue
        x, y = spot
        mask = shape_mask(shape, w, h)
        img[y:y + h, x:x + w][mask] = color
        taken.append((x, y, w, h))
        annotations.append(BoxAnnotation(x, y, w, h, class_id))
    if not annotations:
        # the first placement on an empty canvas always succeeds
        raise RuntimeError("scene without objects")
    gain = 1.0 + spec.illumination * rng.uniform(-1.0, 1.0)
    img = img * gain + rng.normal(0.0, spec.noise_std, size=img.shape)
    img = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return img, annotations


# ---------------------------------------------------------------- proposals

def _clip_box(x, y, w, h, size):
    x = int(min(max(round(x), 0), size - 1))
    y = int(min(max(round(y), 0), size - 1))
    w = int(max(1, min(round(w), size - x)))
    h = int(max(1, min(round(h), size - y)))
    return x, y, w, h


def _max_overlap(box, gts: np.ndarray) -> float:
    """Largest of IoU and covered-fraction-of-object against any ground truth."""
    b = np.array([box], dtype=float)
    iou = iou_matrix(b, gts)[0]
    x1 = np.maximum(b[0, 0], gts[:, 0])
    y1 = np.maximum(b[0, 1], gts[:, 1])
    x2 = np.minimum(b[0, 0] + b[0, 2], gts[:, 0] + gts[:, 2])
    y2 = np.minimum(b[0, 1] + b[0, 3], gts[:, 1] + gts[:, 3])
    covered = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None) / (gts[:, 2] * gts[:, 3])
    return float(max(iou.max(), covered.max()))


def propose_regions(image_size: int, annotations, rng: np.random.Generator, *,
                    jitter: float = 0.2, negatives_per_positive: int = 3,
                    max_negative_iou: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Jittered ground-truth boxes plus random background boxes.

    Returns ``(boxes, source)`` where ``boxes`` is (n, 4) xywh and ``source``
    holds the index of the annotation a positive came from, or -1.
    """
    boxes: list[tuple[int, int, int, int]] = []
    source: list[int] = []
    gts = np.array([a[:4] for a in annotations], dtype=float).reshape(-1, 4)
    for k, (gx, gy, gw, gh) in enumerate(gts):
        chosen = (int(gx), int(gy), int(gw), int(gh))
        if jitter > 0:
            for _ in range(100):
                dx, dy, sw, sh = rng.uniform(-jitter, jitter, size=4)
                cand = _clip_box(gx + dx * gw, gy + dy * gh, gw * (1 + sw), gh * (1 + sh), image_size)
                if box_iou(cand, (gx, gy, gw, gh)) >= 0.5:
                    chosen = cand
                    break
        boxes.append(chosen)
        source.append(k)
    lo, hi = round(0.2 * image_size), round(0.45 * image_size)
    for _ in range(negatives_per_positive * len(gts)):
        for _ in range(200):
            w, h = rng.integers(lo, hi + 1, size=2)
            x = rng.integers(0, image_size - w + 1)
            y = rng.integers(0, image_size - h + 1)
            cand = (int(x), int(y), int(w), int(h))
            if len(gts) == 0 or _max_overlap(cand, gts) < max_negative_iou:
                boxes.append(cand)
                source.append(-1)
                break
    return np.array(boxes, dtype=np.int64).reshape(-1, 4), np.array(source, dtype=np.int64)


# ---------------------------------------------------------------- features

class CropSet(NamedTuple):
    """Pixels of several crops flattened into one array, with segment ids."""

    pixels: np.ndarray  # (P, 3) float
    segment: np.ndarray  # (P,) int
    lx: np.ndarray  # (P,) local column + 0.5
    ly: np.ndarray  # (P,) local row + 0.5
    sizes: np.ndarray  # (n,) pixel count per crop
    geometry: np.ndarray  # (n, 2) box-shape descriptor
    origin: np.ndarray  # (n,) index of the owning image in the batch


def box_geometry(boxes: np.ndarray, image_size: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    aspect = np.log(boxes[:, 2] / boxes[:, 3]) / math.log(3.0)
    scale = np.sqrt(boxes[:, 2] * boxes[:, 3]) / image_size
    return np.stack([aspect, scale], axis=1)


def gather_crops(images, boxes_per_image) -> CropSet:
    """Cut every box out of its image (images: float (H, W, 3) arrays)."""
    pix, seg, lxs, lys, sizes, geo, origin = [], [], [], [], [], [], []
    n = 0
    for i, (img, boxes) in enumerate(zip(images, boxes_per_image)):
        boxes = np.asarray(boxes).reshape(-1, 4)
        for x, y, w, h in boxes:
            crop = img[y:y + h, x:x + w]
            hh, ww = crop.shape[:2]
            pix.append(crop.reshape(-1, 3))
            seg.append(np.full(hh * ww, n, dtype=np.int64))
            lx, ly = np.meshgrid(np.arange(ww) + 0.5, np.arange(hh) + 0.5)
            lxs.append(lx.ravel())
            lys.append(ly.ravel())
            sizes.append(hh * ww)
            origin.append(i)
            n += 1
        geo.append(box_geometry(boxes, img.shape[0]))
    if n == 0:
        empty = np.zeros(0)
        return CropSet(np.zeros((0, 3)), empty.astype(np.int64), empty, empty,
                       empty.astype(np.int64), np.zeros((0, 2)), empty.astype(np.int64))
    return CropSet(np.concatenate(pix).astype(float), np.concatenate(seg), np.concatenate(lxs),
                   np.concatenate(lys), np.array(sizes), np.concatenate(geo), np.array(origin))


def crop_features(crops: CropSet, pixels: np.ndarray | None = None) -> np.ndarray:
    """33-d descriptor of every crop; ``pixels`` overrides ``crops.pixels``.

    Layout: 3 x 8-bin channel histograms (fractions), the fill fraction and
    6 log-compressed normalized central moments of the bright-pixel mask
    (see ``SHAPE_MOMENTS``), log-aspect and relative scale of the box.
    """
    px = crops.pixels if pixels is None else pixels
    n = len(crops.sizes)
    if n == 0:
        return np.zeros((0, FEATURE_DIM))
    seg = crops.segment
    bins = np.minimum((px * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    idx = seg[:, None] * (3 * HIST_BINS) + np.arange(3) * HIST_BINS + bins
    hist = np.bincount(idx.ravel(), minlength=n * 3 * HIST_BINS).reshape(n, 3 * HIST_BINS)
    hist = hist / crops.sizes[:, None]

    value = px.max(axis=1)
    starts = np.concatenate([[0], np.cumsum(crops.sizes)[:-1]])
    lo = np.minimum.reduceat(value, starts)
    hi = np.maximum.reduceat(value, starts)
    m = ((value > 0.5 * (lo + hi)[seg]) & ((hi - lo) >= MASK_MIN_SPREAD)[seg]).astype(float)
    area = np.bincount(seg, weights=m, minlength=n)
    ok = area >= 3.0
    area = np.where(ok, area, 1.0)
    xc = np.bincount(seg, weights=m * crops.lx, minlength=n) / area
    yc = np.bincount(seg, weights=m * crops.ly, minlength=n) / area
    dx = crops.lx - xc[seg]
    dy = crops.ly - yc[seg]
    cols = []
    for p, q in SHAPE_MOMENTS:
        if p + q == 0:
            cols.append(area / crops.sizes)
            continue
        mu = np.bincount(seg, weights=m * dx**p * dy**q, minlength=n)
        v = MOMENT_SCALE[p + q] * mu / area ** (1.0 + (p + q) / 2.0)
        cols.append(np.sign(v) * np.log1p(np.abs(v)))
    moments = np.stack(cols, axis=1)
    moments[~ok] = 0.0
    return np.concatenate([hist, moments, crops.geometry], axis=1)


def extract_features(image: np.ndarray, box) -> np.ndarray:
    """Descriptor of one box of a float (H, W, 3) image."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.max(initial=0.0) > 1.0:
        raise ValueError("expected a float image with channels in [0, 1]")
    x, y, w, h = (int(v) for v in box[:4])
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > image.shape[1] or y + h > image.shape[0]:
        raise ValueError(f"box {tuple(box[:4])} is not inside the image")
    return crop_features(gather_crops([image], [np.array([[x, y, w, h]])]))[0]


def augmented_features(crops: CropSet, strengths: list[Strengths]) -> np.ndarray:
    """Features after applying per-image strengths to every crop's pixels."""
    px = crops.pixels.copy()
    for i, st in enumerate(strengths):
        sel = crops.origin[crops.segment] == i
        if sel.any():
            px[sel] = apply_strengths(px[sel], st)
    return crop_features(crops, px)


# ---------------------------------------------------------------- benchmark

class ImageRois(NamedTuple):
    boxes: np.ndarray  # (n, 4)
    labels: np.ndarray  # (n,) class id, -1 for background
    source: np.ndarray  # (n,) annotation index or -1
    features: np.ndarray  # (n, FEATURE_DIM)


class Benchmark:
    """Images, annotations and pools, plus cached proposals and features."""

    def __init__(self, spec: SceneSpec, seed: int, images: np.ndarray,
                 annotations: list[list[BoxAnnotation]], pools: list[str]):
        self.spec = spec
        self.seed = int(seed)
        self.images = images
        self.annotations = annotations
        self.pools = list(pools)
        self._rois: list[ImageRois] | None = None
        self._crops: dict[int, CropSet] = {}

    def __len__(self) -> int:
        return len(self.images)

    @property
    def class_names(self) -> list[str]:
        return [self.spec.class_name(c) for c in range(self.spec.n_classes)]

    def pool(self, name: str) -> list[int]:
        return [i for i, p in enumerate(self.pools) if p == name]

    def image(self, image_id: int) -> np.ndarray:
        return self.images[image_id].astype(float) / 255.0

    def classes_in(self, image_id: int) -> set[int]:
        return {a.class_id for a in self.annotations[image_id]}

    def instance_counts(self, image_ids=None) -> np.ndarray:
        ids = range(len(self)) if image_ids is None else image_ids
        counts = np.zeros(self.spec.n_classes, dtype=np.int64)
        for i in ids:
            for a in self.annotations[i]:
                counts[a.class_id] += 1
        return counts

    def proposals(self, image_id: int) -> tuple[np.ndarray, np.ndarray]:
        rng = stream(self.seed, "proposals", image_id)
        return propose_regions(self.spec.image_size, self.annotations[image_id], rng,
                               jitter=self.spec.jitter,
                               negatives_per_positive=self.spec.negatives_per_positive)

    def rois(self, image_id: int) -> ImageRois:
        if self._rois is None:
            self._build_rois()
        return self._rois[image_id]

    def crops(self, image_id: int) -> CropSet:
        if image_id not in self._crops:
            self._crops[image_id] = gather_crops([self.image(image_id)], [self.rois(image_id).boxes])
        return self._crops[image_id]

    def _build_rois(self):
        rois = []
        for i in range(len(self)):
            boxes, source = self.proposals(i)
            labels = np.array([self.annotations[i][s].class_id if s >= 0 else -1 for s in source],
                              dtype=np.int64)
            feats = crop_features(gather_crops([self.image(i)], [boxes]))
            rois.append(ImageRois(boxes, labels, source, feats))
        self._rois = rois

    # ------------------------------------------------------------ disk format

    def save(self, root) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            write_ppm(root / "images" / f"{i:04d}.ppm", img)
        with open(root / "annotations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "x", "y", "w", "h", "class_id"])
            for i, anns in enumerate(self.annotations):
                for a in anns:
                    w.writerow([i, a.x, a.y, a.w, a.h, a.class_id])
        with open(root / "classes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "name"])
            for c, name in enumerate(self.class_names):
                w.writerow([c, name])
        with open(root / "splits.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "pool"])
            for i, p in enumerate(self.pools):
                w.writerow([i, p])
        with open(root / "benchmark.txt", "w") as fh:
            fh.write(f"seed = {self.seed}\n")
            for k, v in asdict(self.spec).items():
                fh.write(f"{k} = {v}\n")
        return root

    @classmethod
    def load(cls, root) -> "Benchmark":
        root = Path(root)
        settings = {}
        for line in (root / "benchmark.txt").read_text().splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                settings[k] = v
        seed = int(settings.pop("seed"))
        types = {f.name: f.type for f in fields(SceneSpec)}
        kwargs = {k: (float(v) if types[k] in (float, "float") else int(v))
                  for k, v in settings.items() if k in types}
        spec = SceneSpec(**kwargs)
        with open(root / "splits.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        pools = [""] * len(rows)
        for r in rows:
            pools[int(r["image_id"])] = r["pool"]
        annotations: list[list[BoxAnnotation]] = [[] for _ in pools]
        for image_id, anns in read_annotations(root / "annotations.csv").items():
            annotations[image_id] = anns
        images = np.stack([read_ppm(root / "images" / f"{i:04d}.ppm") for i in range(len(pools))])
        return cls(spec, seed, images, annotations, pools)


def read_annotations(path) -> dict[int, list[BoxAnnotation]]:
    out: dict[int, list[BoxAnnotation]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            a = BoxAnnotation(int(r["x"]), int(r["y"]), int(r["w"]), int(r["h"]), int(r["class_id"]))
            out.setdefault(int(r["image_id"]), []).append(a)
    return out


def write_ppm(path, img: np.ndarray):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).copy()


def generate(spec: SceneSpec = SceneSpec(), seed: int = 0) -> Benchmark:
    """Render ``spec.n_images`` scenes and assign them to pools.

    Classes are drawn uniformly for every image.  An image goes to the
    query or support pool with the configured probabilities; the rest go to
    the pretrain pool when they hold only base classes, otherwise they are
    split evenly between support and query.
    """
    images, annotations, pools = [], [], []
    novel = set(spec.novel_classes)
    for i in range(spec.n_images):
        rng = stream(seed, "scene", i)
        img, anns = render_scene(spec, rng)
        u = rng.random()
        if u < spec.query_fraction:
            pool = "query"
        elif u < spec.query_fraction + spec.support_fraction:
            pool = "support"
        elif novel.isdisjoint(a.class_id for a in anns):
            pool = "pretrain"
        else:
            pool = "support" if rng.random() < 0.5 else "query"
        images.append(img)
        annotations.append(anns)
        pools.append(pool)
    return Benchmark(spec, seed, np.stack(images), annotations, pools)
