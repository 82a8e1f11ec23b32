"""A linear softmax detection head over fixed ROI features.

Column 0 of the head is background; column ``k + 1`` scores the benchmark
class ``model.classes[k]``.  Fine-tuning takes plain gradient-descent steps
on the classification loss from :mod:`metatune.losses`, with the clock
``t = iteration / total_iterations``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .augment import check_magnitude, draw_strengths
from .kernels import AugmentedFeaturizer
from .losses import LossParams, RoiBatch, loss_and_grad
from .synthbench import FEATURE_DIM, crop_features, gather_crops

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A non-finite loss or parameter appeared during training."""


@dataclass
class DetectorModel:
    weights: np.ndarray
    bias: np.ndarray
    classes: tuple[int, ...]
    novel: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        self.classes = tuple(int(c) for c in self.classes)
        self.novel = np.asarray(self.novel, dtype=bool)
        c_total = len(self.classes) + 1
        if self.weights.shape != (self.feature_dim, c_total) or self.bias.shape != (c_total,):
            raise ValueError("weights/bias do not match the class list")
        if self.novel.shape != (c_total,) or self.novel[0]:
            raise ValueError("novel flags must cover every column and background is base")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise TrainingDiverged("non-finite model parameters")

    @classmethod
    def zeros(cls, classes: Sequence[int], novel_classes: Iterable[int] = (),
              feature_dim: int = FEATURE_DIM, class_names: Sequence[str] = ()):
        classes = tuple(classes)
        novel_set = set(novel_classes)
        novel = np.array([False] + [c in novel_set for c in classes])
        return cls(np.zeros((feature_dim, len(classes) + 1)), np.zeros(len(classes) + 1),
                   classes, novel, tuple(class_names))

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_columns(self) -> int:
        return len(self.classes) + 1

    @property
    def novel_classes(self) -> tuple[int, ...]:
        return tuple(c for c, n in zip(self.classes, self.novel[1:]) if n)

    @property
    def base_classes(self) -> tuple[int, ...]:
        return tuple(c for c, n in zip(self.classes, self.novel[1:]) if not n)

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.weights.copy(), self.bias.copy(), self.classes,
                             self.novel.copy(), self.class_names)

    def columns(self, labels: np.ndarray) -> np.ndarray:
        """Map benchmark class ids (-1 = background) to head columns."""
        lut = np.full(max(self.classes, default=0) + 2, -1, dtype=np.int64)
        lut[-1] = 0
        for k, c in enumerate(self.classes):
            lut[c] = k + 1
        cols = lut[np.asarray(labels)]
        if (cols < 0).any():
            raise ValueError("label of a class the model does not know")
        return cols

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.weights + self.bias

    # ------------------------------------------------------------ checkpoint

    def save(self, path):
        names = self.class_names or tuple(str(c) for c in self.classes)
        lines = ["# metatune detector checkpoint v1",
                 f"feature_dim = {self.feature_dim}",
                 f"n_columns = {self.n_columns}",
                 "classes = " + ",".join(str(c) for c in self.classes),
                 "names = " + ",".join(names),
                 "kinds = " + ",".join("novel" if n else "base" for n in self.novel[1:]),
                 "# rows: feature index then bias; columns: background then classes"]
        for row in np.vstack([self.weights, self.bias[None, :]]):
            lines.append(" ".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DetectorModel":
        header, rows = {}, []
        for line in Path(path).read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                header[k] = v
            else:
                rows.append([float(v) for v in line.split()])
        classes = tuple(int(c) for c in header["classes"].split(",") if c)
        kinds = [k == "novel" for k in header["kinds"].split(",") if k]
        names = tuple(n for n in header.get("names", "").split(",") if n)
        values = np.array(rows)
        if values.shape != (int(header["feature_dim"]) + 1, int(header["n_columns"])):
            raise ValueError(f"{path}: parameter block has shape {values.shape}")
        return cls(values[:-1], values[-1], classes, np.array([False] + kinds), names)


@dataclass(frozen=True)
class TrainSchedule:
    total_iterations: int = 300
    learning_rate: float = 0.5
    batch_images: int = 4

    def __post_init__(self):
        if self.total_iterations < 0 or self.learning_rate < 0 or self.batch_images < 1:
            raise ValueError("schedule values must be positive")


@dataclass
class SupportData:
    """ROIs of a set of images, stacked once for repeated mini-batching."""

    image_ids: list[int]
    features: np.ndarray
    columns: np.ndarray
    rows: list[np.ndarray] = field(repr=False)

    @classmethod
    def build(cls, benchmark, image_ids: Sequence[int], model: DetectorModel) -> "SupportData":
        image_ids = list(image_ids)
        if not image_ids:
            raise ValueError("empty support set")
        feats, cols, rows, start = [], [], [], 0
        for i in image_ids:
            rois = benchmark.rois(i)
            feats.append(rois.features)
            cols.append(model.columns(rois.labels))
            rows.append(np.arange(start, start + len(rois.labels)))
            start += len(rois.labels)
        return cls(image_ids, np.concatenate(feats), np.concatenate(cols), rows)


def _pick_images(n_images: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    if batch >= n_images:
        return np.arange(n_images)
    return np.sort(rng.choice(n_images, size=batch, replace=False))


def gradient_step(model: DetectorModel, features: np.ndarray, columns: np.ndarray,
                  params: LossParams, t: float, lr: float) -> float:
    """One in-place gradient-descent step; returns the loss before the step."""
    batch = RoiBatch(model.scores(features), columns, model.novel)
    loss, grad = loss_and_grad(batch, params, t)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at t={t:.3f}")
    model.weights -= lr * (features.T @ grad)
    model.bias -= lr * grad.sum(axis=0)
    return loss


def fine_tune(model: DetectorModel, benchmark, support: Sequence[int], loss_params: LossParams,
              magnitude: float, schedule: TrainSchedule, rng: np.random.Generator,
              aug_rng: np.random.Generator | None = None,
              on_step: Callable[[int, float, float], None] | None = None) -> DetectorModel:
    """Fine-tune a copy of ``model`` on the ROIs of the ``support`` images.

    Each iteration draws ``batch_images`` support images, applies the
    photometric augmentation to them when ``magnitude > 0``, and takes one
    gradient step at clock ``t = iteration / total``.  ``aug_rng`` defaults
    to a child of ``rng`` so that mini-batch selection is unaffected by
    whether augmentation is on.
    """
    magnitude = check_magnitude(magnitude)
    model = model.copy()
    total = schedule.total_iterations
    if total == 0 or schedule.learning_rate == 0:
        return model
    data = SupportData.build(benchmark, support, model)
    if aug_rng is None:
        aug_rng = np.random.Generator(np.random.PCG64(rng.integers(0, 2**63 - 1)))
    featurizer = None
    if magnitude > 0.0:
        featurizer = AugmentedFeaturizer([benchmark.crops(i) for i in data.image_ids])
    for it in range(1, total + 1):
        t = it / total
        chosen = _pick_images(len(data.image_ids), schedule.batch_images, rng)
        idx = np.concatenate([data.rows[k] for k in chosen])
        if featurizer is not None:
            strengths = [draw_strengths(magnitude, aug_rng) for _ in chosen]
            feats = featurizer.features(chosen, strengths)
        else:
            feats = data.features[idx]
        loss = gradient_step(model, feats, data.columns[idx], loss_params, t, schedule.learning_rate)
        if on_step is not None:
            on_step(it, t, loss)
    if not (np.isfinite(model.weights).all() and np.isfinite(model.bias).all()):
        raise TrainingDiverged("non-finite parameters after fine-tuning")
    return model


def pretrain(benchmark, image_ids: Sequence[int], classes: Sequence[int],
             novel_classes: Iterable[int], schedule: TrainSchedule,
             rng: np.random.Generator, return_history: bool = False):
    """Train the head on the base classes with the plain cross-entropy.

    Novel columns stay exactly zero: they are left out of the softmax while
    pretraining and re-attached afterwards.
    """
    novel_classes = tuple(novel_classes)
    model = DetectorModel.zeros(classes, novel_classes, class_names=[
        benchmark.spec.class_name(c) for c in classes])
    active = [c for c in model.classes if c not in set(novel_classes)]
    sub = DetectorModel.zeros(active)
    for i in image_ids:
        if not benchmark.classes_in(i).issubset(active):
            raise ValueError(f"pretrain image {i} holds a class outside the base set")
    history: list[float] = []
    sub = fine_tune(sub, benchmark, image_ids, LossParams(), 0.0, schedule, rng,
                    on_step=lambda it, t, loss: history.append(loss))
    keep = [0] + [model.classes.index(c) + 1 for c in active]
    model.weights[:, keep] = sub.weights
    model.bias[keep] = sub.bias
    return (model, history) if return_history else model


def predict_rois(model: DetectorModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted benchmark class (-1 for background) and softmax confidence."""
    s = model.scores(features)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    col = p.argmax(axis=1)
    lut = np.array((-1,) + model.classes)
    return lut[col], p[np.arange(len(col)), col]


def predict(model: DetectorModel, image: np.ndarray, proposals) -> list[tuple[tuple, int, float]]:
    """Detections (box, class_id, score) for the proposals of one image.

    Ties in the softmax go to the lowest column; background-argmax
    proposals yield no detection.
    """
    proposals = np.asarray(proposals, dtype=np.int64).reshape(-1, 4)
    if len(proposals) == 0:
        return []
    feats = crop_features(gather_crops([np.asarray(image, dtype=float)], [proposals]))
    cls, score = predict_rois(model, feats)
    return [(tuple(int(v) for v in box), int(c), float(s))
            for box, c, s in zip(proposals, cls, score) if c >= 0]
