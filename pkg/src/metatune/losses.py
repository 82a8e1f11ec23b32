"""Temperature-parameterized classification losses for detector fine-tuning.

Four variants share one code path.  For ROI ``i`` with raw class scores
``f[i, y]`` the scaled logits are ``z[i, y] = alpha[y] * f[i, y] / tau`` and the
loss is the mean negative log-softmax of the ground-truth entry:

* ``Baseline``       tau = 1, alpha = 1
* ``Static``         tau = rho_tau
* ``Dynamic``        tau = exp(rho_a t^2 + rho_b t + rho_c), t in [0, 1]
* ``ScaledDynamic``  as Dynamic, with alpha = rho_alpha on novel classes

Background is a base class, so its score is never scaled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class Variant(str, Enum):
    BASELINE = "Baseline"
    STATIC = "Static"
    DYNAMIC = "Dynamic"
    SCALED_DYNAMIC = "ScaledDynamic"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).lower():
                return v
        raise ValueError(f"unknown loss variant {value!r}")


class EmptyBatchError(ValueError):
    """Raised when a loss is requested for a batch with no ROIs."""


@dataclass(frozen=True)
class LossParams:
    variant: Variant = Variant.BASELINE
    rho_tau: float = 1.0
    rho_a: float = 0.0
    rho_b: float = 0.0
    rho_c: float = 0.0
    rho_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.variant is Variant.STATIC and not self.rho_tau > 0:
            raise ValueError(f"rho_tau must be positive, got {self.rho_tau}")
        if self.variant in (Variant.DYNAMIC, Variant.SCALED_DYNAMIC):
            for name in ("rho_a", "rho_b", "rho_c"):
                if not math.isfinite(getattr(self, name)):
                    raise ValueError(f"{name} must be finite")
        if self.variant is Variant.SCALED_DYNAMIC and not self.rho_alpha > 0:
            raise ValueError(f"rho_alpha must be positive, got {self.rho_alpha}")

    @property
    def is_dynamic(self) -> bool:
        return self.variant in (Variant.DYNAMIC, Variant.SCALED_DYNAMIC)

    def as_dict(self) -> dict[str, float]:
        """The parameters that the variant actually uses."""
        if self.variant is Variant.STATIC:
            return {"rho_tau": self.rho_tau}
        if self.variant is Variant.DYNAMIC:
            return {"rho_a": self.rho_a, "rho_b": self.rho_b, "rho_c": self.rho_c}
        if self.variant is Variant.SCALED_DYNAMIC:
            return {"rho_a": self.rho_a, "rho_b": self.rho_b, "rho_c": self.rho_c,
                    "rho_alpha": self.rho_alpha}
        return {}


@dataclass(frozen=True)
class RoiBatch:
    """Raw scores ``logits`` (N x C), labels (N,) and a per-class novel flag (C,)."""

    logits: np.ndarray
    labels: np.ndarray
    novel: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        novel = np.asarray(self.novel, dtype=bool)
        if logits.ndim != 2:
            raise ValueError("logits must be a 2-d array")
        if labels.shape != (logits.shape[0],):
            raise ValueError("need exactly one label per logit row")
        if novel.shape != (logits.shape[1],):
            raise ValueError("need exactly one class kind per logit column")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValueError("label out of range")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "novel", novel)

    @property
    def n_roi(self) -> int:
        return self.logits.shape[0]


def _check_clock(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"training clock must lie in [0, 1], got {t}")
    return t


def dynamic_temperature(params: LossParams, t: float) -> float:
    """exp(rho_a t^2 + rho_b t + rho_c) for the dynamic variants."""
    if not params.is_dynamic:
        raise ValueError(f"{params.variant.value} has no dynamic temperature")
    t = _check_clock(t)
    tau = math.exp(params.rho_a * t * t + params.rho_b * t + params.rho_c)
    assert tau > 0.0
    return tau


def temperature(params: LossParams, t: float) -> float:
    if params.variant is Variant.STATIC:
        return params.rho_tau
    if params.is_dynamic:
        return dynamic_temperature(params, t)
    return 1.0


def class_scale(params: LossParams, novel: np.ndarray) -> np.ndarray:
    """Per-class multiplier alpha(y)."""
    alpha = np.ones(len(novel))
    if params.variant is Variant.SCALED_DYNAMIC:
        alpha[np.asarray(novel, dtype=bool)] = params.rho_alpha
    return alpha


def _scaled_log_softmax(batch: RoiBatch, params: LossParams, t: float):
    if batch.n_roi == 0:
        raise EmptyBatchError("classification loss of an empty ROI batch")
    t = _check_clock(t)
    coef = class_scale(params, batch.novel) / temperature(params, t)
    z = batch.logits * coef
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return logp, coef


def classification_loss(batch: RoiBatch, params: LossParams, t: float = 0.0) -> float:
    logp, _ = _scaled_log_softmax(batch, params, t)
    return float(-logp[np.arange(batch.n_roi), batch.labels].mean())


def loss_and_grad(batch: RoiBatch, params: LossParams, t: float = 0.0):
    """Loss and its gradient with respect to the raw logits, in one pass."""
    logp, coef = _scaled_log_softmax(batch, params, t)
    rows = np.arange(batch.n_roi)
    loss = float(-logp[rows, batch.labels].mean())
    grad = np.exp(logp)
    grad[rows, batch.labels] -= 1.0
    grad *= coef / batch.n_roi
    return loss, grad


def classification_loss_grad(batch: RoiBatch, params: LossParams, t: float = 0.0) -> np.ndarray:
    return loss_and_grad(batch, params, t)[1]
