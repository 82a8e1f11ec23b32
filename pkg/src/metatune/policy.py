"""Gaussian search policy over loss/augmentation parameters, REINFORCE-updated.

Each searched parameter lives in an unconstrained space and is decoded to
its constrained value only when it is used: temperatures and the novel
score scale through ``exp``, the augmentation magnitude through the
logistic function, polynomial coefficients as they are.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .losses import LossParams, Variant

LOSS_PARAM_NAMES = {
    Variant.BASELINE: (),
    Variant.STATIC: ("rho_tau",),
    Variant.DYNAMIC: ("rho_a", "rho_b", "rho_c"),
    Variant.SCALED_DYNAMIC: ("rho_a", "rho_b", "rho_c", "rho_alpha"),
}
AUG_PARAM_NAMES = ("rho_aug",)
TRAJECTORY_HEADER = ("episode", "param_name", "mu", "sigma", "best_reward_raw", "best_reward_norm")


@dataclass(frozen=True)
class PolicyState:
    mu: np.ndarray
    sigma: float
    param_names: tuple[str, ...]
    episode: int = 0

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "param_names", tuple(self.param_names))
        if len(mu) != len(self.param_names):
            raise ValueError("mu and param_names differ in length")
        if not np.isfinite(mu).all():
            raise ValueError("mu must be finite")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def initial(cls, param_names: Sequence[str], sigma: float = 0.1, mu=None) -> "PolicyState":
        mu = np.zeros(len(param_names)) if mu is None else mu
        return cls(np.asarray(mu, dtype=float), sigma, tuple(param_names))


@dataclass(frozen=True)
class EpisodeResult:
    samples: list[np.ndarray]
    raw_rewards: list[float]
    norm_rewards: list[float]
    best_index: int

    def __post_init__(self):
        n = len(self.samples)
        if n == 0 or len(self.raw_rewards) != n or len(self.norm_rewards) != n:
            raise ValueError("episode lists must be non-empty and of equal length")
        if self.best_index != int(np.argmax(self.norm_rewards)):
            raise ValueError("best_index does not maximize the normalized reward")


def sample_rho(policy: PolicyState, rng: np.random.Generator) -> np.ndarray:
    """Draw every component independently from N(mu_j, sigma^2)."""
    return policy.mu + policy.sigma * rng.standard_normal(len(policy.mu))


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def decode_rho(sample: Sequence[float], param_names: Sequence[str], variant,
               frozen_loss: LossParams | None = None,
               frozen_aug: float = 0.0) -> tuple[LossParams, float]:
    """Map an unconstrained sample onto ``(LossParams, augmentation magnitude)``.

    Only the parameters named in ``param_names`` come from the sample; every
    other value keeps its frozen setting, which is how the loss stage holds
    the magnitude fixed and the augmentation stage holds the loss fixed.
    """
    variant = Variant.parse(variant)
    sample = np.asarray(sample, dtype=float).reshape(-1)
    if len(sample) != len(param_names):
        raise ValueError(f"sample has {len(sample)} values for {len(param_names)} parameters")
    allowed = set(LOSS_PARAM_NAMES[variant]) | set(AUG_PARAM_NAMES)
    unknown = set(param_names) - allowed
    if unknown:
        raise ValueError(f"parameters {sorted(unknown)} are not searched by {variant.value}")
    base = frozen_loss if frozen_loss is not None else LossParams(variant)
    values = {k: getattr(base, k) for k in ("rho_tau", "rho_a", "rho_b", "rho_c", "rho_alpha")}
    aug = frozen_aug
    for name, v in zip(param_names, sample):
        if name in ("rho_tau", "rho_alpha"):
            values[name] = math.exp(v)
        elif name == "rho_aug":
            aug = logistic(v)
        else:
            values[name] = float(v)
    return LossParams(variant, **values), aug


def encode_loss(params: LossParams, param_names: Sequence[str]) -> np.ndarray:
    """Inverse of the loss part of :func:`decode_rho`."""
    out = []
    for name in param_names:
        v = getattr(params, name)
        out.append(math.log(v) if name in ("rho_tau", "rho_alpha") else float(v))
    return np.array(out)


def normalize_rewards(raw: Sequence[float]) -> list[float]:
    """Whiten with the population standard deviation; constant input -> zeros."""
    r = np.asarray(raw, dtype=float)
    if r.size == 0:
        raise ValueError("cannot normalize an empty reward list")
    std = r.std()
    if std < 1e-12:
        return [0.0] * r.size
    return list((r - r.mean()) / std)


def gaussian_score(mu: np.ndarray, sigma: float, rho: np.ndarray) -> np.ndarray:
    """Gradient of log N(rho; mu, sigma^2) with respect to mu."""
    return (np.asarray(rho, dtype=float) - np.asarray(mu, dtype=float)) / sigma**2


def reinforce_update(policy: PolicyState, sample: np.ndarray, reward: float,
                     eta: float) -> PolicyState:
    """mu' = mu + eta * R * (rho - mu) / sigma^2; sigma and episode are untouched."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    mu = policy.mu + eta * reward * gaussian_score(policy.mu, policy.sigma, sample)
    return replace(policy, mu=mu)


def sigma_schedule(episode: int, total_episodes: int, sigma0: float = 0.1,
                   sigma_min: float = 0.01) -> float:
    """Linear decay from ``sigma0`` at episode 0 to ``sigma_min`` at the end."""
    if not 0 <= episode <= total_episodes:
        raise ValueError("episode outside [0, total_episodes]")
    if not sigma0 >= sigma_min > 0:
        raise ValueError("need sigma0 >= sigma_min > 0")
    if total_episodes == 0:
        return sigma0
    if episode == total_episodes:
        return sigma_min
    # this form is monotone in floating point; the clamp guards the last ulp
    return max(sigma0 - (sigma0 - sigma_min) * (episode / total_episodes), sigma_min)


def select_best(result: EpisodeResult) -> tuple[np.ndarray, float]:
    k = int(np.argmax(result.norm_rewards))
    return result.samples[k], float(result.norm_rewards[k])


def trajectory_rows(episode: int, policy: PolicyState, sigma: float, best_raw: float,
                    best_norm: float) -> list[tuple]:
    return [(episode, name, float(m), float(sigma), float(best_raw), float(best_norm))
            for name, m in zip(policy.param_names, policy.mu)]


def write_trajectory(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for ep, name, mu, sigma, raw, norm in rows:
            w.writerow([ep, name, repr(mu), repr(sigma), repr(raw), repr(norm)])


def read_trajectory(path) -> list[tuple]:
    with open(path, newline="") as fh:
        return [(int(r["episode"]), r["param_name"], float(r["mu"]), float(r["sigma"]),
                 float(r["best_reward_raw"]), float(r["best_reward_norm"]))
                for r in csv.DictReader(fh)]
