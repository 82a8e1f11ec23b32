"""Episodic meta-tuning over proxy few-shot tasks built from base classes.

A proxy task relabels some base classes as "proxy-novel", pretrains a head
on images free of them, and then repeatedly fine-tunes that head on small
support sets drawn from the rest.  Each episode evaluates ``n_trials``
sampled parameter vectors, whitens the query mAPs, and moves the policy
mean toward the best trial with one REINFORCE step.
"""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .evaluation import RoiEvaluator, harmonic_mean, mean_ap
from .losses import LossParams, Variant
from .policy import (AUG_PARAM_NAMES, LOSS_PARAM_NAMES, EpisodeResult, PolicyState,
                     decode_rho, encode_loss, logit, normalize_rewards, reinforce_update,
                     sample_rho, sigma_schedule, trajectory_rows)
from .streams import stream
from .trainer import DetectorModel, TrainingDiverged, TrainSchedule, fine_tune, predict_rois, pretrain

log = logging.getLogger(__name__)

STAGES = ("loss", "aug")


class InfeasibleSplit(ValueError):
    """The benchmark cannot supply the requested proxy splits."""


class InsufficientPool(ValueError):
    """A support pool holds too few instances of some class."""


class EpisodeFailed(RuntimeError):
    """Every trial of an episode failed."""


@dataclass(frozen=True)
class ClassSplit:
    proxy_base: tuple[int, ...]
    proxy_novel: tuple[int, ...]

    def __post_init__(self):
        if not self.proxy_base or not self.proxy_novel:
            raise ValueError("both class subsets must be non-empty")
        if set(self.proxy_base) & set(self.proxy_novel):
            raise ValueError("proxy-base and proxy-novel classes overlap")

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.proxy_base + self.proxy_novel))


@dataclass(frozen=True)
class DataSplits:
    pretrain: tuple[int, ...]
    support_pool: tuple[int, ...]
    query: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.pretrain), set(self.support_pool), set(self.query)
        if a & b or a & c or b & c:
            raise ValueError("data splits overlap")


@dataclass(frozen=True)
class EpisodeConfig:
    """Per-episode settings.

    Raw rewards are mAP times ``reward_scale``, i.e. percentage points by
    default.  Whitening makes the scale irrelevant; without it the scale sets
    the step size of the policy update.
    """

    n_trials: int = 8
    k_shot: int = 5
    inner_iterations: int = 100
    inner_lr: float = 24.0
    batch_images: int = 8
    reinit_model: bool = True
    normalize_rewards: bool = True
    proxy_imitation: bool = True
    reward: str = "novel"
    reward_scale: float = 100.0
    count_by: str = "instances"

    def __post_init__(self):
        for name in ("n_trials", "k_shot", "inner_iterations", "batch_images"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.inner_lr > 0 or not self.reward_scale > 0:
            raise ValueError("inner_lr and reward_scale must be positive")
        if self.reward not in ("novel", "all", "hm"):
            raise ValueError(f"unknown reward {self.reward!r}")
        if self.count_by not in ("instances", "images"):
            raise ValueError(f"unknown shot counting {self.count_by!r}")

    @property
    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.inner_iterations, self.inner_lr, self.batch_images)


def make_proxy_splits(benchmark, n_proxy_novel: int, rng: np.random.Generator,
                      pretrain_fraction: float = 0.6,
                      min_instances: int = 10) -> tuple[ClassSplit, DataSplits]:
    """Pick proxy-novel classes and cut the base-class images three ways.

    Only images of the benchmark's pretrain pool are used.  Images without
    proxy-novel objects are eligible for the proxy pretrain split; the rest
    of the images are divided evenly between support and query.
    """
    base = list(benchmark.spec.base_classes)
    if not 1 <= n_proxy_novel < len(base):
        raise InfeasibleSplit(f"n_proxy_novel must lie in [1, {len(base) - 1}]")
    novel = tuple(sorted(int(c) for c in rng.choice(base, size=n_proxy_novel, replace=False)))
    pbase = tuple(c for c in base if c not in novel)
    images = benchmark.pool("pretrain")
    clean = [i for i in images if benchmark.classes_in(i).isdisjoint(novel)]
    dirty = [i for i in images if not benchmark.classes_in(i).isdisjoint(novel)]
    clean = list(rng.permutation(clean)) if clean else []
    n_pre = int(round(pretrain_fraction * len(clean)))
    pre = sorted(int(i) for i in clean[:n_pre])
    rest = [int(i) for i in rng.permutation(clean[n_pre:] + dirty)]
    half = len(rest) // 2
    support, query = sorted(rest[:half]), sorted(rest[half:])
    counts = benchmark.instance_counts(pre)
    if any(counts[c] < min_instances for c in pbase):
        raise InfeasibleSplit(f"proxy pretrain split has too few instances: {counts[list(pbase)]}")
    for name, ids in (("support", support), ("query", query)):
        counts = benchmark.instance_counts(ids)
        if any(counts[c] == 0 for c in pbase + novel):
            raise InfeasibleSplit(f"proxy {name} split misses a class")
    return ClassSplit(pbase, novel), DataSplits(tuple(pre), tuple(support), tuple(query))


def sample_support(benchmark, pool: Sequence[int], classes: Sequence[int], k: int,
                   rng: np.random.Generator, count_by: str = "instances") -> list[int]:
    """Greedy k-shot draw: add random images of each class until it has k shots.

    With ``count_by="instances"`` a class is satisfied by k annotated
    instances among the chosen images; with ``"images"`` by k chosen images
    that contain it.  Instances brought in for one class count for all.
    """
    pool = list(pool)
    chosen: list[int] = []
    taken: set[int] = set()
    have: Counter = Counter()
    for c in rng.permutation(list(classes)):
        c = int(c)
        if have[c] >= k:
            continue
        candidates = [i for i in pool if i not in taken and c in benchmark.classes_in(i)]
        for i in rng.permutation(candidates) if candidates else []:
            i = int(i)
            chosen.append(i)
            taken.add(i)
            anns = benchmark.annotations[i]
            if count_by == "instances":
                have.update(a.class_id for a in anns)
            else:
                have.update({a.class_id for a in anns})
            if have[c] >= k:
                break
        if have[c] < k:
            raise InsufficientPool(f"class {c} has fewer than {k} shots in the pool")
    return chosen


@dataclass
class ProxyTask:
    """Everything an episode needs that stays fixed across episodes."""

    benchmark: object
    class_split: ClassSplit
    splits: DataSplits
    base_model: DetectorModel
    query: RoiEvaluator
    holdout: RoiEvaluator

    @classmethod
    def build(cls, benchmark, n_proxy_novel: int = 4, seed: int = 0,
              pretrain_schedule: TrainSchedule | None = None) -> "ProxyTask":
        schedule = pretrain_schedule or default_pretrain_schedule()
        class_split, splits = make_proxy_splits(benchmark, n_proxy_novel, stream(seed, "proxy-split"))
        model = pretrain(benchmark, splits.pretrain, class_split.classes, class_split.proxy_novel,
                         schedule, stream(seed, "proxy-pretrain"))
        novel = set(class_split.proxy_novel)
        clean_query = [i for i in splits.query if benchmark.classes_in(i).isdisjoint(novel)]
        return cls(benchmark, class_split, splits, model, RoiEvaluator(benchmark, splits.query),
                   RoiEvaluator(benchmark, clean_query))

    def reward(self, model: DetectorModel, cfg: EpisodeConfig) -> float:
        if not cfg.proxy_imitation:
            cls, score = predict_rois(model, self.holdout.features)
            aps, empty = self.holdout.per_class_ap(cls, score, self.class_split.proxy_base)
            return mean_ap(aps, self.class_split.proxy_base, empty)
        return query_reward(model, self.query, self.class_split.proxy_base,
                            self.class_split.proxy_novel, cfg.reward)


def query_reward(model: DetectorModel, evaluator: RoiEvaluator, base: Sequence[int],
                 novel: Sequence[int], kind: str = "novel") -> float:
    cls, score = predict_rois(model, evaluator.features)
    classes = list(novel) if kind == "novel" else list(base) + list(novel)
    aps, empty = evaluator.per_class_ap(cls, score, classes)
    if kind == "novel":
        return mean_ap(aps, novel, empty)
    if kind == "all":
        return mean_ap(aps, classes, empty)
    return harmonic_mean(mean_ap(aps, base, empty), mean_ap(aps, novel, empty))


def default_pretrain_schedule() -> TrainSchedule:
    return TrainSchedule(total_iterations=10000, learning_rate=4.0, batch_images=16)


@dataclass(frozen=True)
class SearchSpace:
    """What one stage searches, and the values it holds frozen."""

    variant: Variant
    param_names: tuple[str, ...]
    frozen_loss: LossParams
    frozen_aug: float = 0.0

    def decode(self, sample) -> tuple[LossParams, float]:
        return decode_rho(sample, self.param_names, self.variant, self.frozen_loss, self.frozen_aug)


@dataclass
class TrialOutcome:
    sample: np.ndarray
    reward: float | None
    model: DetectorModel | None
    error: str = ""


def run_trial(task: ProxyTask, policy: PolicyState, space: SearchSpace, cfg: EpisodeConfig,
              start_model: DetectorModel, seed: int, key: tuple) -> TrialOutcome:
    sample = sample_rho(policy, stream(seed, *key, "rho"))
    loss_params, magnitude = space.decode(sample)
    support = sample_support(task.benchmark, task.splits.support_pool, task.class_split.classes,
                             cfg.k_shot, stream(seed, *key, "support"), cfg.count_by)
    try:
        model = fine_tune(start_model, task.benchmark, support, loss_params, magnitude,
                          cfg.schedule, stream(seed, *key, "finetune"),
                          aug_rng=stream(seed, *key, "augment"))
    except TrainingDiverged as exc:
        return TrialOutcome(sample, None, None, str(exc))
    return TrialOutcome(sample, cfg.reward_scale * task.reward(model, cfg), model)


def _run_trial_star(args):
    return run_trial(*args)


def run_episode(policy: PolicyState, task: ProxyTask, cfg: EpisodeConfig, space: SearchSpace,
                eta: float, seed: int, key: tuple = (), carry: DetectorModel | None = None,
                executor: ProcessPoolExecutor | None = None):
    """One episode: N trials, reward whitening, one REINFORCE step.

    Returns ``(policy, result, carry)``; ``carry`` is the last fine-tuned
    model, which seeds the next trial when ``cfg.reinit_model`` is off.
    """
    if carry is None:
        carry = task.base_model
    outcomes: list[TrialOutcome] = []
    if cfg.reinit_model and executor is not None:
        jobs = [(task, policy, space, cfg, task.base_model, seed, key + ("trial", j))
                for j in range(cfg.n_trials)]
        outcomes = list(executor.map(_run_trial_star, jobs))
    else:
        for j in range(cfg.n_trials):
            start = task.base_model if cfg.reinit_model else carry
            out = run_trial(task, policy, space, cfg, start, seed, key + ("trial", j))
            if out.model is not None:
                carry = out.model
            outcomes.append(out)
    good = [o for o in outcomes if o.reward is not None]
    for o in outcomes:
        if o.reward is None:
            log.warning("trial failed: %s", o.error)
    if not good:
        raise EpisodeFailed("all trials failed: " + "; ".join(o.error for o in outcomes))
    raw = [o.reward for o in good]
    norm = normalize_rewards(raw) if cfg.normalize_rewards else list(raw)
    best = int(np.argmax(norm))
    result = EpisodeResult([o.sample for o in good], raw, norm, best)
    policy = reinforce_update(policy, good[best].sample, norm[best], eta)
    policy = replace(policy, episode=policy.episode + 1)
    return policy, result, carry


@dataclass
class MetaTuneResult:
    loss_params: LossParams
    aug: float
    trajectory: list[tuple] = field(default_factory=list)
    policies: dict[str, PolicyState] = field(default_factory=dict)
    rewards: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def learned(self) -> dict[str, float]:
        out = {"variant": self.loss_params.variant.value}
        out.update(self.loss_params.as_dict())
        out["rho_aug"] = self.aug
        return out


def meta_tune(task: ProxyTask, variant=Variant.STATIC, stages: Sequence[str] = ("loss", "aug"),
              total_episodes: int = 200, eta: float = 0.0005, seed: int = 0,
              cfg: EpisodeConfig = EpisodeConfig(), sigma0: float = 0.1,
              sigma_min: float = 0.01, aug_init: float = 0.5,
              frozen_loss: LossParams | None = None, workers: int = 1,
              progress: Callable[[str, int, PolicyState, EpisodeResult], None] | None = None
              ) -> MetaTuneResult:
    """Run the loss stage, freeze its result, then run the augmentation stage."""
    variant = Variant.parse(variant)
    stages = tuple(stages)
    if not stages or any(s not in STAGES for s in stages) or list(stages) != sorted(
            stages, key=STAGES.index) or len(set(stages)) != len(stages):
        raise ValueError(f"stages must be an ordered subset of {STAGES}, got {stages}")
    loss_params = frozen_loss if frozen_loss is not None else LossParams(variant)
    aug = 0.0
    result = MetaTuneResult(loss_params, aug)
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    carry = None
    episode_no = 0
    try:
        for stage in stages:
            if stage == "loss":
                names = LOSS_PARAM_NAMES[variant]
                space = SearchSpace(variant, names, loss_params, 0.0)
                mu0 = encode_loss(loss_params, names)
            else:
                names = AUG_PARAM_NAMES
                space = SearchSpace(variant, names, loss_params, 0.0)
                mu0 = np.array([logit(aug_init)])
            if not names:
                continue
            policy = PolicyState.initial(names, sigma0, mu0)
            history = []
            for e in range(total_episodes):
                sigma = sigma_schedule(e, total_episodes, sigma0, sigma_min)
                policy = replace(policy, sigma=sigma)
                policy, ep, carry = run_episode(policy, task, cfg, space, eta, seed,
                                                (stage, "episode", e), carry, executor)
                k = ep.best_index
                history.append((ep.raw_rewards[k], ep.norm_rewards[k]))
                result.trajectory += trajectory_rows(episode_no, policy, sigma,
                                                     ep.raw_rewards[k], ep.norm_rewards[k])
                episode_no += 1
                if progress is not None:
                    progress(stage, e, policy, ep)
            result.policies[stage] = policy
            result.rewards[stage] = history
            learned_loss, learned_aug = space.decode(policy.mu)
            if stage == "loss":
                loss_params = learned_loss
            else:
                aug = learned_aug
    finally:
        if executor is not None:
            executor.shutdown()
    result.loss_params = loss_params
    result.aug = aug
    return result
