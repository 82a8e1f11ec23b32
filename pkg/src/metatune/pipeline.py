"""End-to-end steps shared by the command line and the experiments.

The real few-shot task uses the benchmark's own pools: the head is
pretrained on the base-only ``pretrain`` pool, fine-tuned on a k-shot draw
from the ``support`` pool, and scored on the ``query`` pool.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .evaluation import (Detection, EvalReport, RoiEvaluator, confidence_interval,
                         harmonic_mean, mean_ap)
from .losses import LossParams, Variant, class_scale, temperature
from .proxytask import EpisodeConfig, MetaTuneResult, ProxyTask, meta_tune, sample_support
from .streams import stream
from .synthbench import Benchmark
from .trainer import DetectorModel, TrainSchedule, fine_tune, predict_rois, pretrain

PARAM_ORDER = ("rho_tau", "rho_a", "rho_b", "rho_c", "rho_alpha", "rho_aug")
ABLATION_TOGGLES = ("proxy_imitation", "reinit_model", "normalize_rewards")


def episode_config(cfg: RunConfig) -> EpisodeConfig:
    return EpisodeConfig(n_trials=cfg.n_trials, k_shot=cfg.k_shot,
                         inner_iterations=cfg.inner_iterations, inner_lr=cfg.inner_lr,
                         batch_images=cfg.batch_images, reinit_model=cfg.reinit_model,
                         normalize_rewards=cfg.normalize_rewards,
                         proxy_imitation=cfg.proxy_imitation, reward=cfg.reward,
                         reward_scale=cfg.reward_scale, count_by=cfg.count_by)


def pretrain_schedule(cfg: RunConfig) -> TrainSchedule:
    return TrainSchedule(cfg.pretrain_iterations, cfg.pretrain_lr, cfg.pretrain_batch)


def pretrain_base(benchmark: Benchmark, cfg: RunConfig) -> DetectorModel:
    """Head over every benchmark class, trained on the base-only pretrain pool."""
    spec = benchmark.spec
    return pretrain(benchmark, benchmark.pool("pretrain"), range(spec.n_classes),
                    spec.novel_classes, pretrain_schedule(cfg), stream(cfg.proxy_seed, "base-pretrain"))


def build_proxy_task(benchmark: Benchmark, cfg: RunConfig) -> ProxyTask:
    return ProxyTask.build(benchmark, cfg.n_proxy_novel, cfg.proxy_seed, pretrain_schedule(cfg))


def run_meta_tune(task: ProxyTask, cfg: RunConfig, stages: Sequence[str] | None = None,
                  frozen_loss: LossParams | None = None,
                  progress: Callable | None = None) -> MetaTuneResult:
    return meta_tune(task, cfg.variant, stages or cfg.stage_list, cfg.episodes, cfg.eta, cfg.seed,
                     episode_config(cfg), cfg.sigma0, cfg.sigma_min, cfg.aug_init,
                     frozen_loss=frozen_loss, workers=cfg.workers, progress=progress)


def final_fine_tune(benchmark: Benchmark, base_model: DetectorModel, loss: LossParams,
                    aug: float, cfg: RunConfig, seed: int, repeat: int = 0) -> DetectorModel:
    """Fine-tune the real base model on a k-shot draw of the support pool.

    The draw depends only on ``(seed, repeat)``, so different parameter
    settings compared at the same seed see the same support images.
    """
    classes = range(benchmark.spec.n_classes)
    support = sample_support(benchmark, benchmark.pool("support"), classes, cfg.k_shot,
                             stream(seed, "final", repeat, "support"), cfg.count_by)
    schedule = TrainSchedule(cfg.inner_iterations, cfg.inner_lr, cfg.batch_images)
    return fine_tune(base_model, benchmark, support, loss, aug, schedule,
                     stream(seed, "final", repeat, "finetune"),
                     aug_rng=stream(seed, "final", repeat, "augment"))


def roi_report(model: DetectorModel, evaluator: RoiEvaluator, benchmark: Benchmark) -> EvalReport:
    """Evaluation report of ``model`` on the cached proposals of ``evaluator``."""
    spec = benchmark.spec
    base, novel = list(spec.base_classes), list(spec.novel_classes)
    cls, score = predict_rois(model, evaluator.features)
    aps, empty = evaluator.per_class_ap(cls, score, base + novel)

    def safe(classes):
        try:
            return mean_ap(aps, classes, empty)
        except ValueError:
            return 0.0

    mb, mn = safe(base), safe(novel)
    return EvalReport(aps, mb, mn, safe(base + novel), harmonic_mean(mb, mn),
                      len(evaluator.image_ids), empty,
                      {c: spec.class_name(c) for c in base + novel})


@dataclass
class FinalScore:
    map_novel: float
    map_base: float
    hm: float


def final_score(benchmark: Benchmark, base_model: DetectorModel, loss: LossParams, aug: float,
                cfg: RunConfig, seed: int, evaluator: RoiEvaluator) -> FinalScore:
    """Query metrics averaged over ``cfg.final_repeats`` k-shot draws."""
    reports = [roi_report(final_fine_tune(benchmark, base_model, loss, aug, cfg, seed, r),
                          evaluator, benchmark) for r in range(cfg.final_repeats)]
    return FinalScore(float(np.mean([r.map_novel for r in reports])),
                      float(np.mean([r.map_base for r in reports])),
                      float(np.mean([r.hm for r in reports])))


def detections_for(model: DetectorModel, benchmark: Benchmark,
                   image_ids: Sequence[int]) -> list[Detection]:
    out = []
    for i in image_ids:
        rois = benchmark.rois(i)
        cls, score = predict_rois(model, rois.features)
        for box, c, s in zip(rois.boxes, cls, score):
            if c >= 0:
                out.append(Detection(int(i), *(int(v) for v in box[:4]), int(c), float(s)))
    return out


# ------------------------------------------------------------ learned params

def write_learned_params(path, loss: LossParams, aug: float) -> None:
    values = dict(loss.as_dict(), rho_aug=aug)
    lines = [f"variant={loss.variant.value}"]
    lines += [f"{name}={values[name]:.17g}" for name in PARAM_ORDER if name in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_learned_params(path) -> tuple[LossParams, float]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected name=value")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v
    variant = Variant.parse(values.pop("variant", "baseline"))
    aug = float(values.pop("rho_aug", 0.0))
    unknown = set(values) - set(PARAM_ORDER)
    if unknown:
        raise ValueError(f"{path}: unknown parameters {sorted(unknown)}")
    return LossParams(variant, **{k: float(v) for k, v in values.items()}), aug


def temperature_curve(params: LossParams, n_points: int = 101) -> list[tuple[float, float]]:
    ts = [i / (n_points - 1) for i in range(n_points)]
    return [(t, temperature(params, t)) for t in ts]


def write_curve(path, params: LossParams, n_points: int = 101) -> None:
    lines = []
    if params.variant is Variant.SCALED_DYNAMIC:
        lines.append(f"alpha={params.rho_alpha:.17g}")
    lines.append("t,temperature")
    lines += [f"{t:.2f},{tau:.17g}" for t, tau in temperature_curve(params, n_points)]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ ablation

def ablation_arms() -> list[dict[str, bool]]:
    return [dict(zip(ABLATION_TOGGLES, bits)) for bits in itertools.product((True, False), repeat=3)]


def run_ablation(benchmark: Benchmark, cfg: RunConfig, arms: Sequence[dict] | None = None,
                 seeds: Sequence[int] | None = None, task: ProxyTask | None = None,
                 base_model: DetectorModel | None = None,
                 log: Callable[[str], None] | None = None) -> list[dict]:
    """Meta-tune and score every toggle arm at every seed; one row per run."""
    arms = ablation_arms() if arms is None else list(arms)
    seeds = list(range(cfg.seed, cfg.seed + cfg.ablate_seeds)) if seeds is None else list(seeds)
    task = task or build_proxy_task(benchmark, cfg)
    base_model = base_model or pretrain_base(benchmark, cfg)
    evaluator = RoiEvaluator(benchmark, benchmark.pool("query"))
    rows = []
    for arm in arms:
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed, **arm)
            status = "ok"
            try:
                result = run_meta_tune(task, run_cfg)
                score = final_score(benchmark, base_model, result.loss_params, result.aug,
                                    run_cfg, seed, evaluator)
            except Exception as exc:  # a failed run is reported, not fatal to the grid
                status = f"failed: {exc}"
                score = FinalScore(math.nan, math.nan, math.nan)
            row = dict(arm, seed=seed, hm=score.hm, map_base=score.map_base,
                       map_novel=score.map_novel, status=status)
            rows.append(row)
            if log is not None:
                log(" ".join(f"{k}={v}" for k, v in row.items()))
    return rows


def summarize_ablation(rows: Sequence[dict]) -> list[dict]:
    out = []
    for arm in ablation_arms():
        runs = [r for r in rows if all(r[k] == v for k, v in arm.items())]
        hms = [r["hm"] for r in runs if r["status"] == "ok"]
        if not runs:
            continue
        out.append(dict(arm, n=len(hms), mean_hm=float(np.mean(hms)) if hms else math.nan,
                        ci=confidence_interval(hms) if len(hms) >= 2 else math.nan))
    return out
