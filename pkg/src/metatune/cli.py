"""Batch command line: gen, pretrain, metatune, finetune, eval, ablate, curves.

Every command reads its settings from defaults, then ``--config``, then
per-key flags such as ``--inner-lr 2``, and writes its outputs and the
resolved configuration into ``--out``.  Exit status is 0 on success, 1 on
a usage or configuration error, 2 on a runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, parse_value
from .evaluation import evaluate_detections, read_detections, write_detections
from .policy import write_trajectory
from .synthbench import Benchmark, SceneSpec, generate

log = logging.getLogger("metatune")

COMMANDS = ("gen", "pretrain", "metatune", "finetune", "eval", "ablate", "curves")
GLOBAL_KEYS = ("seed", "workers", "out")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, keys) -> None:
    for f in fields(RunConfig):
        if f.name in keys:
            p.add_argument(_flag(f.name), dest=f.name, metavar=f.type.upper(),
                           default=argparse.SUPPRESS, help=f"override {f.name}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value file")
    _add_config_flags(common, [f.name for f in fields(RunConfig)])
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="metatune", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="render the synthetic benchmark")
    sub.add_parser("pretrain", parents=[common], help="pretrain the base head")
    sub.add_parser("metatune", parents=[common], help="two-stage REINFORCE search")
    p = sub.add_parser("finetune", parents=[common], help="k-shot fine-tune with learned params")
    p.add_argument("--model", help="base checkpoint (pretrained on the fly if omitted)")
    p.add_argument("--params", help="learned_params file (Baseline loss if omitted)")
    p = sub.add_parser("eval", parents=[common], help="score a detections CSV on the query pool")
    p.add_argument("--detections", required=True)
    sub.add_parser("ablate", parents=[common], help="2^3 toggle grid over several seeds")
    p = sub.add_parser("curves", parents=[common], help="temperature curve of learned params")
    p.add_argument("--params", required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        if hasattr(args, f.name):
            overrides[f.name] = parse_value(f.name, str(getattr(args, f.name)))
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    return out


def _load_benchmark(cfg: RunConfig) -> Benchmark:
    path = Path(cfg.benchmark)
    if not (path / "benchmark.txt").exists():
        raise ConfigError(f"no benchmark at {path} (run 'gen' first)")
    return Benchmark.load(path)


def _progress(stage, episode, policy, result):
    if (episode + 1) % 20 == 0:
        mu = " ".join(f"{n}={m:+.4f}" for n, m in zip(policy.param_names, policy.mu))
        log.info("%s episode %d: %s best=%.3f", stage, episode + 1, mu,
                 result.raw_rewards[result.best_index])


def cmd_gen(cfg: RunConfig, args) -> int:
    spec = SceneSpec(image_size=cfg.image_size, n_images=cfg.n_images)
    out = _out_dir(cfg)
    bench = generate(spec, cfg.seed)
    bench.save(out)
    counts = bench.instance_counts()
    log.info("wrote %d images to %s (instances per class %d..%d)", len(bench), out,
             counts.min(), counts.max())
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    from .pipeline import pretrain_base
    bench = _load_benchmark(cfg)
    out = _out_dir(cfg)
    model = pretrain_base(bench, cfg)
    model.save(out / "base_model.txt")
    log.info("saved base head to %s", out / "base_model.txt")
    return 0


def cmd_metatune(cfg: RunConfig, args) -> int:
    from .pipeline import build_proxy_task, run_meta_tune, write_learned_params
    bench = _load_benchmark(cfg)
    out = _out_dir(cfg)
    t0 = time.time()
    task = build_proxy_task(bench, cfg)
    log.info("proxy task: base %s novel %s", task.class_split.proxy_base, task.class_split.proxy_novel)
    result = run_meta_tune(task, cfg, progress=_progress)
    write_trajectory(out / "trajectory.csv", result.trajectory)
    write_learned_params(out / "learned_params.txt", result.loss_params, result.aug)
    log.info("learned %s in %.0f s", result.learned(), time.time() - t0)
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    from .losses import LossParams
    from .pipeline import (detections_for, final_fine_tune, pretrain_base,
                           read_learned_params, roi_report)
    from .evaluation import RoiEvaluator
    from .trainer import DetectorModel
    bench = _load_benchmark(cfg)
    for p in (args.model, args.params):
        if p and not Path(p).exists():
            raise ConfigError(f"no such file: {p}")
    base = DetectorModel.load(args.model) if args.model else pretrain_base(bench, cfg)
    loss, aug = read_learned_params(args.params) if args.params else (LossParams(), 0.0)
    out = _out_dir(cfg)
    model = final_fine_tune(bench, base, loss, aug, cfg, cfg.seed)
    model.save(out / "model.txt")
    query = bench.pool("query")
    write_detections(out / "detections.csv", detections_for(model, bench, query))
    report = roi_report(model, RoiEvaluator(bench, query), bench)
    log.info("query mAP novel %.4f base %.4f HM %.4f", report.map_novel, report.map_base, report.hm)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    bench = _load_benchmark(cfg)
    path = Path(args.detections)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    dets = read_detections(path) if path.stat().st_size else []
    spec = bench.spec
    report = evaluate_detections(dets, bench.annotations, bench.pool("query"), spec.base_classes,
                                 spec.novel_classes,
                                 class_names={c: spec.class_name(c) for c in range(spec.n_classes)})
    out = _out_dir(cfg)
    text = report.to_text()
    (out / "report.txt").write_text(text)
    report.write_csv(out / "metrics.csv")
    sys.stdout.write(text)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .pipeline import ABLATION_TOGGLES, run_ablation, summarize_ablation
    bench = _load_benchmark(cfg)
    out = _out_dir(cfg)
    rows = run_ablation(bench, cfg, log=log.info)
    keys = list(ABLATION_TOGGLES) + ["seed", "hm", "map_base", "map_novel", "status"]
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    summary = summarize_ablation(rows)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, list(ABLATION_TOGGLES) + ["n", "mean_hm", "ci"], lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    for s in summary:
        flags = " ".join(f"{k}={'on' if s[k] else 'off'}" for k in ABLATION_TOGGLES)
        sys.stdout.write(f"{flags}  HM {100 * s['mean_hm']:.2f} +/- {100 * s['ci']:.2f}\n")
    return 0


def cmd_curves(cfg: RunConfig, args) -> int:
    from .pipeline import read_learned_params, write_curve
    if not Path(args.params).exists():
        raise ConfigError(f"no such file: {args.params}")
    loss, _ = read_learned_params(args.params)
    out = _out_dir(cfg)
    write_curve(out / "curves.csv", loss)
    return 0


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "metatune": cmd_metatune,
            "finetune": cmd_finetune, "eval": cmd_eval, "ablate": cmd_ablate, "curves": cmd_curves}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"metatune: error: {exc}\n")
        return 1
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        sys.stderr.write(f"metatune: error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"metatune: {args.command} failed: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
