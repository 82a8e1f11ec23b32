import csv

import pytest

from metatune.cli import main
from metatune.config import ConfigError, RunConfig, load_config, parse_config_text
from metatune.evaluation import read_detections
from metatune.losses import LossParams, Variant
from metatune.pipeline import read_learned_params, write_learned_params
from metatune.policy import read_trajectory

QUICK = ["--episodes", "2", "--n-trials", "2", "--inner-iterations", "5", "--pretrain-iterations", "200"]


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(["gen", "--out", str(out), "--n-images", "600", "--seed", "5"]) == 0
    return out


# ------------------------------------------------------------------ config

def test_defaults_follow_the_search_settings():
    cfg = RunConfig()
    assert (cfg.episodes, cfg.eta, cfg.sigma0, cfg.sigma_min, cfg.n_trials) == (200, 0.0005, 0.1, 0.01, 8)
    assert cfg.reinit_model and cfg.normalize_rewards and cfg.proxy_imitation
    assert cfg.stage_list == ("loss", "aug") and cfg.workers == 1


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig(seed=3, variant="ScaledDynamic", eta=1e-3 / 3, normalize_rewards=False, out="x y")
    cfg.write(tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_file_then_flags(tmp_path):
    (tmp_path / "c.txt").write_text("# comment\nseed = 4\ninner_lr = 2.5  # trailing\n\nreinit_model = off\n")
    cfg = load_config(tmp_path / "c.txt", {"seed": 9, "k_shot": None})
    assert (cfg.seed, cfg.inner_lr, cfg.reinit_model, cfg.k_shot) == (9, 2.5, False, 5)


@pytest.mark.parametrize("text", ["seed 4", "nope = 1", "seed = x", "reinit_model = maybe",
                                  "episodes = 0", "variant = Cubic", "stages = aug,loss",
                                  "sigma_min = 0.5", "aug_init = 1.0", "reward = best"])
def test_bad_config_is_rejected(tmp_path, text):
    (tmp_path / "c.txt").write_text(text + "\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.txt")


def test_parse_config_text():
    assert parse_config_text("episodes = 7\nvariant=Dynamic") == {"episodes": 7, "variant": "Dynamic"}


def test_learned_params_file(tmp_path):
    loss = LossParams(Variant.SCALED_DYNAMIC, rho_a=0.1 + 0.2, rho_b=-1 / 3, rho_c=2.0, rho_alpha=1.25)
    write_learned_params(tmp_path / "p.txt", loss, 0.3)
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert lines[0] == "variant=ScaledDynamic" and "rho_b=-0.33333333333333331" in lines
    assert read_learned_params(tmp_path / "p.txt") == (loss, 0.3)


# --------------------------------------------------------------------- CLI

def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    assert main(["fly"]) == 1
    assert main(["gen", "--seed", "abc"]) == 1
    assert main(["gen", "--episodes", "0"]) == 1
    assert main(["pretrain", "--benchmark", str(tmp_path / "missing")]) == 1
    assert main(["eval", "--benchmark", str(tmp_path / "missing")]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_failure_exits_2(tmp_path, capsys):
    tiny = tmp_path / "tiny"
    assert main(["gen", "--out", str(tiny), "--n-images", "30"]) == 0
    code = main(["metatune", "--benchmark", str(tiny), "--out", str(tmp_path / "run")] + QUICK)
    assert code == 2
    assert "metatune failed" in capsys.readouterr().err


def test_gen_writes_benchmark_and_config(bench_dir):
    for name in ("annotations.csv", "classes.csv", "splits.csv", "config.txt", "images/0599.ppm"):
        assert (bench_dir / name).exists()
    cfg = load_config(bench_dir / "config.txt")
    assert cfg.n_images == 600 and cfg.seed == 5


def test_curves_for_zero_dynamic_params(tmp_path):
    params = tmp_path / "p.txt"
    params.write_text("variant=Dynamic\nrho_a=0\nrho_b=0\nrho_c=0\n")
    assert main(["curves", "--params", str(params), "--out", str(tmp_path / "c")]) == 0
    rows = list(csv.reader((tmp_path / "c" / "curves.csv").open()))
    assert rows[0] == ["t", "temperature"] and len(rows) == 102
    assert [r[0] for r in rows[1:4]] == ["0.00", "0.01", "0.02"] and rows[-1][0] == "1.00"
    assert all(float(r[1]) == 1.0 for r in rows[1:])


def test_curves_scaled_dynamic_header(tmp_path):
    params = tmp_path / "p.txt"
    write_learned_params(params, LossParams(Variant.SCALED_DYNAMIC, rho_a=1.0, rho_alpha=1.5), 0.0)
    assert main(["curves", "--params", str(params), "--out", str(tmp_path / "c")]) == 0
    lines = (tmp_path / "c" / "curves.csv").read_text().splitlines()
    assert lines[0] == "alpha=1.5" and lines[1] == "t,temperature"
    assert float(lines[-1].split(",")[1]) == pytest.approx(2.718281828459045)


def test_eval_of_empty_detections(bench_dir, tmp_path, capsys):
    for content in ("", "image_id,x,y,w,h,class_id,score\n"):
        dets = tmp_path / "d.csv"
        dets.write_text(content)
        out = tmp_path / "e"
        assert main(["eval", "--benchmark", str(bench_dir), "--detections", str(dets), "--out", str(out)]) == 0
        metrics = dict(csv.reader((out / "metrics.csv").open()))
        assert float(metrics["map_novel"]) == 0.0 and float(metrics["hm"]) == 0.0
    assert "HM" in capsys.readouterr().out


def test_pretrain_finetune_eval_chain(bench_dir, tmp_path):
    common = ["--benchmark", str(bench_dir), "--pretrain-iterations", "300"]
    assert main(["pretrain", "--out", str(tmp_path / "p")] + common) == 0
    model = tmp_path / "p" / "base_model.txt"
    assert model.read_text().startswith("# metatune detector checkpoint")
    params = tmp_path / "lp.txt"
    write_learned_params(params, LossParams(Variant.STATIC, rho_tau=0.8), 0.2)
    args = ["finetune", "--model", str(model), "--params", str(params)] + common
    assert main(args + ["--out", str(tmp_path / "f1")]) == 0
    assert main(args + ["--out", str(tmp_path / "f2")]) == 0
    dets = tmp_path / "f1" / "detections.csv"
    assert dets.read_bytes() == (tmp_path / "f2" / "detections.csv").read_bytes()
    assert len(read_detections(dets)) > 0
    assert main(["eval", "--detections", str(dets), "--out", str(tmp_path / "e")] + common) == 0
    metrics = dict(csv.reader((tmp_path / "e" / "metrics.csv").open()))
    assert 0 < float(metrics["map_base"]) <= 1
    assert main(["finetune", "--model", str(tmp_path / "nope.txt")] + common) == 1


def test_metatune_outputs_and_determinism(bench_dir, tmp_path):
    args = ["metatune", "--benchmark", str(bench_dir), "--variant", "ScaledDynamic", "--seed", "3"] + QUICK
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    traj = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert traj == (tmp_path / "b" / "trajectory.csv").read_bytes()
    rows = read_trajectory(tmp_path / "a" / "trajectory.csv")
    assert len(rows) == 2 * 4 + 2 * 1
    loss, aug = read_learned_params(tmp_path / "a" / "learned_params.txt")
    assert loss.variant is Variant.SCALED_DYNAMIC and 0 < aug < 1
    cfg = load_config(tmp_path / "a" / "config.txt")
    assert cfg.variant == "ScaledDynamic" and cfg.episodes == 2


def test_ablate_grid(bench_dir, tmp_path, capsys):
    args = ["ablate", "--benchmark", str(bench_dir), "--out", str(tmp_path / "ab"), "--ablate-seeds", "2",
            "--stages", "loss", "--final-repeats", "1"] + QUICK
    assert main(args) == 0
    summary = list(csv.DictReader((tmp_path / "ab" / "ablation.csv").open()))
    assert len(summary) == 8 and all(r["n"] == "2" for r in summary)
    runs = list(csv.DictReader((tmp_path / "ab" / "ablation_runs.csv").open()))
    assert len(runs) == 16 and all(r["status"] == "ok" for r in runs)
    assert len(capsys.readouterr().out.splitlines()) == 8
