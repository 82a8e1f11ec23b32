from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metatune import proxytask
from metatune.config import RunConfig
from metatune.losses import LossParams, Variant
from metatune.pipeline import build_proxy_task
from metatune.policy import PolicyState
from metatune.proxytask import (ClassSplit, DataSplits, EpisodeConfig, EpisodeFailed, InfeasibleSplit,
                                InsufficientPool, SearchSpace, make_proxy_splits, meta_tune,
                                run_episode, run_trial, sample_support)
from metatune.synthbench import SceneSpec, generate
from metatune.trainer import TrainingDiverged

FAST = EpisodeConfig(n_trials=3, inner_iterations=10)


@pytest.fixture(scope="module")
def task(bench):
    return build_proxy_task(bench, RunConfig())


# ----------------------------------------------------------------- splits

def check_splits(bench, cs, ds):
    base = set(bench.spec.base_classes)
    assert set(cs.proxy_base) | set(cs.proxy_novel) <= base
    assert not set(cs.proxy_base) & set(cs.proxy_novel)
    a, b, c = map(set, (ds.pretrain, ds.support_pool, ds.query))
    assert not (a & b or a & c or b & c)
    assert (a | b | c) <= set(bench.pool("pretrain"))
    assert all(bench.classes_in(i).isdisjoint(cs.proxy_novel) for i in a)
    for ids in (ds.support_pool, ds.query):
        counts = bench.instance_counts(ids)
        assert all(counts[k] > 0 for k in cs.classes)


def test_split_cardinality_with_ten_base_classes():
    bench = generate(SceneSpec(n_classes=13, n_novel=3, n_images=1200), seed=1)
    cs, ds = make_proxy_splits(bench, 3, np.random.default_rng(0))
    assert len(cs.proxy_base) == 7 and len(cs.proxy_novel) == 3
    check_splits(bench, cs, ds)


def test_split_with_fifteen_base_and_five_proxy_novel():
    spec = SceneSpec(n_classes=20, n_novel=5, n_images=2000, band_spacing=90.0)
    bench = generate(spec, seed=1)
    cs, ds = make_proxy_splits(bench, 5, np.random.default_rng(0))
    assert len(cs.proxy_base) == 10 and len(cs.proxy_novel) == 5
    check_splits(bench, cs, ds)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_splits_are_disjoint_and_pure(bench, seed, n_novel):
    cs, ds = make_proxy_splits(bench, n_novel, np.random.default_rng(seed))
    assert len(cs.proxy_novel) == n_novel
    check_splits(bench, cs, ds)


def test_splits_are_deterministic(bench):
    a = make_proxy_splits(bench, 4, np.random.default_rng(3))
    b = make_proxy_splits(bench, 4, np.random.default_rng(3))
    assert a == b


def test_proxy_novel_classes_are_drawn_uniformly(bench):
    rng = np.random.default_rng(0)
    hits = Counter()
    for _ in range(700):
        cs, _ = make_proxy_splits(bench, 2, rng)
        hits.update(cs.proxy_novel)
    # each of 7 classes is picked with probability 2/7: 200 expected, sd 12
    assert all(abs(hits[c] - 200) < 60 for c in bench.spec.base_classes)


def test_infeasible_splits_are_reported(bench, small_bench):
    with pytest.raises(InfeasibleSplit):
        make_proxy_splits(bench, 7, np.random.default_rng(0))
    with pytest.raises(InfeasibleSplit):
        make_proxy_splits(bench, 0, np.random.default_rng(0))
    tiny = generate(SceneSpec(n_images=40), seed=0)
    with pytest.raises(InfeasibleSplit):
        make_proxy_splits(tiny, 3, np.random.default_rng(0))


def test_split_types_validate():
    with pytest.raises(ValueError):
        ClassSplit((1, 2), (2, 3))
    with pytest.raises(ValueError):
        ClassSplit((), (2,))
    with pytest.raises(ValueError):
        DataSplits((1, 2), (3,), (2,))


# ---------------------------------------------------------------- support

def shots(bench, ids, classes, count_by="instances"):
    have = Counter()
    for i in ids:
        labels = [a.class_id for a in bench.annotations[i]]
        have.update(labels if count_by == "instances" else set(labels))
    return have


@pytest.mark.parametrize("count_by", ["instances", "images"])
@pytest.mark.parametrize("k", [1, 5])
def test_support_reaches_k_and_every_image_was_needed(task, count_by, k):
    bench, pool, classes = task.benchmark, task.splits.support_pool, task.class_split.classes
    for seed in range(20):
        ids = sample_support(bench, pool, classes, k, np.random.default_rng(seed), count_by)
        assert len(set(ids)) == len(ids) and set(ids) <= set(pool)
        have = shots(bench, ids, classes, count_by)
        assert all(have[c] >= k for c in classes)
        # greedy minimality: when an image was added, one of its classes was still short
        for n, i in enumerate(ids):
            before = shots(bench, ids[:n], classes, count_by)
            assert any(before[c] < k for c in bench.classes_in(i) if c in classes)


def test_k1_support_is_small(task):
    bench, pool, classes = task.benchmark, task.splits.support_pool, task.class_split.classes
    for seed in range(20):
        ids = sample_support(bench, pool, classes, 1, np.random.default_rng(seed))
        assert len(ids) <= len(classes)


def test_support_is_deterministic(task):
    args = (task.benchmark, task.splits.support_pool, task.class_split.classes, 5)
    assert sample_support(*args, np.random.default_rng(1)) == sample_support(*args, np.random.default_rng(1))
    assert sample_support(*args, np.random.default_rng(1)) != sample_support(*args, np.random.default_rng(2))


def test_support_draws_cover_the_pool(task):
    pool = task.splits.support_pool
    seen = set()
    for seed in range(100):
        seen.update(sample_support(task.benchmark, pool, task.class_split.classes, 5,
                                   np.random.default_rng(seed)))
    assert len(seen) / len(pool) > 0.9


def test_insufficient_pool(task):
    bench = task.benchmark
    pool = task.splits.support_pool[:10]
    with pytest.raises(InsufficientPool):
        sample_support(bench, pool, task.class_split.classes, 50, np.random.default_rng(0))


# ---------------------------------------------------------------- episodes

def static_space(tau=1.0):
    return SearchSpace(Variant.STATIC, ("rho_tau",), LossParams(Variant.STATIC, rho_tau=tau))


def test_single_trial_episode_leaves_the_mean_unchanged(task):
    policy = PolicyState(np.array([0.3]), 0.1, ("rho_tau",))
    cfg = replace(FAST, n_trials=1)
    new, result, _ = run_episode(policy, task, cfg, static_space(), 0.0005, seed=0)
    assert result.norm_rewards == [0.0]
    np.testing.assert_array_equal(new.mu, policy.mu)
    assert new.episode == 1


def test_episode_update_follows_the_best_trial(task):
    policy = PolicyState(np.array([0.0]), 0.1, ("rho_tau",))
    new, result, _ = run_episode(policy, task, FAST, static_space(), 0.0005, seed=4)
    k = result.best_index
    want = 0.0005 * result.norm_rewards[k] * (result.samples[k] - policy.mu) / 0.01
    np.testing.assert_allclose(new.mu - policy.mu, want, rtol=1e-12)
    assert len(result.samples) == FAST.n_trials
    assert abs(np.mean(result.norm_rewards)) < 1e-9


def test_unnormalized_rewards_are_used_raw(task):
    policy = PolicyState(np.array([0.0]), 0.1, ("rho_tau",))
    cfg = replace(FAST, normalize_rewards=False)
    _, result, _ = run_episode(policy, task, cfg, static_space(), 0.0005, seed=4)
    assert result.norm_rewards == result.raw_rewards
    assert all(0 <= r <= 100 for r in result.raw_rewards)


def test_reinit_off_chains_trials(task):
    policy = PolicyState(np.array([0.0]), 0.1, ("rho_tau",))
    space = static_space()
    chained = replace(FAST, n_trials=2, reinit_model=False)
    _, _, carry = run_episode(policy, task, chained, space, 0.0005, seed=2, key=("k",))
    first = run_trial(task, policy, space, chained, task.base_model, 2, ("k", "trial", 0)).model
    second = run_trial(task, policy, space, chained, first, 2, ("k", "trial", 1)).model
    np.testing.assert_array_equal(carry.weights, second.weights)
    fresh = run_trial(task, policy, space, chained, task.base_model, 2, ("k", "trial", 1)).model
    assert not np.array_equal(fresh.weights, second.weights)


def test_reinit_on_starts_every_trial_from_the_base_model(task):
    policy = PolicyState(np.array([0.0]), 0.1, ("rho_tau",))
    space = static_space()
    a = run_trial(task, policy, space, FAST, task.base_model, 5, ("x", "trial", 1))
    _, result, _ = run_episode(policy, task, FAST, space, 0.0005, seed=5, key=("x",))
    assert result.raw_rewards[1] == a.reward


def test_holdout_reward_ignores_proxy_novel_classes(task):
    assert all(task.benchmark.classes_in(i).isdisjoint(task.class_split.proxy_novel)
               for i in task.holdout.image_ids)
    cfg = replace(FAST, proxy_imitation=False)
    r = task.reward(task.base_model, cfg)
    assert 0 < r <= 1
    # the base model has never seen the proxy-novel classes
    assert task.reward(task.base_model, FAST) == 0.0


def test_failed_trials_are_skipped_and_all_failed_aborts(task, monkeypatch):
    policy = PolicyState(np.array([0.0]), 0.1, ("rho_tau",))
    real = proxytask.fine_tune
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) % 2:
            raise TrainingDiverged("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(proxytask, "fine_tune", flaky)
    _, result, _ = run_episode(policy, task, replace(FAST, n_trials=4), static_space(), 0.0005, 0)
    assert len(result.samples) == 2

    def broken(*args, **kwargs):
        raise TrainingDiverged("boom")

    monkeypatch.setattr(proxytask, "fine_tune", broken)
    with pytest.raises(EpisodeFailed, match="boom"):
        run_episode(policy, task, FAST, static_space(), 0.0005, 0)


# ---------------------------------------------------------------- meta_tune

def test_stage_order_is_checked(task):
    for stages in (("aug", "loss"), ("loss", "loss"), ("warp",), ()):
        with pytest.raises(ValueError):
            meta_tune(task, Variant.STATIC, stages, total_episodes=1, cfg=FAST)


def test_static_loss_stage_learns_one_scalar(task):
    r = meta_tune(task, Variant.STATIC, ("loss",), total_episodes=3, cfg=FAST)
    assert r.policies["loss"].param_names == ("rho_tau",)
    assert r.loss_params.variant is Variant.STATIC and r.loss_params.rho_tau > 0
    assert r.aug == 0.0 and len(r.trajectory) == 3


def test_two_stages_freeze_the_loss(task):
    r = meta_tune(task, Variant.SCALED_DYNAMIC, ("loss", "aug"), total_episodes=2, cfg=FAST)
    names = [row[1] for row in r.trajectory]
    assert names == ["rho_a", "rho_b", "rho_c", "rho_alpha"] * 2 + ["rho_aug"] * 2
    assert [row[0] for row in r.trajectory] == [0] * 4 + [1] * 4 + [2, 3]
    mu = r.policies["loss"].mu
    assert (r.loss_params.rho_a, r.loss_params.rho_b, r.loss_params.rho_c) == tuple(mu[:3])
    assert r.loss_params.rho_alpha == pytest.approx(np.exp(mu[3]))
    assert 0 < r.aug < 1 and r.loss_params.rho_alpha > 0


def test_meta_tune_is_bit_deterministic_and_worker_independent(task):
    kwargs = dict(variant=Variant.STATIC, stages=("loss", "aug"), total_episodes=3, seed=11, cfg=FAST)
    a = meta_tune(task, **kwargs)
    b = meta_tune(task, **kwargs)
    c = meta_tune(task, workers=2, **kwargs)
    assert a.trajectory == b.trajectory == c.trajectory
    assert meta_tune(task, **dict(kwargs, seed=12)).trajectory != a.trajectory


def test_full_static_run_writes_two_hundred_rows_per_parameter(task):
    cfg = EpisodeConfig()
    r = meta_tune(task, Variant.STATIC, ("loss",), total_episodes=200, cfg=cfg)
    assert len(r.trajectory) == 200
    assert [row[0] for row in r.trajectory] == list(range(200))
    assert r.trajectory[0][3] == 0.1 and r.trajectory[-1][3] == pytest.approx(0.01 + 0.09 / 200)
