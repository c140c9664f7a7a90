import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasfanc.adaptive import AncPlant, ControlFilter, FilteredXState, fxlms_step
from metasfanc.dsp import FirPath, Signal
from metasfanc.errors import ConfigError, InsufficientDataError, InvalidArgumentError
from metasfanc.meta import (
    AncTask,
    DatabaseEntry,
    FilterDatabase,
    MetaConfig,
    TaskDistribution,
    _Mats,
    _draw_batches,
    build_database,
    covariance_sum,
    filtered_windows,
    inner_update,
    make_tasks,
    meta_loss,
    outer_update,
    pair_errors,
    pretrain,
    query_loss,
    summarize_history,
)

from oracles import adapt, central_gradient, filtered_ref, pair_error, random_instance, summed_query_loss

SHORT = AncPlant(FirPath([1.5, 1.3, -0.6, -1.2, -1.3, 1.2]), FirPath([1, 1, 1, 0.5]))


def small_dist(seed=0, L=6, n_sub=3, seconds=0.2):
    rng = np.random.default_rng(seed)
    recs = [[Signal(0.1 * rng.standard_normal(int(16000 * seconds)), 16000)] for _ in range(n_sub)]
    return make_tasks(recs, SHORT, L, 4, 4, seed, category_id="c")


class TestWindows:
    def test_filtered_windows_match_convolution(self):
        rng = np.random.default_rng(0)
        segs = rng.standard_normal((5, 12))
        h = FirPath(rng.standard_normal(4))
        got = filtered_windows(segs, 9, h)
        for j in range(5):
            np.testing.assert_allclose(got[j], filtered_ref(segs[j], 9, h.coefficients), atol=1e-12)

    def test_pair_errors_match_oracle(self):
        rng = np.random.default_rng(1)
        plant, tasks = random_instance(rng)
        w = rng.standard_normal(8)
        t = tasks[0]
        got = pair_errors(ControlFilter(w), t.query_x, t.query_d, plant)
        ref = [pair_error(w, seg, d, plant.secondary.coefficients) for seg, d in zip(t.query_x, t.query_d)]
        np.testing.assert_allclose(got, ref, atol=1e-12)

    def test_short_segment_rejected(self):
        with pytest.raises(InvalidArgumentError):
            filtered_windows(np.zeros((1, 5)), 4, FirPath([1, 1, 1]))


class TestInnerOuter:
    @pytest.mark.parametrize("seed", range(5))
    def test_inner_update_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        plant, tasks = random_instance(rng)
        w = rng.standard_normal(8)
        got = inner_update(ControlFilter(w), tasks[0], 0.05, plant).weights
        np.testing.assert_allclose(got, adapt(w, tasks[0], 0.05, plant), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_outer_step_is_negative_gradient(self, seed):
        rng = np.random.default_rng(100 + seed)
        plant, tasks = random_instance(rng)
        dist = TaskDistribution(tasks, "c", plant, 8)
        cfg = MetaConfig(alpha=0.05, beta=0.01, K=3, J=3)
        w = rng.standard_normal(8)
        step = (outer_update(ControlFilter(w), dist, cfg).weights - w) / cfg.beta
        grad = central_gradient(lambda v: summed_query_loss(v, tasks, cfg.alpha, plant), w)
        assert np.linalg.norm(step + grad) / np.linalg.norm(grad) < 1e-5

    def test_meta_loss_matches_oracle(self):
        rng = np.random.default_rng(7)
        plant, tasks = random_instance(rng)
        dist = TaskDistribution(tasks, "c", plant, 8)
        w = rng.standard_normal(8)
        got = meta_loss(ControlFilter(w), dist, MetaConfig(0.05, 0.01, 3, 3))
        assert got == pytest.approx(summed_query_loss(w, tasks, 0.05, plant), rel=1e-12)

    def test_query_loss_is_half_squared_error(self):
        rng = np.random.default_rng(8)
        plant, tasks = random_instance(rng)
        w = rng.standard_normal(8)
        t = tasks[1]
        e = pair_errors(ControlFilter(w), t.query_x, t.query_d, plant)
        assert query_loss(ControlFilter(w), t, plant) == pytest.approx(0.5 * e @ e)

    @pytest.mark.parametrize("seed", range(10))
    def test_single_pair_inner_update_is_fxlms_step(self, seed):
        rng = np.random.default_rng(seed)
        plant = AncPlant(FirPath(rng.standard_normal(5)), FirPath(rng.standard_normal(3)),
                         FirPath(rng.standard_normal(4)))
        L = 6
        seg = rng.standard_normal(L + plant.history)
        d = rng.standard_normal()
        task = AncTask(seg[None], [d], seg[None], [d], L)
        w = ControlFilter(rng.standard_normal(L))
        aux = FilteredXState(plant, L)
        for x in seg[:-1]:
            fxlms_step(w, x, 0.0, 0.0, aux)
        _, stepped = fxlms_step(w, seg[-1], d, 0.03, aux)
        np.testing.assert_allclose(inner_update(w, task, 0.03, plant).weights, stepped.weights,
                                   rtol=0, atol=1e-12)

    def test_zero_alpha_outer_is_query_fxlms_batch(self):
        rng = np.random.default_rng(9)
        plant, tasks = random_instance(rng)
        dist = TaskDistribution(tasks, "c", plant, 8)
        w = rng.standard_normal(8)
        got = outer_update(ControlFilter(w), dist, MetaConfig(0.0, 0.02, 3, 3)).weights
        s = plant.secondary.coefficients
        acc = np.zeros(8)
        for t in tasks:
            for seg, d in zip(t.query_x, t.query_d):
                acc += pair_error(w, seg, d, s) * filtered_ref(seg, 8, plant.secondary_estimate.coefficients)
        np.testing.assert_allclose(got, w + 0.02 * acc, rtol=0, atol=1e-12)

    def test_query_error_on_support_flag(self):
        rng = np.random.default_rng(10)
        plant, tasks = random_instance(rng)
        dist = TaskDistribution(tasks, "c", plant, 8)
        w = ControlFilter(rng.standard_normal(8))
        a = outer_update(w, dist, MetaConfig(0.05, 0.01, 3, 3))
        b = outer_update(w, dist, MetaConfig(0.05, 0.01, 3, 3, query_error_on_support=True))
        assert not np.allclose(a.weights, b.weights)
        with pytest.raises(ConfigError):
            MetaConfig(0.05, 0.01, 3, 4, query_error_on_support=True)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_covariance_sum_symmetric_psd(seed, L):
    rng = np.random.default_rng(seed)
    xf = rng.standard_normal((int(rng.integers(1, 15)), L))
    R = covariance_sum(xf)
    np.testing.assert_allclose(R, R.T, rtol=0, atol=1e-12)
    assert np.linalg.eigvalsh(R).min() >= -1e-12


class TestMakeTasks:
    def test_pools_and_targets(self):
        dist = small_dist()
        assert len(dist) == 3 and dist.length == 6
        t = dist.tasks[0]
        assert t.support_x.shape[1] == 6 + SHORT.history
        assert abs(t.n_support - t.n_query) <= 1

    def test_targets_are_primary_path_output(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(400)
        dist = make_tasks([[Signal(x, 16000)]], SHORT, 4, 2, 2, 0)
        d_full = np.convolve(x, SHORT.primary.coefficients)
        t = dist.tasks[0]
        for seg, d in zip(t.support_x, t.support_d):
            end = next(i for i in range(seg.size - 1, x.size) if np.array_equal(x[i - seg.size + 1: i + 1], seg))
            assert d == pytest.approx(d_full[end])

    def test_too_little_data(self):
        with pytest.raises(InsufficientDataError):
            make_tasks([[Signal(np.ones(30), 16000)]], SHORT, 6, 10, 10, 0)

    def test_sample_without_replacement(self):
        t = small_dist().tasks[0]
        b = t.sample(np.random.default_rng(0), 4, 4)
        assert b.n_support == 4 and len({row.tobytes() for row in b.support_x}) == 4


class TestPretrain:
    def test_deterministic(self):
        dist = small_dist()
        cfg = MetaConfig(0.01, 0.01, 4, 4, iterations=200, seed=3)
        w1, h1 = pretrain(dist, cfg)
        w2, h2 = pretrain(dist, cfg)
        assert w1 == w2 and h1 == h2

    def test_replays_outer_updates(self):
        dist = small_dist()
        cfg = MetaConfig(0.02, 0.02, 4, 4, iterations=50, seed=5)
        w_fast, hist = pretrain(dist, cfg)
        rng = np.random.default_rng(cfg.seed)
        n_sup = np.array([t.n_support for t in dist.tasks])
        n_que = np.array([t.n_query for t in dist.tasks])
        tasks, si, qi = _draw_batches(rng, cfg.iterations, len(dist), None, n_sup, n_que, 4, 4)
        w = ControlFilter.zeros(dist.length)
        for it in range(cfg.iterations):
            batch = []
            for slot, ti in enumerate(tasks[it]):
                t = dist.tasks[ti]
                batch.append(AncTask(t.support_x[si[it, slot]], t.support_d[si[it, slot]],
                                     t.query_x[qi[it, slot]], t.query_d[qi[it, slot]], t.length))
            w = outer_update(w, TaskDistribution(batch, "c", dist.plant, dist.length), cfg)
        np.testing.assert_allclose(w_fast.weights, w.weights, atol=1e-12)

    def test_loss_decreases(self):
        dist = small_dist(seconds=0.5)
        _, hist = pretrain(dist, MetaConfig(0.02, 0.02, 4, 4, iterations=3000, seed=0))
        assert np.mean(hist[-300:]) < 0.5 * np.mean(hist[:300])

    def test_insufficient_pool(self):
        with pytest.raises(InsufficientDataError):
            pretrain(small_dist(), MetaConfig(0.01, 0.01, 500, 4, iterations=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MetaConfig(0.01, 0.0)
        with pytest.raises(ConfigError):
            MetaConfig(-0.1, 0.01)


class TestDatabase:
    def test_round_trip(self, tmp_path):
        db = build_database({"a": small_dist(0), "b": small_dist(1)},
                            MetaConfig(0.01, 0.01, 4, 4, iterations=20, seed=1))
        db.save(tmp_path / "db.json")
        back = FilterDatabase.load(tmp_path / "db.json")
        assert back.labels() == ["a", "b"]
        assert back.filter("a") == db.filter("a")
        assert back.to_json() == db.to_json()

    def test_rejects_mixed_lengths(self):
        db = FilterDatabase()
        db.add("a", DatabaseEntry(ControlFilter.zeros(4), "x"))
        with pytest.raises(InvalidArgumentError):
            db.add("b", DatabaseEntry(ControlFilter.zeros(5), "x"))
        with pytest.raises(InvalidArgumentError):
            db.add("a", DatabaseEntry(ControlFilter.zeros(4), "x"))

    def test_bad_schema(self):
        with pytest.raises(ConfigError):
            FilterDatabase.from_json('{"schema": 99, "entries": []}')

    def test_history_summary(self):
        assert summarize_history([1.0, 2.0]) == [1.0, 2.0]
        s = summarize_history(np.arange(10.0), max_points=5)
        assert s == [0.5, 2.5, 4.5, 6.5, 8.5]
