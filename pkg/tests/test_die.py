import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eedlab.die import (DieConfig, confidence, die_evaluate, die_from_predictions, die_predict,
                        online_stop, optimal_stop, running_mean_prediction, save_traces,
                        stop_likelihoods, stop_probability, uncertainty)
from eedlab.netcore import build_model, forward, init_model, mlp_arch

probs = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8)


def brute_force_stop(q):
    z = [q[t] * math.prod(1 - v for v in q[:t]) for t in range(len(q))]
    return int(np.argmax(z)) + 1  # argmax returns the first maximum


def constant_model(p):
    """A model that ignores its input and emits probabilities ``p``."""
    p = np.asarray(p, float)
    m = build_model({"input_shape": [2], "num_classes": len(p),
                     "layers": [{"kind": "dense", "out": len(p)}]})
    m.layers[0].params["weight"][:] = 0
    m.layers[0].params["bias"] = np.log(p)
    return m


class TestRunningMean:
    def test_first_step_unchanged(self):
        np.testing.assert_array_equal(running_mean_prediction([[0.3, 0.7]])[0], [0.3, 0.7])

    def test_constant_predictions(self):
        means = running_mean_prediction([[0.2, 0.8]] * 5)
        for m in means:
            np.testing.assert_allclose(m, [0.2, 0.8], atol=1e-15)

    def test_two_term_mean(self):
        np.testing.assert_array_equal(running_mean_prediction([[1, 0], [0, 1]])[1], [0.5, 0.5])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_incremental_equals_batch_mean(self, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(4), size=7)
        for t, m in enumerate(running_mean_prediction(p), start=1):
            np.testing.assert_allclose(m, p[:t].mean(axis=0), atol=1e-12)


class TestScores:
    def test_kl_identical(self):
        assert uncertainty([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_kl_closed_form(self):
        assert uncertainty([0.5, 0.5], [1.0, 0.0]) == pytest.approx(math.log(2), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kl_non_negative(self, seed):
        a, b = np.random.default_rng(seed).dirichlet(np.ones(3), size=2)
        assert uncertainty(a, b) >= 0

    def test_kl_shape_mismatch(self):
        with pytest.raises(ValueError):
            uncertainty([0.5, 0.5], [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("p, expect", [([0.25] * 4, 0.0625), ([0, 1, 0], 1.0),
                                           ([0.6, 0.4], 0.36)])
    def test_confidence(self, p, expect):
        assert confidence(p) == pytest.approx(expect, abs=1e-15)

    def test_stop_probability_examples(self):
        assert stop_probability(0.3, 0.9, DieConfig(0.0, 0.0)) == 0.5
        assert stop_probability(100.0, 0.0, DieConfig(5.0, -1.0)) == pytest.approx(1.0)
        assert stop_probability(0.2, 0.5, DieConfig(5.0, -1.0)) == pytest.approx(
            1 / (1 + math.exp(-0.5)), abs=1e-15)
        assert stop_probability(0.2, 0.5, DieConfig()) == pytest.approx(0.6225, abs=1e-4)


class TestOptimalStop:
    def test_certain_first_stop(self):
        assert optimal_stop([1.0, 0.3, 0.9]) == 1

    def test_hand_enumeration(self):
        assert stop_likelihoods([0.1, 0.5, 0.9]) == pytest.approx([0.1, 0.45, 0.405])
        assert optimal_stop([0.1, 0.5, 0.9]) == 2
        assert stop_likelihoods([0.5, 0.5]) == pytest.approx([0.5, 0.25])
        assert optimal_stop([0.5, 0.5]) == 1

    def test_ties_take_smallest(self):
        assert optimal_stop([0.5, 1.0]) == 1  # z = [0.5, 0.5]

    def test_random_sequences_match_brute_force(self):
        r = np.random.default_rng(0)
        for _ in range(1000):
            q = r.uniform(0, 1, int(r.integers(1, 9))).tolist()
            assert optimal_stop(q) == brute_force_stop(q)

    @settings(max_examples=100, deadline=None)
    @given(probs)
    def test_z_is_a_sub_distribution(self, q):
        z = stop_likelihoods(q)
        assert all(v >= 0 for v in z) and sum(z) <= 1 + 1e-12

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            optimal_stop([])
        with pytest.raises(ValueError):
            optimal_stop([1.2])

    def test_mean_stop_is_one_when_q_is_identically_one(self):
        stops = [optimal_stop([1.0] * n) for n in range(1, 9)]
        assert np.mean(stops) == 1.0


class TestOnlineRule:
    def test_agrees_when_z_is_unimodal(self):
        r = np.random.default_rng(1)
        checked = 0
        for _ in range(2000):
            q = r.uniform(0, 1, int(r.integers(1, 7))).tolist()
            z = stop_likelihoods(q)
            peak = int(np.argmax(z))
            rising = all(z[t] < z[t + 1] for t in range(peak))
            falling = all(z[t] > z[t + 1] for t in range(peak, len(z) - 1))
            if rising and falling:
                checked += 1
                assert online_stop(z) == optimal_stop(q)
        assert checked > 500

    def test_lookahead_can_stop_before_the_argmax(self):
        q = [0.3, 0.1, 0.95]  # z = [0.3, 0.07, 0.5985]
        assert online_stop(stop_likelihoods(q)) == 1
        assert optimal_stop(q) == 3

    def test_non_decreasing_q_is_not_enough_for_agreement(self):
        q = [0.1, 0.1, 0.5]  # z = [0.1, 0.09, 0.405]
        assert online_stop(stop_likelihoods(q)) == 1
        assert optimal_stop(q) == 3


class TestDiePredict:
    def test_single_member(self):
        m = init_model(mlp_arch(2, [3], 2), 0)
        x = np.array([0.2, 0.9])
        pred, trace = die_predict([m], x, DieConfig())
        np.testing.assert_allclose(pred, forward(m, x[None])[0])
        assert trace.stop == 1

    def test_exhaustive_equals_running_mean_at_optimal_stop(self):
        team = [init_model(mlp_arch(2, [4], 3), s) for s in range(5)]
        x = np.array([0.4, 0.6])
        cfg = DieConfig(mode="exhaustive")
        pred, trace = die_predict(team, x, cfg)
        means = running_mean_prediction([forward(m, x[None])[0] for m in team])
        assert trace.stop == optimal_stop(trace.q)
        np.testing.assert_allclose(pred, means[trace.stop - 1], atol=1e-15)

    def test_identical_members_constant_q(self):
        p = [0.7, 0.2, 0.1]
        team = [constant_model(p) for _ in range(4)]
        cfg = DieConfig(mode="exhaustive")
        _, trace = die_predict(team, np.zeros(2), cfg)
        qc = 1 / (1 + math.exp(-cfg.b * 0.7 ** 2))  # U = 0 from step 2 onward
        assert trace.q[0] == 0.0
        assert trace.q[1:] == pytest.approx([qc] * 3, abs=1e-12)
        assert trace.z == pytest.approx([0.0, qc, qc * (1 - qc), qc * (1 - qc) ** 2], abs=1e-12)
        assert trace.stop == 2

    @pytest.mark.parametrize("mode", ["online", "exhaustive"])
    def test_lazy_and_vectorised_paths_agree(self, mode):
        team = [init_model(mlp_arch(2, [4], 3), s) for s in range(4)]
        x = np.random.default_rng(0).uniform(0, 1, (20, 2))
        cfg = DieConfig(mode=mode)
        res = die_evaluate(team, x, np.zeros(20, int), cfg)
        for xi, trace in zip(x, res["traces"]):
            pred, lazy = die_predict(team, xi, cfg)
            assert lazy.stop == trace.stop
            np.testing.assert_allclose(pred, trace.predictions[trace.stop - 1], atol=1e-12)

    def test_max_models_limit(self):
        team = [init_model(mlp_arch(2, [4], 3), s) for s in range(3)]
        with pytest.raises(ValueError):
            die_predict(team, np.zeros(2), DieConfig(max_models=4))
        trace = die_from_predictions([np.full(3, 1 / 3)] * 3, DieConfig(max_models=2))
        assert len(trace.q) == 2


class TestDieEvaluate:
    def test_speedup_accounting(self):
        team = [init_model(mlp_arch(2, [4], 2), s) for s in range(4)]
        x = np.random.default_rng(3).uniform(0, 1, (50, 2))
        res = die_evaluate(team, x, np.zeros(50, int), DieConfig())
        assert res["speedup"] == pytest.approx(4 / res["mean_stop"])
        assert 1 <= res["mean_stop"] <= 4

    def test_q_one_from_step_two_stops_at_two(self):
        # q_1 = 0 by construction, so a certain stop lands on the second member
        team = [constant_model([0.9, 0.1]), constant_model([0.1, 0.9]), constant_model([0.5, 0.5])]
        res = die_evaluate(team, np.zeros((5, 2)), np.zeros(5, int), DieConfig(a=1e6, b=0.0))
        assert res["mean_stop"] == 2.0

    def test_traces_json(self, tmp_path):
        team = [init_model(mlp_arch(2, [4], 2), s) for s in range(3)]
        x = np.random.default_rng(3).uniform(0, 1, (4, 2))
        labels = np.array([0, 1, 0, 1])
        res = die_evaluate(team, x, labels, DieConfig())
        recs = json.loads(save_traces(res["traces"], labels, tmp_path / "t.json").read_text())
        assert len(recs) == 4
        for rec, trace in zip(recs, res["traces"]):
            assert rec["stop"] == trace.stop and len(rec["q"]) == 3
            assert rec["z"] == pytest.approx(stop_likelihoods(rec["q"]))
        acc = np.mean([r["correct"] for r in recs])
        assert acc == pytest.approx(res["accuracy"])
