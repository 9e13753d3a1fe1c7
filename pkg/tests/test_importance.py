import json
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import randomize_bn
from eedlab.advtrain import TrainConfig, adversarial_train
from eedlab.attacks import AttackConfig
from eedlab.data import gen_synthetic, to_unit_box
from eedlab.importance import (ErmConfig, ase_from_hessian, compute_scores, nis_product,
                               nis_recursive, rank_correlation, save_report, score_ase,
                               score_bnsf, score_erm, score_nis, second_difference, top_set)
from eedlab.netcore import build_model, init_model, mlp_arch


def plain_mlp(sizes, seed=0):
    return init_model(mlp_arch(sizes[0], sizes[1:-1], sizes[-1], batchnorm=False), seed)


class TestNis:
    def test_one_step_hand_recursion(self):
        w1 = np.ones((2, 3))
        w2 = np.array([[1.0, -2.0]])
        scores = nis_recursive([w1, w2], [1.0])
        np.testing.assert_array_equal(scores[0], [1.0, 2.0])

    def test_model_neuron_scores_match_hand_recursion(self):
        m = plain_mlp([3, 2, 2])
        m.layers[2].params["weight"] = np.array([[1.0, -2.0], [0.0, 0.0]])
        s = score_nis(m, final_scores=[1.0, 0.0])
        np.testing.assert_array_equal(s.neurons[0], [1.0, 2.0])
        w1 = np.abs(m.layers[0].params["weight"])
        np.testing.assert_allclose(s.layers[0], w1 * np.array([1.0, 2.0])[:, None])

    def test_zero_downstream_annihilates(self):
        m = plain_mlp([3, 4, 4, 2])
        m.layers[4].params["weight"][:] = 0
        s = score_nis(m)
        assert np.all(s.layers[0] == 0) and np.all(s.layers[2] == 0)

    @pytest.mark.parametrize("depth", [3, 4])
    @pytest.mark.parametrize("seed", range(5))
    def test_recursion_equals_matrix_chain(self, depth, seed):
        r = np.random.default_rng(seed)
        sizes = r.integers(2, 7, depth + 1)
        weights = [r.normal(size=(sizes[i + 1], sizes[i])) for i in range(depth)]
        final = r.uniform(0, 1, sizes[-1])
        for a, b in zip(nis_recursive(weights, final), nis_product(weights, final)):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)

    def test_wrong_final_shape_rejected(self):
        with pytest.raises(ValueError):
            score_nis(plain_mlp([3, 4, 2]), final_scores=[1.0, 1.0, 1.0])

    def test_conv_scores_are_congruent(self):
        arch = {"input_shape": [1, 4, 4], "num_classes": 2, "layers": [
            {"kind": "conv2d", "out": 3, "kernel": 3}, {"kind": "relu"}, {"kind": "flatten"},
            {"kind": "dense", "out": 2}]}
        m = init_model(arch, 0)
        s = score_nis(m)
        for i in m.prunable_indices():
            assert s.layers[i].shape == m.layers[i].params["weight"].shape
        assert s.neurons[0].shape == (3,)


class TestErm:
    def test_normalization_arithmetic(self):
        m = plain_mlp([3, 1, 2])
        m.layers[0].params["weight"] = np.array([[0.5, -1.0, 0.25]])
        np.testing.assert_allclose(score_erm(m, ErmConfig(1.0)).layers[0], [[0.5, 1.0, 0.25]])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), eta=st.floats(0.1, 5.0), scale=st.floats(0.01, 100))
    def test_max_equals_eta_and_scale_invariant(self, seed, eta, scale):
        m = plain_mlp([3, 5, 2], seed)
        a = score_erm(m, ErmConfig(eta))
        for s in a.layers.values():
            assert s.max() == pytest.approx(eta, rel=1e-12)
        for i in m.prunable_indices():
            m.layers[i].params["weight"] *= scale
        b = score_erm(m, ErmConfig(eta))
        for i in a.layers:
            np.testing.assert_allclose(a.layers[i], b.layers[i], rtol=1e-12)

    def test_all_zero_layer_rejected_with_index(self):
        m = plain_mlp([3, 4, 2])
        m.layers[2].params["weight"][:] = 0
        with pytest.raises(ValueError, match="layer 2"):
            score_erm(m)


class TestAse:
    def test_quadratic_scalar(self):
        h = second_difference(lambda w: float((w ** 2).sum()), np.array([3.0]))
        assert h[0] == pytest.approx(2.0, abs=1e-6)
        assert ase_from_hessian(h, [3.0])[0] == pytest.approx(9.0, abs=1e-5)

    def test_zero_weight_scores_zero(self, small_batch):
        m = init_model(mlp_arch(3, [4], 3), 0)
        m.layers[0].params["weight"][1, 2] = 0.0
        for mode in ("fisher", "finite_diff"):
            assert score_ase(m, small_batch, mode).layers[0][1, 2] == 0.0

    def test_empty_batch_rejected(self, small_mlp, small_batch):
        with pytest.raises(ValueError):
            score_ase(small_mlp, small_batch.subset([]))

    def test_fisher_vs_finite_diff_rank_agreement(self, small_batch, capsys):
        m = init_model(mlp_arch(3, [6], 3, batchnorm=False), 2)
        rho = rank_correlation(score_ase(m, small_batch, "fisher"),
                               score_ase(m, small_batch, "finite_diff"))
        # two curvature estimates; agreement is reported, not enforced
        print(f"ASE fisher vs finite_diff Spearman rho = {rho:.3f}")
        assert np.isfinite(rho)


def bnsf_net(gamma, var, w):
    arch = {"input_shape": [1], "num_classes": 2, "layers": [
        {"kind": "dense", "out": 1}, {"kind": "batchnorm"}, {"kind": "relu"},
        {"kind": "dense", "out": 2}]}
    m = build_model(arch)
    m.layers[0].params["weight"] = np.array([[w]])
    m.layers[1].params["gamma"] = np.array([gamma])
    m.layers[1].buffers["running_var"] = np.array([var])
    return m


class TestBnsf:
    def test_direct_arithmetic(self):
        eps = 1e-5
        m = bnsf_net(2.0, 16.0 - eps, 1.0)
        assert score_bnsf(m).layers[0][0, 0] == pytest.approx(0.5, abs=1e-12)

    def test_zero_gamma_annihilates_channel(self, small_mlp):
        small_mlp.layers[1].params["gamma"][2] = 0.0
        assert np.all(score_bnsf(small_mlp).layers[0][2] == 0)

    def test_ratio_invariance(self):
        eps = 1e-5
        a = score_bnsf(bnsf_net(2.0, 16.0 - eps, 1.0)).layers[0]
        b = score_bnsf(bnsf_net(4.0, 64.0 - eps, 1.0)).layers[0]
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_requested_layer_without_batchnorm_rejected(self, small_mlp):
        head = small_mlp.prunable_indices()[-1]
        with pytest.raises(ValueError, match="batchnorm"):
            score_bnsf(small_mlp, layers=[head])


@pytest.fixture(scope="module")
def trained_moons_model():
    data, _, _ = to_unit_box(gen_synthetic("moons", 300, 0.15, seed=0))
    m = init_model(mlp_arch(2, [16, 16], 2), 0)
    tc = TrainConfig(epochs=4, batch_size=64, lr_schedule=[(0, 0.05)],
                     attack=AttackConfig(0.05, 0.0125, 3), track=False)
    m, _ = adversarial_train(m, data, tc)
    return randomize_bn(m, np.random.default_rng(0)), data


class TestAcrossMetrics:
    def test_metrics_rank_weights_differently(self, trained_moons_model):
        m, data = trained_moons_model
        batch = data.subset(np.arange(64))
        tops = {k: top_set(compute_scores(k, m, batch)) for k in ("NIS", "ERM", "ASE", "BNSF")}
        for a, b in itertools.combinations(tops, 2):
            assert tops[a] != tops[b], (a, b)

    def test_unknown_metric(self, small_mlp):
        with pytest.raises(ValueError, match="unknown metric"):
            compute_scores("L2", small_mlp)

    def test_report_json(self, tmp_path, small_mlp):
        path = save_report([score_erm(small_mlp), score_nis(small_mlp)], tmp_path / "s.json",
                           include_values=True)
        recs = json.loads(path.read_text())
        assert len(recs) == 2 * len(small_mlp.prunable_indices())
        assert {r["metric"] for r in recs} == {"ERM", "NIS"}
        first = recs[0]
        assert len(first["values"]) == int(np.prod(first["shape"]))
        assert first["max"] == max(first["values"])

    def test_scores_non_negative(self, small_mlp, small_batch):
        for k in ("NIS", "ERM", "ASE", "BNSF"):
            for s in compute_scores(k, small_mlp, small_batch).layers.values():
                assert np.all(s >= 0)
