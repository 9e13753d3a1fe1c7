"""Acceptance criteria 1-11. Each test records one PASS/FAIL line for the run summary."""
import itertools
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, gradient_check, random_conv_instance
from eedlab.advtrain import adversarial_train
from eedlab.attacks import AttackConfig, FailureMatrix, pgd_attack
from eedlab.config import load_config
from eedlab.die import DieConfig, die_from_predictions, optimal_stop
from eedlab.ensemble import (EedLossConfig, diversity_probabilities, eed_loss, enumerate_teams,
                             robust_diversity)
from eedlab.importance import nis_product, nis_recursive, score_nis
from eedlab.netcore import Batch, build_model, forward, init_model, mlp_arch
from eedlab.pipeline import architecture, prepare_data, run_pipeline
from eedlab.pruning import adversarial_prune, global_sparsity, kept_count, make_mask

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk_moons.cfg"
DESK_SEEDS = range(5)


def record(n, ok, detail, seconds, limit):
    within = seconds < limit
    status = "PASS" if ok and within else "FAIL"
    ACCEPTANCE_LINES.append(
        f"{status}  criterion {n:>2}: {detail}  [{seconds:.1f}s, limit {limit}s]")
    assert ok, detail
    assert within, f"runtime {seconds:.1f}s exceeds {limit}s"


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    worst, instances = 0.0, 0
    for seed in range(20):
        model, batch = random_conv_instance(seed)
        for training in (False, True):
            worst = max(worst, max(gradient_check(model, batch, training).values()))
            instances += 1
    dt = time.perf_counter() - t0
    record(1, worst < 1e-4, f"{instances} instances (conv, batchnorm, relu, flatten, dense), "
           f"worst FD rel. error {worst:.2e} < 1e-4", dt, 30)


def brute_rd(m):
    s, n = m.shape
    one = sum(int(m[i, j]) for i in range(s) for j in range(n))
    two = sum(int(m[i, j] and m[k, j])
              for i, k in itertools.permutations(range(s), 2) for j in range(n))
    return Fraction(one, s * n), Fraction(two, s * (s - 1) * n)


def test_criterion_02_rd_correctness():
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    mismatches = 0
    for _ in range(100):
        s, n = int(r.integers(2, 7)), int(r.integers(1, 51))
        m = r.integers(0, 2, (s, n))
        fm = FailureMatrix(m, list(range(s)), list(range(n)))
        p_one, p_two = brute_rd(m)
        got = diversity_probabilities(tuple(range(s)), fm)
        rd = robust_diversity(tuple(range(s)), fm)
        expect = None if p_one == 0 else float(1 - p_two / p_one)
        mismatches += got != (p_one, p_two) or rd != expect
    disjoint = FailureMatrix(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]]), [0, 1, 2], [0, 1, 2])
    joint = FailureMatrix(np.array([[1, 0, 1], [1, 0, 1]]), [0, 1], [0, 1, 2])
    edges = robust_diversity((0, 1, 2), disjoint) == 1.0 and robust_diversity((0, 1), joint) == 0.0
    dt = time.perf_counter() - t0
    record(2, mismatches == 0 and edges,
           f"100 random matrices, {mismatches} mismatches vs exhaustive enumeration; "
           f"RD=1 and RD=0 edge cases {'exact' if edges else 'WRONG'}", dt, 5)


def test_criterion_03_ensemble_cardinality():
    t0 = time.perf_counter()
    bad = [n for n in range(2, 15) if len(enumerate_teams(n)) != 2 ** n - (n + 1)]
    n12 = len(enumerate_teams(12))
    dt = time.perf_counter() - t0
    record(3, not bad and n12 == 4083,
           f"|teams| = 2^N-(N+1) for N=2..14 (failures: {bad or 'none'}); N=12 gives {n12}", dt, 5)


def test_criterion_04_nis_equivalence():
    t0 = time.perf_counter()
    r = np.random.default_rng(4)
    worst = 0.0
    for trial in range(40):
        depth = 3 + trial % 2
        sizes = [int(v) for v in r.integers(2, 9, depth + 1)]
        model = init_model(mlp_arch(sizes[0], sizes[1:-1], sizes[-1], batchnorm=False), trial)
        final = r.uniform(0, 1, sizes[-1])
        weights = [model.layers[i].params["weight"] for i in model.prunable_indices()]
        direct = nis_product(weights, final)
        rec = nis_recursive(weights, final)
        via_model = score_nis(model, final).neurons
        for k, i in enumerate(model.prunable_indices()):
            worst = max(worst, np.max(np.abs(rec[k] - direct[k])),
                        np.max(np.abs(via_model[i] - direct[k])))
    dt = time.perf_counter() - t0
    record(4, worst <= 1e-10, f"40 random 3-4 layer nets, max |recursive - product| = "
           f"{worst:.1e} <= 1e-10", dt, 5)


def half_up(a, n):
    return math.floor(Fraction(a) * n + Fraction(1, 2))


def test_criterion_05_mask_budgets():
    t0 = time.perf_counter()
    r = np.random.default_rng(5)
    bad = 0
    for _ in range(200):
        n = int(r.integers(1, 2000))
        a = float(r.uniform(0.01, 1.0))
        want = half_up(a, n)
        if want == 0:
            continue
        mask = make_mask({0: r.integers(0, 10, n).astype(float)}, {0: a})[0]
        bad += int(mask.sum()) != want or kept_count(a, n) != want
    cfg = load_config(DESK)
    data = prepare_data(cfg)
    base = init_model(architecture(cfg, data), cfg.seed)
    base, _ = adversarial_train(base, data["train"], cfg.train_config(5))
    sparsities = {}
    for metric in ("NIS", "ERM", "ASE", "BNSF"):
        pruned, _ = adversarial_prune(base, metric, data["train"], cfg.prune_config(), seed=1)
        sparsities[metric] = global_sparsity(pruned)
    worst = max(abs(s - 0.95) for s in sparsities.values())
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.4f}" for k, v in sparsities.items())
    record(5, bad == 0 and worst <= 0.005,
           f"200 (scores, rate) pairs: {bad} count mismatches; desk c_r=0.95 sparsity {detail} "
           f"(max deviation {worst:.4f} <= 0.005)", dt, 120)


def brute_stop(q):
    z = [q[t] * math.prod(1 - v for v in q[:t]) for t in range(len(q))]
    return z.index(max(z)) + 1


def test_criterion_06_die_optimality():
    t0 = time.perf_counter()
    r = np.random.default_rng(6)
    bad = 0
    for _ in range(1000):
        q = r.uniform(0, 1, int(r.integers(1, 10))).tolist()
        bad += optimal_stop(q) != brute_stop(q)
        preds = r.dirichlet(np.ones(3), size=int(r.integers(1, 8)))
        trace = die_from_predictions(list(preds), DieConfig(mode="exhaustive"))
        bad += trace.stop != brute_stop(trace.q)
    hand = optimal_stop([0.1, 0.5, 0.9]) == 2 and optimal_stop([1.0, 0.4, 0.7]) == 1
    dt = time.perf_counter() - t0
    record(6, bad == 0 and hand, f"1000 random q plus 1000 exhaustive DIE traces: {bad} "
           f"disagreements with brute-force argmax; hand cases {'exact' if hand else 'WRONG'}",
           dt, 5)


def test_criterion_07_attack_contracts():
    t0 = time.perf_counter()
    r = np.random.default_rng(7)
    violations = 0
    models = [init_model(mlp_arch(3, [6], 3), s) for s in range(10)]
    for run in range(1000):
        eps = float(r.uniform(0, 0.5))
        cfg = AttackConfig(eps, float(r.uniform(0.001, 0.2)), int(r.integers(1, 6)),
                           bool(r.integers(0, 2)))
        batch = Batch(r.uniform(0, 1, (4, 3)), r.integers(0, 3, 4))
        x = pgd_attack(models[run % 10], batch, cfg, seed=run)
        violations += np.max(np.abs(x - batch.inputs)) > eps + 1e-9 or x.min() < 0 or x.max() > 1
    w, b = r.normal(size=(2, 3)), r.normal(size=2)
    lin = build_model({"input_shape": [3], "num_classes": 2,
                       "layers": [{"kind": "dense", "out": 2}]})
    lin.layers[0].params["weight"], lin.layers[0].params["bias"] = w, b
    batch = Batch(r.uniform(0.2, 0.8, (50, 3)), r.integers(0, 2, 50))
    p = forward(lin, batch.inputs)
    p[np.arange(50), batch.labels] -= 1
    closed = batch.inputs + 0.05 * np.sign(p @ w)
    lin_err = float(np.max(np.abs(pgd_attack(lin, batch, AttackConfig(0.05, 0.05, 1)) - closed)))
    zb = Batch(r.uniform(0, 1, (8, 3)), r.integers(0, 3, 8))
    ident = np.array_equal(pgd_attack(models[0], zb, AttackConfig(0.0, 0.1, 5, True), seed=1),
                           zb.inputs)
    dt = time.perf_counter() - t0
    record(7, violations == 0 and lin_err <= 1e-9 and ident,
           f"1000 PGD runs, {violations} ball/box violations; linear closed form error "
           f"{lin_err:.1e} <= 1e-9; eps=0 identity {'exact' if ident else 'BROKEN'}", dt, 30)


def test_criterion_08_loss_gating():
    t0 = time.perf_counter()
    r = np.random.default_rng(8)
    models = [init_model(mlp_arch(3, [6], 3), s) for s in range(3)]
    for m in models:
        for i in m.prunable_indices():
            m.layers[i].params["weight"] *= 3
    batch = Batch(r.uniform(0, 1, (16, 3)), r.integers(0, 3, 16))

    def grads(**kw):
        return eed_loss(models, batch, EedLossConfig(misclass_form="non_true", **kw))

    def same(a, b):
        return all(np.array_equal(x[k], y[k]) for x, y in zip(a.grads, b.grads) for k in x)

    # with a weight at zero, the gated term's own knobs must not move the gradient
    omega_gated = same(grads(omega=0), eed_loss(models, batch, EedLossConfig(
        omega=0, misclass_form="literal", log_clamp_eps=1e-3)))
    omega_live = not same(grads(omega=0), grads(omega=10))
    gamma_gated = same(grads(gamma=0, lambda1=0.7, lambda2=0.25),
                       grads(gamma=0, lambda1=5.0, lambda2=9.0))
    gamma_live = not same(grads(gamma=0), grads(gamma=4))
    zero_terms = (grads(omega=0).terms["misclass"] == 0.0
                  and grads(gamma=0).terms["weight"] == 0.0
                  and grads(gamma=0).terms["activation"] == 0.0)
    full = grads()
    gap = abs(sum(full.terms.values()) - full.total)
    dt = time.perf_counter() - t0
    ok = omega_gated and omega_live and gamma_gated and gamma_live and zero_terms and gap <= 1e-10
    record(8, ok, f"omega=0 gates L_R gradient: {omega_gated and omega_live}; gamma=0 gates L_C "
           f"gradient: {gamma_gated and gamma_live}; breakdown gap {gap:.1e} <= 1e-10", dt, 10)


# ---------------------------------------------------------------------------
# desk-scale experiment (criteria 9-11)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    reports, seconds = {}, {}
    for seed in DESK_SEEDS:
        t0 = time.perf_counter()
        reports[seed] = run_pipeline(load_config(DESK, {"seed": str(seed),
                                                        "out": str(root / f"seed{seed}")}))
        seconds[seed] = time.perf_counter() - t0
    return root, reports, seconds


def test_criterion_09_desk_team_vs_submodels(desk_runs):
    _, reports, seconds = desk_runs
    team, best, mean = [], [], []
    for rep in reports.values():
        subs = [e.robust["pgd"] for e in rep.entities if e.kind == "submodel"]
        team.append(rep.entity("team").robust["pgd"])
        best.append(max(subs))
        mean.append(float(np.mean(subs)))
    t, b, m = np.mean(team), np.mean(best), np.mean(mean)
    sparsity = np.mean([rep.global_sparsity for rep in reports.values()])
    ok = t - b >= 0.0 and t - m >= 0.02
    record(9, ok, f"5 seeds, PGD acc: team {t:.4f}, best sub {b:.4f} (margin {t - b:+.4f} >= 0), "
           f"mean sub {m:.4f} (margin {t - m:+.4f} >= 0.02); team sparsity {sparsity:.4f}",
           sum(seconds.values()), 900)


def test_criterion_10_die_efficiency(desk_runs):
    _, reports, seconds = desk_runs
    size = np.mean([rep.die["team_size"] for rep in reports.values()])
    stop = np.mean([rep.die["mean_stop"]["pgd"] for rep in reports.values()])
    die_acc = np.mean([rep.entity("team_die").robust["pgd"] for rep in reports.values()])
    team_acc = np.mean([rep.entity("team").robust["pgd"] for rep in reports.values()])
    ok = stop < size and abs(die_acc - team_acc) <= 0.02
    record(10, ok, f"5 seeds, PGD inputs: mean stop {stop:.3f} < team size {size:.0f}; DIE acc "
           f"{die_acc:.4f} vs team {team_acc:.4f} (|diff| {abs(die_acc - team_acc):.4f} <= 0.02)",
           sum(seconds.values()), 600)


def test_criterion_11_determinism(desk_runs, tmp_path):
    root, _, seconds = desk_runs
    t0 = time.perf_counter()
    run_pipeline(load_config(DESK, {"seed": "0", "out": str(tmp_path / "again")}))
    dt = time.perf_counter() - t0
    first = (root / "seed0" / "metrics.json").read_bytes()
    second = (tmp_path / "again" / "metrics.json").read_bytes()
    record(11, first == second, f"run-all twice (seed 0): metrics.json "
           f"{'byte-identical' if first == second else 'DIFFERS'} ({len(first)} bytes)",
           seconds[0] + dt, 900)
