"""End-to-end experiment: pretrain, prune a pool, select a team, train it, evaluate.

Every stage reads its inputs from the output directory when they are not
handed over in memory, so stages can be run one at a time from the CLI.

Output layout::

    config.resolved.txt     effective configuration
    base.eedm               adversarially pretrained dense model
    pool/                   sub_XX.eedm, sub_XX.json and manifest.json
    failure_matrix.csv      validation failures of every pool member
    selection.json          candidate teams, RD values and the chosen team
    team/                   EED-trained members and manifest.json
    metrics.json/.csv       final MetricsReport (timings go to timings.json)
    die_traces.json         per-input DIE traces on the test set
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .advtrain import adversarial_train, save_history
from .attacks import build_failure_matrix, pgd_attack
from .config import ExperimentConfig, dump_config
from .data import gen_synthetic, load_idx, split, to_unit_box
from .die import die_evaluate
from .ensemble import (build_pool, combine, enumerate_teams, load_team, save_selection,
                       save_team, select_team, train_ensemble)
from .netcore import Batch, Model, forward, init_model, mlp_arch
from .pruning import global_sparsity
from .report import EntityMetrics, MetricsReport, emit_report

STAGES = ("pretrain", "prune-pool", "select", "train-eed", "eval", "die-eval")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# data and architecture
# ---------------------------------------------------------------------------

def prepare_data(cfg: ExperimentConfig) -> dict:
    """Train / validation / test batches for the configured source."""
    d = cfg.data
    seed = cfg.data_seed()
    if d.source.startswith("synthetic-"):
        full = gen_synthetic(d.source.split("-", 1)[1], d.n, d.noise, seed)
        train, val, test = split(full, [1 - d.val_fraction - d.test_fraction, d.val_fraction],
                                 seed)
        train, lo, hi = to_unit_box(train)
        val = to_unit_box(val, lo, hi)[0]
        test = to_unit_box(test, lo, hi)[0]
        return {"train": train, "val": val, "test": test}
    full = load_idx(d.images, d.labels)
    if d.limit:
        full = full.subset(np.arange(min(d.limit, len(full))))
    if d.test_images:
        test = load_idx(d.test_images, d.test_labels)
        if d.limit:
            test = test.subset(np.arange(min(d.limit, len(test))))
        train, val = split(full, [1 - d.val_fraction], seed)
    else:
        train, val, test = split(full, [1 - d.val_fraction - d.test_fraction, d.val_fraction],
                                 seed)
    return {"train": train, "val": val, "test": test}


def architecture(cfg: ExperimentConfig, data: dict) -> dict:
    train = data["train"]
    num_classes = int(max(b.labels.max() for b in data.values() if len(b)) + 1)
    num_classes = max(num_classes, 2)
    if train.inputs.ndim == 2:
        return mlp_arch(train.inputs.shape[1], cfg.model.hidden, num_classes,
                        cfg.model.batchnorm)
    layers = []
    for ch in cfg.model.conv:
        layers.append({"kind": "conv2d", "out": int(ch), "kernel": 3})
        if cfg.model.batchnorm:
            layers.append({"kind": "batchnorm"})
        layers.append({"kind": "relu"})
    layers.append({"kind": "flatten"})
    for h in cfg.model.hidden:
        layers.append({"kind": "dense", "out": int(h)})
        if cfg.model.batchnorm:
            layers.append({"kind": "batchnorm"})
        layers.append({"kind": "relu"})
    layers.append({"kind": "dense", "out": num_classes})
    return {"input_shape": list(train.inputs.shape[1:]), "num_classes": num_classes,
            "layers": layers}


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path
    data: dict
    timings: dict = field(default_factory=dict)
    base: Model | None = None
    pool: list | None = None
    selection: dict | None = None
    team: list | None = None

    @classmethod
    def open(cls, cfg: ExperimentConfig) -> "Run":
        cfg.validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.txt").write_text(dump_config(cfg))
        try:
            data = prepare_data(cfg)
        except (OSError, ValueError) as exc:
            raise StageError("data", exc) from exc
        return cls(cfg, out, data)

    # lazy loaders for stage-by-stage use
    def need_base(self) -> Model:
        if self.base is None:
            self.base = checkpoint.load(self.out / "base.eedm")
        return self.base

    def need_pool(self) -> list:
        if self.pool is None:
            manifest = json.loads((self.out / "pool" / "manifest.json").read_text())
            self.pool = [checkpoint.load(self.out / "pool" / m["file"]) for m in manifest]
        return self.pool

    def need_selection(self) -> dict:
        if self.selection is None:
            self.selection = json.loads((self.out / "selection.json").read_text())
        return self.selection

    def need_team(self) -> list:
        if self.team is None:
            self.team, _ = load_team(self.out / "team")
        return self.team


def _timed(run: Run, stage: str, fn):
    start = time.perf_counter()
    try:
        result = fn(run)
    except Exception as exc:  # any failure is reported with the stage name
        raise StageError(stage, exc) from exc
    run.timings[stage] = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_pretrain(run: Run) -> Model:
    cfg = run.cfg
    if cfg.model.base_checkpoint:
        model = checkpoint.load(cfg.model.base_checkpoint)
    else:
        model = init_model(architecture(cfg, run.data), cfg.seed)
    tc = cfg.train_config(cfg.stages.pretrain)
    model, history = adversarial_train(model, run.data["train"], tc, eval_batch=run.data["val"])
    checkpoint.save(model, run.out / "base.eedm")
    save_history(history, run.out / "pretrain_history.json")
    run.base = model
    return model


def stage_prune_pool(run: Run) -> list:
    cfg = run.cfg
    base = run.need_base()
    models, info = build_pool(base, run.data["train"], cfg.pool_spec(), cfg.prune_config())
    pool_dir = run.out / "pool"
    pool_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for m, rec in zip(models, info):
        name = f"sub_{rec['id']:02d}"
        checkpoint.save(m, pool_dir / f"{name}.eedm")
        (pool_dir / f"{name}.json").write_text(json.dumps(rec, indent=2))
        manifest.append({"id": rec["id"], "file": f"{name}.eedm", "metric": rec["metric"],
                         "part": rec["part"], "sparsity": global_sparsity(m)})
    (pool_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    run.pool = models
    return models


def stage_select(run: Run) -> dict:
    cfg = run.cfg
    pool = run.need_pool()
    fm = build_failure_matrix(pool, run.data["val"], cfg.eval_attack("pgd"), seed=cfg.seed,
                              mode=cfg.eval.failure_mode, model_ids=list(range(len(pool))))
    fm.to_csv(run.out / "failure_matrix.csv")
    teams = enumerate_teams(len(pool), cfg.eed.max_enumeration, fm)
    lo, hi = cfg.team_size_bounds(len(pool))
    team, report = select_team(teams, fm, cfg.eed_config(), max_size=hi, min_size=lo)
    # DIE visits members from the most to the least robust on validation
    rates = fm.failure_rates()
    report["die_order"] = sorted(team.members, key=lambda m: (float(rates[m]), m))
    save_selection(report, run.out / "selection.json")
    run.selection = report
    return report


def stage_train_eed(run: Run) -> list:
    cfg = run.cfg
    pool = run.need_pool()
    ids = run.need_selection()["chosen"]["ids"]
    tc = cfg.train_config(cfg.stages.ensemble, seed_offset=2, lr=cfg.train.ensemble_lr)
    team, history = train_ensemble([pool[i] for i in ids], run.data["train"],
                                   cfg.eed_config(), tc)
    save_team(team, ids, run.out / "team", {"history": history})
    run.team = team
    return team


def _attack_inputs(cfg, target, batch: Batch, attack: str):
    return pgd_attack(target, batch, cfg.eval_attack(attack), seed=cfg.seed)


def _acc(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _kept(model: Model) -> int:
    return int(sum(model.layers[i].mask.sum() for i in model.prunable_indices()))


def team_sparsity(team, base: Model) -> float:
    """1 - (kept weights over all members) / (prunable weights of one dense model)."""
    total = base.n_prunable()
    return max(0.0, 1.0 - sum(_kept(m) for m in team) / total)


def _die_block(run: Run, team, test: Batch, adv: dict) -> tuple:
    cfg = run.cfg
    dcfg = cfg.die_config()
    inputs = {"clean": test.inputs, **adv}
    block = {"mode": dcfg.mode, "a": dcfg.a, "b": dcfg.b, "team_size": len(team),
             "mean_stop": {}, "accuracy": {}, "speedup": {}}
    traces = {}
    for name, x in inputs.items():
        res = die_evaluate(team, x, test.labels, dcfg)
        block["mean_stop"][name] = res["mean_stop"]
        block["accuracy"][name] = res["accuracy"]
        block["speedup"][name] = res["speedup"]
        traces[name] = [t.to_dict(int(y)) for t, y in zip(res["traces"], test.labels)]
    return block, traces


def _die_team(run: Run, team) -> list:
    sel = run.need_selection()
    ids = sel["chosen"]["ids"]
    order = sel.get("die_order", ids)
    return [team[ids.index(m)] for m in order]


def stage_eval(run: Run, with_die=True) -> MetricsReport:
    cfg = run.cfg
    base, pool, team = run.need_base(), run.need_pool(), run.need_team()
    ids = run.need_selection()["chosen"]["ids"]
    test = run.data["test"]
    attacks = list(cfg.eval.attacks)
    entities = []

    def single(name, model, kind):
        clean = _acc(forward(model, test.inputs), test.labels)
        robust = {a: _acc(forward(model, _attack_inputs(cfg, model, test, a)), test.labels)
                  for a in attacks}
        entities.append(EntityMetrics(name, clean, robust, global_sparsity(model), kind))

    single("base", base, "dense")
    for i, m in enumerate(pool):
        single(f"sub_{i:02d}", m, "submodel")

    # team members are attacked jointly (PGD on the averaged prediction)
    sparsity = team_sparsity(team, base)
    adv = {a: _attack_inputs(cfg, team, test, a) for a in attacks}
    member_clean = [forward(m, test.inputs) for m in team]
    member_adv = {a: [forward(m, x) for m in team] for a, x in adv.items()}
    for combiner in ("average", "max"):
        name = "team" if combiner == cfg.eval.combiner else f"team_{combiner}"
        entities.append(EntityMetrics(
            name, _acc(combine(member_clean, combiner), test.labels),
            {a: _acc(combine(member_adv[a], combiner), test.labels) for a in attacks},
            sparsity, "ensemble"))

    report = MetricsReport(attacks, entities, team=list(ids),
                           rd=run.need_selection()["chosen"]["rd"], global_sparsity=sparsity)
    if with_die and cfg.die.mode != "off":
        block, traces = _die_block(run, _die_team(run, team), test, adv)
        report.die = block
        entities.append(EntityMetrics("team_die", block["accuracy"]["clean"],
                                      {a: block["accuracy"][a] for a in attacks},
                                      sparsity, "die"))
        (run.out / "die_traces.json").write_text(json.dumps(traces))
    report.stage_seconds = dict(run.timings)
    return report


def stage_die_eval(run: Run) -> dict:
    """DIE on the test set only (clean plus each configured attack)."""
    cfg = run.cfg
    team = run.need_team()
    test = run.data["test"]
    adv = {a: _attack_inputs(cfg, team, test, a) for a in cfg.eval.attacks}
    if cfg.die.mode == "off":
        raise ValueError("die.mode is off")
    block, traces = _die_block(run, _die_team(run, team), test, adv)
    (run.out / "die.json").write_text(json.dumps(block, indent=2, sort_keys=True) + "\n")
    (run.out / "die_traces.json").write_text(json.dumps(traces))
    return block


STAGE_FUNCS = {
    "pretrain": stage_pretrain,
    "prune-pool": stage_prune_pool,
    "select": stage_select,
    "train-eed": stage_train_eed,
    "die-eval": stage_die_eval,
}


def run_stage(cfg: ExperimentConfig, stage: str):
    """Run a single stage, loading earlier outputs from ``cfg.out``."""
    run = Run.open(cfg)
    if stage == "eval":
        report = _timed(run, "eval", stage_eval)
        emit_report(report, run.out)
        return report
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return _timed(run, stage, STAGE_FUNCS[stage])


def run_pipeline(cfg: ExperimentConfig) -> MetricsReport:
    """All stages in order; writes every artefact and returns the MetricsReport."""
    run = Run.open(cfg)
    for stage in ("pretrain", "prune-pool", "select", "train-eed"):
        _timed(run, stage, STAGE_FUNCS[stage])
    start = time.perf_counter()
    report = _timed(run, "eval", stage_eval)
    report.stage_seconds["eval"] = time.perf_counter() - start
    emit_report(report, run.out)
    return report


def sparsity_from_checkpoints(out_dir) -> float:
    """Recompute the team's global sparsity from the saved checkpoints alone."""
    out_dir = Path(out_dir)
    base = checkpoint.load(out_dir / "base.eedm")
    team, _ = load_team(out_dir / "team")
    return team_sparsity(team, base)

