"""Sub-model pool, Robust Diversity team selection and the EED training loss."""
from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint
from .advtrain import TrainConfig, TrainingDivergence, minibatches
from .attacks import FailureMatrix, pgd_attack
from .importance import METRICS
from .netcore import (SGD, Batch, Model, ReLU, backprop, forward, forward_trace,
                      softmax_backward, update_running_stats)
from .pruning import PruneConfig, adversarial_prune


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------

@dataclass
class PoolSpec:
    num_subsets: int = 4
    shared_fraction: float = 0.25
    metrics: tuple = METRICS
    seed: int = 0

    def __post_init__(self):
        if self.num_subsets < 1:
            raise ValueError("num_subsets must be >= 1")
        if not 0 <= self.shared_fraction <= 1:
            raise ValueError("shared_fraction must lie in [0, 1]")
        self.metrics = tuple(m.upper() for m in self.metrics)
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}")

    @property
    def pool_size(self) -> int:
        per = self.num_subsets - 1 if self.num_subsets > 1 else 1
        return len(self.metrics) * per


def partition(n: int, spec: PoolSpec) -> list:
    """Training index sets, one per sub-model, grouped metric by metric.

    Each metric reshuffles the data with its own seed; the first
    ``shared_fraction`` of the shuffle goes to every sub-model of that metric
    and the rest is split into ``num_subsets - 1`` disjoint private parts.
    Returns ``[(metric, part, indices), ...]``.
    """
    out = []
    for k, metric in enumerate(spec.metrics):
        if spec.num_subsets == 1:
            out.append((metric, 0, np.arange(n)))
            continue
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, METRICS.index(metric)]))
        perm = rng.permutation(n)
        n_shared = int(round(spec.shared_fraction * n))
        shared, rest = perm[:n_shared], perm[n_shared:]
        parts = np.array_split(rest, spec.num_subsets - 1)
        for p, private in enumerate(parts):
            idx = np.sort(np.concatenate([shared, private]))
            if len(idx) < 2 or len(private) == 0 and spec.shared_fraction < 1:
                raise ValueError(f"dataset of {n} samples is too small for "
                                 f"{spec.num_subsets} subsets")
            out.append((metric, p, idx))
    return out


def _workers():
    try:
        return max(1, int(os.environ.get("EED_THREADS", "1")))
    except ValueError:
        return 1


def build_pool(base: Model, dataset: Batch, spec: PoolSpec, prune_cfg: PruneConfig):
    """Prune ``base`` once per (metric, data subset); returns ``(models, info)``.

    ``info`` lists ``{"id", "metric", "part", "n_samples", "report"}`` per sub-model.
    """
    jobs = partition(len(dataset), spec)

    def run(job_id):
        metric, part, idx = jobs[job_id]
        seed = int(np.random.SeedSequence([spec.seed, METRICS.index(metric), part])
                   .generate_state(1)[0])
        model, report = adversarial_prune(base, metric, dataset.subset(idx), prune_cfg, seed=seed)
        return model, {"id": job_id, "metric": metric, "part": part,
                       "n_samples": int(len(idx)), "report": report}

    with ThreadPoolExecutor(max_workers=_workers()) as ex:
        results = list(ex.map(run, range(len(jobs))))
    return [r[0] for r in results], [r[1] for r in results]


# ---------------------------------------------------------------------------
# teams and robust diversity
# ---------------------------------------------------------------------------

@dataclass
class EnsembleTeam:
    members: tuple
    rd: float | None = None
    flags: list = field(default_factory=list)
    mean_failure: float | None = None

    def __post_init__(self):
        self.members = tuple(sorted(int(m) for m in self.members))
        if len(set(self.members)) != len(self.members):
            raise ValueError("team members must be unique")

    @property
    def size(self) -> int:
        return len(self.members)

    def selection_rd(self) -> float:
        return 1.0 if self.rd is None else self.rd

    def to_dict(self) -> dict:
        return {"ids": list(self.members), "size": self.size, "rd": self.rd,
                "flags": list(self.flags), "mean_failure": self.mean_failure}


def _rows(team, fm: FailureMatrix):
    members = team.members if isinstance(team, EnsembleTeam) else tuple(team)
    pos = {mid: r for r, mid in enumerate(fm.model_ids)}
    try:
        return fm.matrix[[pos[m] for m in members]]
    except KeyError as exc:
        raise ValueError(f"failure matrix has no row for model {exc.args[0]}") from None


def diversity_probabilities(team, fm: FailureMatrix):
    """Exact ``(p_one, p_two)`` as fractions.

    With X_j members failing sample j: p_one = mean_j X_j / S and
    p_two = mean_j X_j (X_j - 1) / (S (S - 1)).
    """
    rows = _rows(team, fm).astype(np.int64)
    s, n = rows.shape
    if s < 2:
        raise ValueError("robust diversity needs at least two members")
    x = rows.sum(axis=0)
    p_one = Fraction(int(x.sum()), s * n)
    p_two = Fraction(int((x * (x - 1)).sum()), s * (s - 1) * n)
    return p_one, p_two


def robust_diversity(team, fm: FailureMatrix):
    """1 - p_two / p_one, or None when no member fails on any sample."""
    p_one, p_two = diversity_probabilities(team, fm)
    if p_one == 0:
        return None
    return float(1 - p_two / p_one)


def score_team(team: EnsembleTeam, fm: FailureMatrix) -> EnsembleTeam:
    rd = robust_diversity(team, fm)
    flags = [] if rd is not None else ["no observed failures"]
    mean_failure = float(_rows(team, fm).mean())
    return EnsembleTeam(team.members, rd, flags, mean_failure)


def team_count(n: int) -> int:
    return 2 ** n - (n + 1)


def enumerate_teams(n: int, max_enumeration: int = 2 ** 20, fm: FailureMatrix | None = None):
    """All subsets of size >= 2 of ``range(n)``, smallest first.

    When there are more than ``max_enumeration`` subsets a greedy forward
    selection is used instead (it needs ``fm``): start from the best-RD pair
    and repeatedly add the member that keeps RD highest, yielding one team per size.
    """
    if n < 2:
        raise ValueError("need at least two sub-models to form a team")
    if team_count(n) <= max_enumeration:
        return [EnsembleTeam(c) for s in range(2, n + 1)
                for c in itertools.combinations(range(n), s)]
    if fm is None:
        raise ValueError(f"{team_count(n)} teams exceed max_enumeration={max_enumeration}; "
                         "greedy selection needs a failure matrix")
    ids = list(fm.model_ids)[:n]
    pairs = [score_team(EnsembleTeam(p), fm) for p in itertools.combinations(ids, 2)]
    current = max(pairs, key=lambda t: (t.selection_rd(), [-m for m in t.members]))
    teams = [current]
    while current.size < n:
        options = [score_team(EnsembleTeam(current.members + (m,)), fm)
                   for m in ids if m not in current.members]
        current = max(options, key=lambda t: (t.selection_rd(), [-m for m in t.members]))
        teams.append(current)
    return teams


@dataclass
class EedLossConfig:
    alpha: float = 0.5
    beta: float = 0.1
    omega: float = 10.0
    gamma: float = 4.0
    lambda1: float = 0.7
    lambda2: float = 0.25
    rd_threshold: float = 0.7
    log_clamp_eps: float = 1e-7
    det_offset: float = 1e-6
    misclass_form: str = "literal"
    normalize: bool = True

    def __post_init__(self):
        for name in ("alpha", "beta", "omega", "gamma", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.rd_threshold <= 1:
            raise ValueError("rd_threshold must lie in [0, 1]")
        if self.misclass_form not in ("literal", "non_true"):
            raise ValueError(f"unknown misclass_form {self.misclass_form!r}")


def select_team(teams, fm: FailureMatrix, cfg: EedLossConfig | None = None, max_size=None,
                min_size=None):
    """Smallest team whose RD clears the threshold.

    Ties go to higher RD, then lower mean member failure rate, then
    lexicographic ids. Without any qualifying team the global RD maximum is
    taken. ``max_size``/``min_size`` restrict the candidate sizes (e.g. to what
    a parameter budget allows). Returns ``(team, report)``.

    Team RD is a weighted mean of pairwise RDs (weights F_i + F_j), so without
    a size restriction the choice is always a pair unless RD ties.
    """
    cfg = cfg or EedLossConfig()
    scored = [t if t.mean_failure is not None else score_team(t, fm) for t in teams]
    if max_size is not None:
        scored = [t for t in scored if t.size <= max_size]
    if min_size is not None:
        scored = [t for t in scored if t.size >= min_size]
    if not scored:
        raise ValueError("no candidate teams")
    above = [t for t in scored if t.selection_rd() >= cfg.rd_threshold]
    path = []
    if above:
        path.append("threshold")
        pool = above
        best_size = min(t.size for t in pool)
        pool = [t for t in pool if t.size == best_size]
        path.append("smallest_size")
    else:
        path.append("fallback_global_max_rd")
        pool = scored
    best_rd = max(t.selection_rd() for t in pool)
    pool = [t for t in pool if t.selection_rd() == best_rd]
    if len(pool) > 1:
        path.append("highest_rd")
        if not above:
            best_size = min(t.size for t in pool)
            pool = [t for t in pool if t.size == best_size]
            path.append("smallest_size")
        low = min(t.mean_failure for t in pool)
        pool = [t for t in pool if t.mean_failure == low]
        if len(pool) > 1:
            path.append("lowest_failure")
            pool = sorted(pool, key=lambda t: t.members)
            path.append("lexicographic")
    chosen = pool[0]
    report = {"threshold": cfg.rd_threshold, "max_size": max_size, "min_size": min_size,
              "teams": [t.to_dict() for t in scored],
              "chosen": chosen.to_dict(), "tie_break": path}
    return chosen, report


def save_selection(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report))
    return path


# ---------------------------------------------------------------------------
# combiners
# ---------------------------------------------------------------------------

def combine(predictions, mode="average"):
    """Merge member probabilities: arithmetic mean, or per-class max renormalised."""
    preds = [np.asarray(p, dtype=float) for p in predictions]
    if not preds:
        raise ValueError("nothing to combine")
    stack = np.stack(preds)
    if mode == "average":
        return stack.mean(axis=0)
    if mode == "max":
        m = stack.max(axis=0)
        return m / m.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown combiner {mode!r}")


def team_predict(models, inputs, mode="average"):
    return combine([forward(m, inputs) for m in models], mode)


# ---------------------------------------------------------------------------
# EED loss
# ---------------------------------------------------------------------------

@dataclass
class EedLoss:
    total: float
    terms: dict
    metrics: dict
    grads: list
    traces: list = field(default_factory=list, repr=False)


def _weight_l1(model: Model, normalize: bool):
    idx = model.prunable_indices()
    total = sum(float(np.abs(model.layers[i].effective_weight()).sum()) for i in idx)
    n = sum(model.layers[i].mask.size for i in idx) if normalize else 1
    grads = {f"{i}.weight": np.sign(model.layers[i].effective_weight()) / n for i in idx}
    return total / n, grads


def _relu_indices(model: Model):
    return [i for i, layer in enumerate(model.layers) if isinstance(layer, ReLU)]


def eed_loss(models, batch: Batch, cfg: EedLossConfig, training=False, need_grads=True) -> EedLoss:
    """Batch-mean EED loss for a team, its per-term breakdown and member gradients.

    total = sum_i CE_i + alpha*Reg + beta*Div + omega*L_R
            + gamma*(lambda1*L_W + lambda2*L_A)
    Reg is the negative entropy of the averaged prediction and Div the negative
    log-determinant of the non-true-class Gram matrix, so minimising the loss
    raises ensemble entropy and diversity. L_A uses the L1 of ReLU outputs; the
    exact count of non-zero activations is reported in ``metrics``.
    """
    models = list(models)
    if not models:
        raise ValueError("team is empty")
    x, y = batch.inputs, batch.labels
    b, s = len(y), len(models)
    rows = np.arange(b)
    traces = [forward_trace(m, x, training) for m in models]
    probs = [t.probs for t in traces]
    c = probs[0].shape[1]
    avg = sum(probs) / s
    gp = [np.zeros_like(p) for p in probs]
    glogit = []

    # cross-entropy of every member
    ce = 0.0
    for p in probs:
        ce += float(-np.log(np.maximum(p[rows, y], 1e-300)).mean())
        g = p.copy()
        g[rows, y] -= 1.0
        glogit.append(g / b)

    # Reg: negative Shannon entropy of the averaged prediction
    safe = np.maximum(avg, 1e-300)
    neg_entropy = float((avg * np.log(safe)).sum(axis=1).mean())
    if cfg.alpha:
        d_avg = cfg.alpha * (np.log(safe) + 1.0) / b
        for g in gp:
            g += d_avg / s

    # Div: -log det(H~^T H~ + offset*I), columns are normalised non-true-class vectors
    keep = np.ones((b, c), bool)
    keep[rows, y] = False
    r = np.stack([p[keep].reshape(b, c - 1) for p in probs], axis=2)  # (b, c-1, s)
    norms = np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    ht = r / norms
    gram = np.einsum("bcs,bct->bst", ht, ht) + cfg.det_offset * np.eye(s)
    sign, logdet = np.linalg.slogdet(gram)
    neg_logdet = float(-logdet.mean())
    if cfg.beta:
        d_ht = -cfg.beta * 2.0 * np.einsum("bcs,bst->bct", ht, np.linalg.inv(gram)) / b
        proj = (d_ht * ht).sum(axis=1, keepdims=True)
        d_r = (d_ht - ht * proj) / norms
        for i in range(s):
            gp[i][keep] += d_r[:, :, i].ravel()

    # L_R: misclassification penalty on examples the averaged team gets wrong
    others = np.where(keep, avg, -np.inf).max(axis=1)
    psi = (avg[rows, y] < others).astype(float)
    stack = np.stack(probs)  # (s, b, c)
    if cfg.misclass_form == "literal":
        cand = stack
        scale = float(c)
    else:
        cand = np.where(keep[None], stack, -np.inf)
        scale = 1.0
    flat = cand.transpose(1, 0, 2).reshape(b, -1)
    arg = flat.argmax(axis=1)
    peak = flat[rows, arg]
    inner = 1.0 - scale * peak
    clamped = np.clip(inner, cfg.log_clamp_eps, 1.0)
    lr_term = float((-psi * np.log(clamped)).mean())
    if cfg.omega:
        active = (inner > cfg.log_clamp_eps) & (inner < 1.0)
        coef = cfg.omega * psi * active * scale / inner.clip(cfg.log_clamp_eps) / b
        mi, cj = np.divmod(arg, c)
        for i in range(s):
            sel = mi == i
            gp[i][rows[sel], cj[sel]] += coef[sel]

    # L_C: weight L1 and activation L1 surrogate
    l_w, act, act_count = 0.0, 0.0, 0.0
    w_grads = []
    extras = []
    for m, t in zip(models, traces):
        lw, wg = _weight_l1(m, cfg.normalize)
        l_w += lw
        w_grads.append(wg)
        relus = _relu_indices(m)
        units = sum(int(np.prod(t.outputs[i].shape[1:])) for i in relus) if cfg.normalize else 1
        units = max(units, 1)
        act += sum(float(t.outputs[i].sum(axis=tuple(range(1, t.outputs[i].ndim))).mean())
                   for i in relus) / units
        act_count += sum(float((t.outputs[i] != 0).reshape(b, -1).sum(axis=1).mean())
                         for i in relus)
        coef = cfg.gamma * cfg.lambda2 / (units * b)
        extras.append({i: np.full_like(t.outputs[i], coef) for i in relus} if coef else {})

    terms = {
        "ce": ce,
        "reg": cfg.alpha * neg_entropy,
        "div": cfg.beta * neg_logdet,
        "misclass": cfg.omega * lr_term,
        "weight": cfg.gamma * cfg.lambda1 * l_w,
        "activation": cfg.gamma * cfg.lambda2 * act,
    }
    for name, v in terms.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"EED loss term {name!r} is not finite")
    total = float(sum(terms.values()))
    metrics = {"neg_entropy": neg_entropy, "neg_logdet": neg_logdet, "misclass_raw": lr_term,
               "weight_l1": l_w, "activation_l1": act, "active_units": act_count,
               "misclassified": float(psi.mean())}

    grads = []
    if need_grads:
        wcoef = cfg.gamma * cfg.lambda1
        for i, (m, t) in enumerate(zip(models, traces)):
            gl = glogit[i] + softmax_backward(probs[i], gp[i])
            g, _ = backprop(m, t, gl, extra=extras[i])
            if wcoef:
                for k, v in w_grads[i].items():
                    g[k] = g[k] + wcoef * v * m.layers[int(k.split(".")[0])].mask
            grads.append(g)
    return EedLoss(total, terms, metrics, grads, traces)


def train_ensemble(models, dataset: Batch, cfg: EedLossConfig, tc: TrainConfig, eval_fn=None):
    """Joint adversarial training of all members under the EED loss.

    Each batch is attacked with PGD against the averaged team. Returns
    ``(models, history)`` with per-epoch means of every loss term.
    """
    models = [m.copy() for m in models]
    history = []
    if tc.epochs == 0:
        return models, history
    opts = [SGD(tc.momentum, tc.weight_decay) for _ in models]
    seeds = np.random.SeedSequence([tc.seed, 0xEE])
    for epoch in range(tc.epochs):
        rng = np.random.default_rng(seeds.spawn(1)[0])
        lr = tc.lr_at(epoch)
        sums: dict[str, float] = {}
        nb = 0
        for bi, idx in enumerate(minibatches(len(dataset), tc.batch_size, rng)):
            mb = dataset.subset(idx)
            x_adv = pgd_attack(models, mb, tc.attack, seed=int(rng.integers(2**31)))
            try:
                res = eed_loss(models, Batch(x_adv, mb.labels), cfg, training=True)
            except FloatingPointError as exc:
                raise TrainingDivergence(f"{exc} at epoch {epoch}, batch {bi}",
                                         epoch=epoch, batch=bi) from None
            for m, t in zip(models, res.traces):
                update_running_stats(m, t)
            models = [opt.step(m, g, lr) for opt, m, g in zip(opts, models, res.grads)]
            for k, v in list(res.terms.items()) + [("total", res.total)]:
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
        rec = {"epoch": epoch + 1}
        rec.update({k: v / nb for k, v in sums.items()})
        if eval_fn is not None:
            rec.update(eval_fn(models))
        history.append(rec)
    return models, history


# ---------------------------------------------------------------------------
# team persistence
# ---------------------------------------------------------------------------

def save_team(models, ids, directory, extra=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for mid, m in zip(ids, models):
        name = f"member_{int(mid):03d}.eedm"
        checkpoint.save(m, directory / name)
        members.append({"id": int(mid), "file": name})
    manifest = {"members": members}
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory / "manifest.json"


def load_team(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    models = [checkpoint.load(directory / m["file"]) for m in manifest["members"]]
    return models, manifest


def config_dict(obj) -> dict:
    return asdict(obj)
