"""Mask construction, compression control and adversarial pruning.

Per-layer keep rates are parameterised as ``a = (1 - a_min) * sigmoid(r) + a_min``
so no layer can drop below the floor ``a_min``. A layer keeps its top
``round(a * n)`` weights by score (round half up; on ties the lower flat index
is pruned first).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import importance
from .advtrain import TrainConfig, adversarial_train, minibatches
from .attacks import pgd_attack
from .netcore import (SGD, Batch, Model, apply_masks, backprop, ce_grad_logits, clear_masks,
                      cross_entropy, forward_trace, update_running_stats)


@dataclass
class PruneConfig:
    target_sparsity: float = 0.8
    compression: float = 0.95
    a_min: float = 0.01
    phi: float = 0.01
    epochs: int = 5
    rate_lr: float = 5.0
    margin: float = 0.02
    mode: str = "learned"
    fine_tune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))

    def __post_init__(self):
        if not 0 <= self.target_sparsity < 1:
            raise ValueError("target_sparsity must lie in [0, 1)")
        if not 0 <= self.compression < 1:
            raise ValueError("compression must lie in [0, 1)")
        if self.compression < self.target_sparsity:
            raise ValueError("sub-model compression must be at least the target sparsity")
        if not 0 < self.a_min <= 1:
            raise ValueError("a_min must lie in (0, 1]")
        if self.mode not in ("learned", "uniform"):
            raise ValueError(f"unknown pruning mode {self.mode!r}")

    @property
    def keep_target(self) -> float:
        return 1.0 - self.compression


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def keep_rate(r, a_min):
    """Sigmoid-bounded keep rate in [a_min, 1]."""
    return (1.0 - a_min) * sigmoid(np.asarray(r, dtype=float)) + a_min


def rate_logit(a, a_min, clip=30.0):
    """Inverse of :func:`keep_rate`, clipped to a finite range."""
    if a_min >= 1.0:
        return 0.0
    u = (np.asarray(a, dtype=float) - a_min) / (1.0 - a_min)
    u = np.clip(u, sigmoid(-clip), sigmoid(clip))
    return np.log(u) - np.log1p(-u)


@dataclass
class LayerRates:
    r: dict
    a_min: float

    @property
    def a(self) -> dict:
        return {i: float(keep_rate(v, self.a_min)) for i, v in self.r.items()}

    @classmethod
    def uniform(cls, layers, keep, a_min) -> "LayerRates":
        return cls({i: float(rate_logit(keep, a_min)) for i in layers}, a_min)


def kept_count(a, n) -> int:
    """round(a * n), halves rounded up."""
    return int(math.floor(a * n + 0.5 + 1e-9))


def make_mask(scores, rates) -> dict:
    """Top-``round(a*n)`` masks per layer.

    ``scores`` is an ImportanceScores or a ``{layer: array}`` dict; ``rates`` is a
    LayerRates or a ``{layer: keep_rate}`` dict.
    """
    layers = scores.layers if isinstance(scores, importance.ImportanceScores) else scores
    keep = rates.a if isinstance(rates, LayerRates) else rates
    if set(layers) != set(keep):
        raise ValueError("scores and rates must cover the same layers")
    masks = {}
    for i, s in layers.items():
        flat = np.asarray(s, dtype=float).ravel()
        n = flat.size
        k = kept_count(keep[i], n)
        if k == 0:
            raise ValueError(f"keep rate {keep[i]} would empty layer {i} ({n} weights)")
        k = min(k, n)
        # ascending by score, ties by ascending index: the first n-k are pruned
        order = np.lexsort((np.arange(n), flat))
        m = np.zeros(n)
        m[order[n - k:]] = 1.0
        masks[i] = m.reshape(np.shape(s))
    return masks


def global_sparsity(model: Model) -> float:
    idx = model.prunable_indices()
    total = sum(model.layers[i].mask.size for i in idx)
    kept = sum(float(model.layers[i].mask.sum()) for i in idx)
    return 1.0 - kept / total


def kept_fraction(model: Model) -> float:
    return 1.0 - global_sparsity(model)


def compression_loss(model: Model, target_keep: float) -> float:
    """max(kept / (a_t * total) - 1, 0) over prunable weights."""
    if not 0 < target_keep <= 1:
        raise ValueError(f"target keep rate must lie in (0, 1], got {target_keep}")
    return max(kept_fraction(model) / target_keep - 1.0, 0.0)


def project_rates(r: dict, sizes: dict, target_keep: float, a_min: float) -> dict:
    """Shift all logits by one common offset so that sum(a_l n_l) = a_t * N.

    Every layer is counted as keeping at least one weight.

    The shift is found by bisection; it keeps the learned ordering of layer
    rates while meeting the budget.
    """
    total = sum(sizes.values())
    budget = target_keep * total

    def used(tau):
        return sum(max(float(keep_rate(r[i] + tau, a_min)) * sizes[i], 1.0) for i in r)

    lo, hi = -60.0, 60.0
    if used(lo) >= budget:
        return {i: v + lo for i, v in r.items()}
    if used(hi) <= budget:
        return {i: v + hi for i, v in r.items()}
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if used(mid) > budget:
            hi = mid
        else:
            lo = mid
    return {i: v + lo for i, v in r.items()}


def min_keep_fraction(model: Model, a_min: float) -> float:
    idx = model.prunable_indices()
    sizes = [model.layers[i].mask.size for i in idx]
    return sum(max(kept_count(a_min, n), 1) for n in sizes) / sum(sizes)


def _layer_scores(metric, model, batch, cfg: PruneConfig, seed):
    view = clear_masks(model)
    adv = None
    if metric.upper() == "ASE":
        x_adv = pgd_attack(view, batch, cfg.fine_tune.attack, seed=seed)
        adv = Batch(x_adv, batch.labels)
    return importance.compute_scores(metric, view, adv)


def _rate_gradient(model, grads, scores, keep, cfg: PruneConfig, total, target_keep):
    """Straight-through estimate of d(robust loss + phi * L_p)/d(a_l), per weight.

    The mask gradient g*w passes through the threshold unchanged; raising a_l
    revives the best-scored pruned weights, so dL/da_l is n_l times the mean
    mask gradient over that margin band. Both terms are divided by n_l, the
    budget cost of a_l, so layers compete on loss change per kept weight.
    """
    excess = sum(keep[i] * scores[i].size for i in keep) / (target_keep * total) - 1.0
    out = {}
    for i, a in keep.items():
        layer = model.layers[i]
        n = layer.mask.size
        w = layer.params["weight"].ravel()
        g = grads[f"{i}.weight"].ravel()
        s = scores[i].ravel()
        pruned = np.flatnonzero(layer.mask.ravel() == 0)
        if pruned.size:
            width = max(1, int(round(cfg.margin * n)))
            band = pruned[np.lexsort((pruned, s[pruned]))][-width:]
            d_loss = float(np.mean(g[band] * w[band]))
        else:
            d_loss = 0.0
        d_lp = 1.0 / (target_keep * total) if excess > 0 else 0.0
        out[i] = d_loss + cfg.phi * d_lp
    return out


def adversarial_prune(model: Model, metric: str, data: Batch, cfg: PruneConfig, seed=0):
    """Prune ``model`` to ``1 - compression`` kept weights under one metric.

    Each pruning epoch refreshes the metric scores, steps the layer rates and
    the unmasked weights on PGD batches, and rebuilds masks; afterwards the
    masked model is adversarially fine-tuned. Returns ``(model, report)``.
    """
    idx = model.prunable_indices()
    sizes = {i: model.layers[i].mask.size for i in idx}
    total = sum(sizes.values())
    target = cfg.keep_target
    report = {"metric": metric, "compression": cfg.compression, "a_min": cfg.a_min}
    if cfg.compression == 0:
        out = apply_masks(model, {i: np.ones_like(model.layers[i].mask) for i in idx})
        report.update(_summary(out, {i: 1.0 for i in idx}))
        return out, report
    floor = min_keep_fraction(model, cfg.a_min)
    if cfg.a_min > target or floor > target + 0.005:
        raise ValueError(
            f"infeasible pruning: a_min={cfg.a_min} forces a kept fraction of at least "
            f"{max(floor, cfg.a_min):.4f} but the target is {target:.4f}")

    rates = LayerRates.uniform(idx, target, cfg.a_min)
    if cfg.mode == "learned":
        rates.r = project_rates(rates.r, sizes, target, cfg.a_min)
    else:
        rates = None
    if rates is not None:
        # a learned rate may dip below one weight in a small layer; keep at least one
        def keep():
            return {i: max(a, 1.0 / sizes[i]) for i, a in rates.a.items()}
    else:
        def keep():
            return {i: target for i in idx}

    model = model.copy()
    ft = cfg.fine_tune
    opt = SGD(ft.momentum, ft.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E]))
    history = []
    for epoch in range(cfg.epochs if rates is not None else 0):
        scores = _layer_scores(metric, model, data, cfg, seed + epoch).layers
        model = apply_masks(model, make_mask(scores, keep()))
        losses = []
        for idx_b in minibatches(len(data), ft.batch_size, rng):
            mb = data.subset(idx_b)
            x_adv = pgd_attack(model, mb, ft.attack, seed=int(rng.integers(2**31)))
            trace = forward_trace(model, x_adv, training=True)
            probs = trace.probs
            losses.append(float(cross_entropy(probs, mb.labels)))
            grads, _ = backprop(model, trace, ce_grad_logits(probs, mb.labels), mask_grads=False)
            d_a = _rate_gradient(model, grads, scores, keep(), cfg, total, target)
            for i in idx:
                a = float(keep_rate(rates.r[i], cfg.a_min))
                da_dr = (a - cfg.a_min) * (1.0 - (a - cfg.a_min) / (1.0 - cfg.a_min))
                rates.r[i] -= cfg.rate_lr * d_a[i] * da_dr
            rates.r = project_rates(rates.r, sizes, target, cfg.a_min)
            masked = {k: (v * model.layers[int(k.split(".")[0])].mask
                          if k.endswith("weight") else v) for k, v in grads.items()}
            update_running_stats(model, trace)
            model = opt.step(model, masked, ft.lr_at(0))
        history.append({"epoch": epoch + 1, "adv_loss": float(np.mean(losses)),
                        "keep": {str(i): v for i, v in keep().items()}})

    scores = _layer_scores(metric, model, data, cfg, seed + cfg.epochs).layers
    model = apply_masks(model, make_mask(scores, keep()))
    model, ft_history = adversarial_train(model, data, ft)
    report.update(_summary(model, keep()))
    report["prune_history"] = history
    report["finetune_history"] = ft_history
    # rounding can cost up to one weight per layer
    if kept_fraction(model) > target + max(0.005, len(idx) / total):
        raise AssertionError(f"kept fraction {kept_fraction(model):.4f} exceeds target {target}")
    return model, report


def _summary(model: Model, keep: dict) -> dict:
    layers = []
    for i in model.prunable_indices():
        m = model.layers[i].mask
        layers.append({"layer": i, "a": float(keep[i]), "n": int(m.size), "kept": int(m.sum())})
    return {"layers": layers, "global_sparsity": global_sparsity(model)}


def save_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, default=_jsonable))
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialise {type(obj)}")
