"""Per-weight importance scores: NIS, ERM, ASE and BNSF.

Every metric returns an :class:`ImportanceScores` holding one non-negative
array per prunable layer, congruent with that layer's weight. Scores are
computed from the model exactly as given (effective weights); callers that
want masked weights to stay eligible should pass ``netcore.clear_masks(m)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .netcore import (BatchNorm, Batch, Conv2d, Model, backward,
                      cross_entropy, forward)

METRICS = ("NIS", "ERM", "ASE", "BNSF")


@dataclass
class ImportanceScores:
    metric: str
    layers: dict
    neurons: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, s in self.layers.items():
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise ValueError(f"{self.metric} scores for layer {i} must be finite and >= 0")

    def report(self, include_values=False) -> list:
        out = []
        for i, s in sorted(self.layers.items()):
            rec = {"layer": int(i), "metric": self.metric, "shape": list(s.shape),
                   "min": float(s.min()), "max": float(s.max()),
                   "mean": float(s.mean()), "std": float(s.std())}
            if include_values:
                rec["values"] = s.ravel().tolist()
            out.append(rec)
        return out


def save_report(scores, path, include_values=False) -> Path:
    """Write one or more score sets to a JSON list of per-layer records."""
    if isinstance(scores, ImportanceScores):
        scores = [scores]
    records = [rec for s in scores for rec in s.report(include_values)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(records, indent=2))
    return path


# ---------------------------------------------------------------------------
# NIS
# ---------------------------------------------------------------------------

def nis_recursive(weights, final_scores):
    """Neuron scores by backward recursion ``I_i = |W_{i+1}|^T I_{i+1}``.

    ``weights`` are the dense matrices (out, in) in forward order. Returns a
    list whose entry i scores the outputs of ``weights[i]``; the last entry is
    ``final_scores`` itself.
    """
    scores = [np.asarray(final_scores, dtype=float)]
    for w in reversed(weights[1:]):
        scores.append(np.abs(w).T @ scores[-1])
    return scores[::-1]


def nis_product(weights, final_scores):
    """Same neuron scores via the explicit matrix chain (no recursion)."""
    final = np.asarray(final_scores, dtype=float)
    out = []
    for i in range(len(weights)):
        chain = np.eye(final.shape[0])
        for w in reversed(weights[i + 1:]):
            chain = chain @ np.abs(w)
        out.append(chain.T @ final)
    return out


def _out_shapes(model: Model):
    shapes, shape = [], tuple(model.input_shape)
    for layer in model.layers:
        shape = layer.out_shape(shape)
        shapes.append(shape)
    return shapes


def _channel_matrix(layer):
    w = np.abs(layer.effective_weight())
    return w.sum(axis=(2, 3)) if isinstance(layer, Conv2d) else w


def score_nis(model: Model, final_scores=None) -> ImportanceScores:
    """Neuron importance propagated back from the output, spread onto weights.

    A weight connecting input unit k to output unit j scores ``|w_jk| * I_j``
    where ``I_j`` is the propagated importance of unit j. Conv layers work on
    channel matrices (|kernel| summed over space); a flatten after a conv sums
    the downstream importance over spatial positions.
    """
    idx = model.prunable_indices()
    final = np.ones(model.num_classes) if final_scores is None else np.asarray(final_scores, float)
    if final.shape != (model.num_classes,):
        raise ValueError(f"final_scores has shape {final.shape}, expected ({model.num_classes},)")
    shapes = _out_shapes(model)
    neurons, layers = {}, {}
    current = final
    for pos in range(len(idx) - 1, -1, -1):
        i = idx[pos]
        layer = model.layers[i]
        neurons[i] = current
        w = np.abs(layer.effective_weight())
        if isinstance(layer, Conv2d):
            layers[i] = w * current[:, None, None, None]
        else:
            layers[i] = w * current[:, None]
        upstream = _channel_matrix(layer).T @ current
        if pos > 0:
            prev_shape = shapes[idx[pos - 1]]
            if len(prev_shape) == 3 and upstream.shape[0] != prev_shape[0]:
                upstream = upstream.reshape(prev_shape[0], -1).sum(axis=1)
        current = upstream
    return ImportanceScores("NIS", layers, neurons)


# ---------------------------------------------------------------------------
# ERM
# ---------------------------------------------------------------------------

@dataclass
class ErmConfig:
    eta: float | dict = 1.0

    def eta_for(self, layer_index) -> float:
        eta = self.eta.get(layer_index, 1.0) if isinstance(self.eta, dict) else self.eta
        if eta <= 0:
            raise ValueError(f"eta must be > 0 (layer {layer_index})")
        return float(eta)


def score_erm(model: Model, cfg: ErmConfig | None = None) -> ImportanceScores:
    """Weight magnitude normalised by the layer maximum and scaled by eta."""
    cfg = cfg or ErmConfig()
    layers = {}
    for i in model.prunable_indices():
        w = np.abs(model.layers[i].effective_weight())
        top = w.max()
        if top == 0:
            raise ValueError(f"layer {i} has all-zero weights; ERM normalisation undefined")
        layers[i] = cfg.eta_for(i) * w / top
    return ImportanceScores("ERM", layers)


# ---------------------------------------------------------------------------
# ASE
# ---------------------------------------------------------------------------

def ase_from_hessian(hessian_diag, weights):
    """Second-order saliency 0.5 * |d2L/dw2| * w^2."""
    return 0.5 * np.abs(hessian_diag) * np.asarray(weights) ** 2


def second_difference(fn, w, step=1e-3):
    """Central second difference of scalar ``fn`` along each entry of ``w``."""
    w = np.array(w, dtype=float)
    out = np.empty_like(w)
    f0 = fn(w)
    flat, of = w.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = fn(w)
        flat[k] = orig - step
        fm = fn(w)
        flat[k] = orig
        of[k] = (fp - 2 * f0 + fm) / step ** 2
    return out


def fisher_diagonal(model: Model, batch: Batch) -> dict:
    """Mean of per-sample squared gradients for every prunable weight."""
    idx = model.prunable_indices()
    acc = {i: np.zeros_like(model.layers[i].params["weight"]) for i in idx}
    for s in range(len(batch)):
        grads, _ = backward(model, batch.subset([s]), mask_grads=False)
        for i in idx:
            acc[i] += grads[f"{i}.weight"] ** 2
    return {i: a / len(batch) for i, a in acc.items()}


def finite_diff_hessian_diagonal(model: Model, batch: Batch, step=1e-3) -> dict:
    out = {}
    for i in model.prunable_indices():
        layer = model.layers[i]
        stored = layer.params["weight"]

        def loss(w, layer=layer):
            layer.params["weight"] = w
            return cross_entropy(forward(model, batch.inputs), batch.labels)

        try:
            out[i] = second_difference(loss, stored, step)
        finally:
            layer.params["weight"] = stored
    return out


def score_ase(model: Model, batch: Batch, hessian_mode="fisher", step=1e-3) -> ImportanceScores:
    """Adversarial saliency; pass an adversarial batch to score under attack."""
    if len(batch) == 0:
        raise ValueError("ASE needs a non-empty batch")
    if hessian_mode == "fisher":
        hdiag = fisher_diagonal(model, batch)
    elif hessian_mode == "finite_diff":
        hdiag = finite_diff_hessian_diagonal(model.copy(), batch, step)
    else:
        raise ValueError(f"unknown hessian_mode {hessian_mode!r}")
    layers = {}
    for i, h in hdiag.items():
        if not np.all(np.isfinite(h)):
            raise ValueError(f"non-finite Hessian estimate in layer {i}")
        layers[i] = ase_from_hessian(h, model.layers[i].effective_weight())
    return ImportanceScores("ASE", layers)


# ---------------------------------------------------------------------------
# BNSF
# ---------------------------------------------------------------------------

def following_batchnorm(model: Model, i):
    nxt = model.layers[i + 1] if i + 1 < len(model.layers) else None
    return nxt if isinstance(nxt, BatchNorm) else None


def score_bnsf(model: Model, layers=None) -> ImportanceScores:
    """Batchnorm-folded weight magnitude ``|gamma_j * w_jk| / sigma_j``.

    sigma_j is the inference-mode scale sqrt(running_var + eps). Layers named
    in ``layers`` must be followed by a batchnorm. Unrequested layers without
    one (e.g. the classifier head) fall back to plain ``|w|``.
    """
    requested = set(model.prunable_indices() if layers is None else layers)
    out, channels = {}, {}
    for i in model.prunable_indices():
        layer = model.layers[i]
        bn = following_batchnorm(model, i)
        w = np.abs(layer.effective_weight())
        if bn is None:
            if layers is not None and i in requested:
                raise ValueError(f"layer {i} is not followed by a batchnorm layer")
            out[i] = w
            continue
        sigma = bn.std()
        if np.any(sigma <= 0):
            raise ValueError(f"batchnorm after layer {i} has non-positive sigma")
        ch = np.abs(bn.params["gamma"]) / sigma
        channels[i] = ch
        shape = (-1,) + (1,) * (w.ndim - 1)
        out[i] = w * ch.reshape(shape)
    if layers is not None:
        out = {i: s for i, s in out.items() if i in requested}
    return ImportanceScores("BNSF", out, channels)


def fold_batchnorm(layer, bn: BatchNorm):
    """Effective (weight, bias) of a dense/conv layer followed by inference-mode BN."""
    scale = bn.params["gamma"] / bn.std()
    shape = (-1,) + (1,) * (layer.params["weight"].ndim - 1)
    w = layer.effective_weight() * scale.reshape(shape)
    b = (layer.params["bias"] - bn.buffers["running_mean"]) * scale + bn.params["beta"]
    return w, b


# ---------------------------------------------------------------------------
# dispatch and comparison
# ---------------------------------------------------------------------------

def compute_scores(metric, model: Model, batch: Batch | None = None, *, erm=None,
                   nis_final=None, hessian_mode="fisher") -> ImportanceScores:
    metric = metric.upper()
    if metric == "NIS":
        return score_nis(model, nis_final)
    if metric == "ERM":
        return score_erm(model, erm)
    if metric == "ASE":
        if batch is None:
            raise ValueError("ASE needs a batch")
        return score_ase(model, batch, hessian_mode)
    if metric == "BNSF":
        return score_bnsf(model)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def top_set(scores: ImportanceScores, fraction=0.1) -> set:
    """Flat ``(layer, index)`` pairs of the top fraction within each layer."""
    out = set()
    for i, s in scores.layers.items():
        flat = s.ravel()
        k = max(1, int(round(fraction * flat.size)))
        order = np.lexsort((np.arange(flat.size), flat))
        out.update((i, int(j)) for j in order[-k:])
    return out


def rank_correlation(a: ImportanceScores, b: ImportanceScores) -> float:
    """Spearman correlation of two score sets over all shared weights."""
    keys = sorted(set(a.layers) & set(b.layers))
    x = np.concatenate([a.layers[k].ravel() for k in keys])
    y = np.concatenate([b.layers[k].ravel() for k in keys])
    return float(stats.spearmanr(x, y).statistic)
