"""Dynamic inference ensemble: add members one by one and stop early.

At step t the running mean of the first t member predictions is compared with
the previous one. The per-step stop probability is

    q_t = sigmoid(a * KL(mean_t || mean_{t-1}) + b * max(mean_t) ** 2)

and the stop is the t maximising z_t = q_t * prod_{i<t} (1 - q_i). q_1 is 0
for teams of two or more members (no uncertainty is available yet).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netcore import forward

KL_SMOOTHING = 1e-12


@dataclass
class DieConfig:
    a: float = 5.0
    b: float = -1.0
    max_models: int | None = None
    mode: str = "online"

    def __post_init__(self):
        if self.mode not in ("online", "exhaustive"):
            raise ValueError(f"unknown DIE mode {self.mode!r}")


@dataclass
class DieTrace:
    predictions: list = field(default_factory=list)
    q: list = field(default_factory=list)
    z: list = field(default_factory=list)
    stop: int = 1
    evaluated: int = 1

    def to_dict(self, label=None) -> dict:
        pred = self.predictions[self.stop - 1]
        out = {"q": [float(v) for v in self.q], "z": [float(v) for v in self.z],
               "stop": int(self.stop), "prediction": [float(v) for v in pred]}
        if label is not None:
            out["correct"] = bool(int(np.argmax(pred)) == int(label))
        return out


def running_mean_prediction(predictions):
    """Incremental running means; element t-1 is the mean of the first t predictions."""
    preds = [np.asarray(p, dtype=float) for p in predictions]
    if not preds:
        raise ValueError("need at least one prediction")
    means = [preds[0].copy()]
    for t, p in enumerate(preds[1:], start=2):
        means.append(means[-1] + (p - means[-1]) / t)
    return means


def uncertainty(prev, curr) -> float:
    """KL(curr || prev) with additive smoothing inside the log."""
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise ValueError(f"shape mismatch {prev.shape} vs {curr.shape}")
    kl = np.sum(curr * (np.log(curr + KL_SMOOTHING) - np.log(prev + KL_SMOOTHING)))
    return max(float(kl), 0.0)


def confidence(curr) -> float:
    return float(np.max(curr)) ** 2


def stop_probability(unc: float, conf: float, cfg: DieConfig) -> float:
    x = cfg.a * unc + cfg.b * conf
    # numerically stable logistic
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def stop_likelihoods(q) -> list:
    """z_t = q_t * prod_{i<t} (1 - q_i)."""
    z, alive = [], 1.0
    for qt in q:
        z.append(qt * alive)
        alive *= 1.0 - qt
    return z


def optimal_stop(q) -> int:
    """1-based argmax of z_t; ties go to the smallest t."""
    q = list(q)
    if not q:
        raise ValueError("q is empty")
    if any(not 0 <= v <= 1 for v in q):
        raise ValueError("q entries must lie in [0, 1]")
    z = stop_likelihoods(q)
    best = 0
    for t in range(1, len(z)):
        if z[t] > z[best]:
            best = t
    return best + 1


def online_stop(z) -> int:
    """First t whose z_t is not exceeded by z_{t+1} (one-step lookahead)."""
    for t in range(len(z) - 1):
        if z[t] >= z[t + 1]:
            return t + 1
    return len(z)


def q_sequence(means, cfg: DieConfig) -> list:
    if len(means) == 1:
        return [1.0]
    q = [0.0]
    for t in range(1, len(means)):
        q.append(stop_probability(uncertainty(means[t - 1], means[t]), confidence(means[t]), cfg))
    return q


def die_from_predictions(predictions, cfg: DieConfig) -> DieTrace:
    """Run the stopping rule over already computed member predictions (one input)."""
    preds = list(predictions)
    if cfg.max_models is not None:
        if cfg.max_models > len(preds):
            raise ValueError("max_models exceeds the team size")
        preds = preds[:cfg.max_models]
    means = running_mean_prediction(preds)
    q = q_sequence(means, cfg)
    z = stop_likelihoods(q)
    if cfg.mode == "exhaustive":
        stop = optimal_stop(q)
        evaluated = len(preds)
    else:
        stop = online_stop(z)
        evaluated = min(stop + 1, len(preds))
    return DieTrace(means, q, z, stop, evaluated)


def die_predict(models, x, cfg: DieConfig):
    """Prediction and trace for a single input vector ``x``.

    Online mode evaluates members lazily and stops one step after the first
    local maximum of z; exhaustive mode evaluates every member.
    """
    models = list(models)
    if not models:
        raise ValueError("team is empty")
    if cfg.max_models is not None and cfg.max_models > len(models):
        raise ValueError("max_models exceeds the team size")
    limit = cfg.max_models or len(models)
    xb = np.asarray(x, dtype=float)[None]
    if cfg.mode == "exhaustive" or limit == 1:
        preds = [forward(m, xb)[0] for m in models[:limit]]
        trace = die_from_predictions(preds, DieConfig(cfg.a, cfg.b, None, cfg.mode))
        return trace.predictions[trace.stop - 1], trace
    preds = [forward(models[0], xb)[0]]
    means = [preds[0]]
    q = [0.0]
    for t in range(1, limit):
        preds.append(forward(models[t], xb)[0])
        means.append(means[-1] + (preds[-1] - means[-1]) / (t + 1))
        q.append(stop_probability(uncertainty(means[-2], means[-1]), confidence(means[-1]), cfg))
        z = stop_likelihoods(q)
        if z[-2] >= z[-1]:
            trace = DieTrace(means, q, z, t, t + 1)
            return means[t - 1], trace
    z = stop_likelihoods(q)
    return means[-1], DieTrace(means, q, z, limit, limit)


def die_evaluate(models, inputs, labels, cfg: DieConfig) -> dict:
    """Vectorised DIE over a dataset; returns accuracy, stop statistics and traces."""
    models = list(models)
    member_preds = np.stack([forward(m, inputs) for m in models], axis=1)  # (n, T, C)
    traces = [die_from_predictions(list(p), cfg) for p in member_preds]
    final = np.array([t.predictions[t.stop - 1] for t in traces])
    stops = np.array([t.stop for t in traces], dtype=float)
    team = cfg.max_models or len(models)
    mean_stop = float(stops.mean())
    return {
        "accuracy": float(np.mean(final.argmax(1) == labels)),
        "mean_stop": mean_stop,
        "mean_evaluated": float(np.mean([t.evaluated for t in traces])),
        "team_size": team,
        "speedup": team / mean_stop,
        "traces": traces,
    }


def save_traces(traces, labels, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.to_dict(int(y)) for t, y in zip(traces, labels)]))
    return path
