"""L-infinity FGSM / PGD attacks and per-model failure matrices."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .netcore import (Batch, Model, backprop, ce_grad_logits, cross_entropy, forward,
                      forward_trace, softmax_backward)


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    norm: str = "l_inf"
    box: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.norm != "l_inf":
            raise ValueError(f"only l_inf attacks are supported, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")


def _as_members(target):
    if isinstance(target, Model):
        return [target]
    members = list(target)
    if not members:
        raise ValueError("attack target has no models")
    return members


def loss_and_input_grad(target, x, y):
    """Per-sample CE loss and dL/dx for a model or an average-combined team.

    For a team the loss is the cross-entropy of the averaged probabilities.
    Gradients are of the summed loss, so each row is that sample's own gradient.
    """
    members = _as_members(target)
    if len(members) == 1:
        trace = forward_trace(members[0], x)
        probs = trace.probs
        g = ce_grad_logits(probs, y) * len(y)
        _, dx = backprop(members[0], trace, g)
        return cross_entropy(probs, y, reduce=False), dx
    traces = [forward_trace(m, x) for m in members]
    probs = [t.probs for t in traces]
    avg = sum(probs) / len(members)
    rows = np.arange(len(y))
    py = np.maximum(avg[rows, y], 1e-300)
    dx = np.zeros_like(x)
    for m, t, p in zip(members, traces, probs):
        gp = np.zeros_like(p)
        gp[rows, y] = -1.0 / (len(members) * py)
        _, d = backprop(m, t, softmax_backward(p, gp))
        dx += d
    return -np.log(py), dx


def pgd_attack(model, batch: Batch, cfg: AttackConfig, seed=0, init=None, keep_best=False):
    """Projected sign-gradient ascent inside the epsilon ball and the data box.

    ``model`` is a Model or a sequence of models (attacked as their average).
    ``init`` warm-starts from given points (projected into the ball first).
    With ``keep_best`` each sample returns its highest-loss iterate, the
    starting point included.
    """
    x = batch.inputs
    y = batch.labels
    eps = float(cfg.epsilon)
    if eps < 0:
        raise ValueError(f"epsilon must be >= 0, got {eps}")
    lo_box, hi_box = cfg.box
    lo = np.maximum(x - eps, lo_box)
    hi = np.minimum(x + eps, hi_box)
    if init is not None:
        x_adv = np.clip(np.asarray(init, dtype=np.float64), lo, hi)
    elif cfg.random_start and eps > 0:
        rng = np.random.default_rng(seed)
        x_adv = np.clip(x + rng.uniform(-eps, eps, size=x.shape), lo, hi)
    else:
        x_adv = x.copy()
    best = x_adv.copy() if keep_best else None
    best_loss = None
    for _ in range(cfg.steps):
        loss, g = loss_and_input_grad(model, x_adv, y)
        if keep_best:
            if best_loss is None:
                best_loss = loss
            else:
                better = loss > best_loss
                best[better] = x_adv[better]
                best_loss = np.where(better, loss, best_loss)
        x_adv = np.clip(x_adv + cfg.step_size * np.sign(g), lo, hi)
    if keep_best:
        loss, _ = loss_and_input_grad(model, x_adv, y)
        better = loss > best_loss
        best[better] = x_adv[better]
        return best
    return x_adv


def fgsm_attack(model, batch: Batch, epsilon: float, box=(0.0, 1.0)):
    cfg = AttackConfig(epsilon=epsilon, step_size=epsilon if epsilon > 0 else 1.0,
                       steps=1, random_start=False, box=box)
    return pgd_attack(model, batch, cfg)


def fgsm_config(epsilon, box=(0.0, 1.0)) -> AttackConfig:
    """The PGD configuration that FGSM is defined as."""
    return AttackConfig(epsilon=epsilon, step_size=epsilon if epsilon > 0 else 1.0,
                        steps=1, random_start=False, box=box)


def adversarial_accuracy(model, batch: Batch, cfg: AttackConfig | None, seed=0) -> float:
    """Accuracy on attacked inputs (clean accuracy when ``cfg`` is None)."""
    members = _as_members(model)
    x = batch.inputs if cfg is None else pgd_attack(model, batch, cfg, seed=seed)
    probs = sum(forward(m, x) for m in members) / len(members)
    return float(np.mean(np.argmax(probs, axis=1) == batch.labels))


@dataclass
class FailureMatrix:
    """Binary (models x samples) matrix; 1 marks a defence failure."""

    matrix: np.ndarray
    model_ids: list = field(default_factory=list)
    sample_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.int8)
        if self.matrix.ndim != 2:
            raise ValueError("failure matrix must be 2-D")
        if not self.model_ids:
            self.model_ids = list(range(self.matrix.shape[0]))
        if not self.sample_ids:
            self.sample_ids = list(range(self.matrix.shape[1]))
        if not np.isin(self.matrix, (0, 1)).all():
            raise ValueError("failure matrix entries must be 0 or 1")

    @property
    def shape(self):
        return self.matrix.shape

    def failure_rates(self) -> np.ndarray:
        return self.matrix.mean(axis=1)

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model"] + [str(s) for s in self.sample_ids])
            for mid, row in zip(self.model_ids, self.matrix):
                w.writerow([str(mid)] + [str(int(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "FailureMatrix":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        sample_ids = [_maybe_int(s) for s in header[1:]]
        model_ids = [_maybe_int(r[0]) for r in body]
        mat = np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int8)
        return cls(mat.reshape(len(body), len(sample_ids)), model_ids, sample_ids)


def _maybe_int(s):
    try:
        return int(s)
    except ValueError:
        return s


def build_failure_matrix(models: Sequence[Model], eval_batch: Batch, cfg: AttackConfig,
                         seed=0, mode="per_model", model_ids=None) -> FailureMatrix:
    """Failure events for each model on the adversarial version of each sample.

    ``mode="per_model"`` attacks every model against itself. ``mode="ensemble"``
    is a transfer variant: one attack on the average of all models, and each
    model is scored on those shared adversarial inputs.
    """
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    if len(eval_batch) == 0:
        raise ValueError("evaluation batch is empty")
    rows = []
    if mode == "per_model":
        for m in models:
            x_adv = pgd_attack(m, eval_batch, cfg, seed=seed)
            rows.append(np.argmax(forward(m, x_adv), axis=1) != eval_batch.labels)
    elif mode == "ensemble":
        x_adv = pgd_attack(models, eval_batch, cfg, seed=seed)
        for m in models:
            rows.append(np.argmax(forward(m, x_adv), axis=1) != eval_batch.labels)
    else:
        raise ValueError(f"unknown failure-matrix mode {mode!r}")
    return FailureMatrix(np.array(rows, dtype=np.int8),
                         list(model_ids) if model_ids is not None else [],
                         list(range(len(eval_batch))))
