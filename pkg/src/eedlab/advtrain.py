"""Madry-style adversarial training on worst-case PGD batches."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, pgd_attack
from .netcore import (SGD, Batch, Model, backprop, ce_grad_logits, cross_entropy, forward,
                      forward_trace, update_running_stats)


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr_schedule: list = field(default_factory=lambda: [(0, 0.05)])
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    track: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.lr_schedule = [(int(b), float(lr)) for b, lr in self.lr_schedule]
        bounds = [b for b, _ in self.lr_schedule]
        if not bounds or bounds[0] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError("lr_schedule boundaries must be strictly increasing")
        if any(lr < 0 for _, lr in self.lr_schedule):
            raise ValueError("learning rates must be >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for bound, value in self.lr_schedule:
            if epoch >= bound:
                lr = value
        return lr


def minibatches(n, batch_size, rng):
    """Shuffled index chunks; a trailing singleton is folded into the previous chunk."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def evaluate(model: Model, batch: Batch, attack: AttackConfig, seed=0) -> dict:
    """Clean/adversarial loss and accuracy of a single model."""
    probs = forward(model, batch.inputs)
    x_adv = pgd_attack(model, batch, attack, seed=seed)
    adv_probs = forward(model, x_adv)
    return {
        "clean_loss": float(cross_entropy(probs, batch.labels)),
        "adv_loss": float(cross_entropy(adv_probs, batch.labels)),
        "clean_acc": float(np.mean(probs.argmax(1) == batch.labels)),
        "robust_acc": float(np.mean(adv_probs.argmax(1) == batch.labels)),
    }


def adversarial_train(model: Model, dataset: Batch, cfg: TrainConfig, eval_batch=None):
    """Train on PGD examples only; returns ``(model, history)``.

    History holds one record per epoch with clean/adversarial loss and
    accuracy measured on ``eval_batch`` (the training set when omitted).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = model.copy()
    history = []
    if cfg.epochs == 0:
        return model, history
    eval_batch = dataset if eval_batch is None else eval_batch
    opt = SGD(cfg.momentum, cfg.weight_decay)
    seeds = np.random.SeedSequence([cfg.seed, 0xA7])
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(seeds.spawn(1)[0])
        lr = cfg.lr_at(epoch)
        for b, idx in enumerate(minibatches(len(dataset), cfg.batch_size, rng)):
            mb = dataset.subset(idx)
            x_adv = pgd_attack(model, mb, cfg.attack, seed=int(rng.integers(2**31)))
            trace = forward_trace(model, x_adv, training=True)
            probs = trace.probs
            loss = cross_entropy(probs, mb.labels)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {b}",
                                         epoch=epoch, batch=b)
            grads, _ = backprop(model, trace, ce_grad_logits(probs, mb.labels))
            update_running_stats(model, trace)
            model = opt.step(model, grads, lr)
        if cfg.track:
            rec = {"epoch": epoch + 1}
            rec.update(evaluate(model, eval_batch, cfg.attack, seed=cfg.seed))
            history.append(rec)
    return model, history


def save_history(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ("epoch", "clean_loss", "adv_loss", "clean_acc", "robust_acc")
    path.write_text(json.dumps([{k: rec[k] for k in keys} for rec in history], indent=2))
    return path
