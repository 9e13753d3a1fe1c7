"""Experiment configuration: a flat ``section.key = value`` text format.

Lines starting with ``#`` are comments. Values are parsed against the type of
the default (int, float, bool, str, or comma-separated lists). Unknown keys are
errors. Example::

    seed = 3
    data.source = synthetic-moons
    prune.target_sparsity = 0.8
    eed.omega = 10
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .advtrain import TrainConfig
from .attacks import AttackConfig
from .die import DieConfig
from .ensemble import EedLossConfig, PoolSpec
from .importance import METRICS
from .pruning import PruneConfig

SOURCES = ("synthetic-blobs", "synthetic-moons", "idx-files")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic-moons"
    n: int = 2000
    noise: float = 0.15
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0
    seed: int = -1  # -1 reuses the global seed


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    conv: list = field(default_factory=list)
    batchnorm: bool = True
    base_checkpoint: str = ""


@dataclass
class StageSection:
    pretrain: int = 20
    prune: int = 5
    finetune: int = 10
    ensemble: int = 20


@dataclass
class TrainSection:
    batch_size: int = 128
    lr: float = 0.05
    lr_drop: float = 0.75
    lr_factor: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 0.0
    ensemble_lr: float = 0.01


@dataclass
class AttackSection:
    """Training-time PGD; evaluation reuses ``epsilon``."""
    epsilon: float = 0.05
    step_size: float = 0.0125
    steps: int = 10
    random_start: bool = True


@dataclass
class EvalSection:
    attacks: list = field(default_factory=lambda: ["fgsm", "pgd"])
    pgd_steps: int = 20
    pgd_step_size: float = 0.0125
    random_start: bool = False
    failure_mode: str = "per_model"
    combiner: str = "average"


@dataclass
class PoolSection:
    num_subsets: int = 4
    shared_fraction: float = 0.25
    metrics: list = field(default_factory=lambda: list(METRICS))


@dataclass
class PruneSection:
    target_sparsity: float = 0.8
    compression: float = 0.95
    a_min: float = 0.01
    phi: float = 0.01
    rate_lr: float = 5.0
    margin: float = 0.02
    mode: str = "learned"


@dataclass
class EedSection:
    alpha: float = 0.5
    beta: float = 0.1
    omega: float = 10.0
    gamma: float = 4.0
    lambda1: float = 0.7
    lambda2: float = 0.25
    rd_threshold: float = 0.7
    log_clamp_eps: float = 1e-7
    misclass_form: str = "literal"
    normalize: bool = True
    max_enumeration: int = 2 ** 20
    enforce_budget: bool = True
    fill_budget: bool = True


@dataclass
class DieSection:
    mode: str = "online"
    a: float = 5.0
    b: float = -1.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    stages: StageSection = field(default_factory=StageSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    pool: PoolSection = field(default_factory=PoolSection)
    prune: PruneSection = field(default_factory=PruneSection)
    eed: EedSection = field(default_factory=EedSection)
    die: DieSection = field(default_factory=DieSection)

    # -- derived module configs ---------------------------------------------

    def data_seed(self) -> int:
        return self.seed if self.data.seed < 0 else self.data.seed

    def train_attack(self) -> AttackConfig:
        a = self.attack
        return AttackConfig(a.epsilon, a.step_size, a.steps, a.random_start)

    def eval_attack(self, kind: str) -> AttackConfig:
        from .attacks import fgsm_config
        if kind == "fgsm":
            return fgsm_config(self.attack.epsilon)
        if kind == "pgd":
            e = self.eval
            return AttackConfig(self.attack.epsilon, e.pgd_step_size, e.pgd_steps, e.random_start)
        raise ConfigError(f"unknown attack {kind!r}")

    def train_config(self, epochs: int, seed_offset: int = 0, lr: float | None = None) -> TrainConfig:
        t = self.train
        base = t.lr if lr is None else lr
        schedule = [(0, base)]
        drop = int(t.lr_drop * epochs)
        if 0 < drop < epochs and t.lr_factor != 1:
            schedule.append((drop, base * t.lr_factor))
        return TrainConfig(epochs=epochs, batch_size=t.batch_size, lr_schedule=schedule,
                           attack=self.train_attack(), seed=self.seed + seed_offset,
                           momentum=t.momentum, weight_decay=t.weight_decay)

    def pool_spec(self) -> PoolSpec:
        p = self.pool
        return PoolSpec(p.num_subsets, p.shared_fraction, tuple(p.metrics), self.seed)

    def prune_config(self) -> PruneConfig:
        p = self.prune
        return PruneConfig(p.target_sparsity, p.compression, p.a_min, p.phi,
                           self.stages.prune, p.rate_lr, p.margin, p.mode,
                           self.train_config(self.stages.finetune, seed_offset=1))

    def eed_config(self) -> EedLossConfig:
        e = self.eed
        return EedLossConfig(e.alpha, e.beta, e.omega, e.gamma, e.lambda1, e.lambda2,
                             e.rd_threshold, e.log_clamp_eps, misclass_form=e.misclass_form,
                             normalize=e.normalize)

    def die_config(self) -> DieConfig:
        mode = self.die.mode if self.die.mode != "off" else "online"
        return DieConfig(self.die.a, self.die.b, None, mode)

    def ensemble_budget(self) -> int | None:
        """Largest team that still meets the global sparsity target."""
        if not self.eed.enforce_budget:
            return None
        keep_global = 1.0 - self.prune.target_sparsity
        keep_member = 1.0 - self.prune.compression
        return max(int(keep_global / keep_member + 1e-9), 2)

    def team_size_bounds(self, pool_size: int) -> tuple:
        """(min_size, max_size) handed to team selection."""
        budget = self.ensemble_budget()
        if budget is None:
            return None, None
        budget = min(budget, pool_size)
        return (budget if self.eed.fill_budget else None), budget

    # -- validation ---------------------------------------------------------

    def validate(self) -> "ExperimentConfig":
        """Check ranges and referenced files, building every module config once."""
        for f in fields(self.stages):
            if getattr(self.stages, f.name) < 0:
                raise ConfigError(f"stages.{f.name} must be >= 0")
        if self.data.source not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if self.data.source == "idx-files":
            for key in ("images", "labels"):
                if not getattr(self.data, key):
                    raise ConfigError(f"data.{key} is required for idx-files")
            for key in ("images", "labels", "test_images", "test_labels"):
                p = getattr(self.data, key)
                if p and not Path(p).is_file():
                    raise ConfigError(f"data.{key}: file not found: {p}")
        elif self.data.n < 2:
            raise ConfigError("data.n must be >= 2")
        if self.model.base_checkpoint and not Path(self.model.base_checkpoint).is_file():
            raise ConfigError(f"model.base_checkpoint: file not found: {self.model.base_checkpoint}")
        if not 0 <= self.data.val_fraction + self.data.test_fraction < 1:
            raise ConfigError("validation and test fractions must sum to less than 1")
        if self.die.mode not in ("online", "exhaustive", "off"):
            raise ConfigError("die.mode must be online, exhaustive or off")
        for a in self.eval.attacks:
            if a not in ("fgsm", "pgd"):
                raise ConfigError(f"eval.attacks: unknown attack {a!r}")
        if self.eval.combiner not in ("average", "max"):
            raise ConfigError("eval.combiner must be average or max")
        try:
            self.train_attack()
            self.prune_config()
            self.pool_spec()
            self.eed_config()
            self.train_config(self.stages.ensemble, lr=self.train.ensemble_lr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int) or key in ("model.hidden", "model.conv"):
                return [int(s) for s in items]
            return items
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def set_key(cfg: ExperimentConfig, key: str, raw: str) -> None:
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise ConfigError(f"unknown config section {part!r} in {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    if name not in {f.name for f in fields(target)} or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _parse_value(raw, getattr(target, name), key))


def parse_config(text: str, cfg: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = cfg or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` ({key: raw string})."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_config(p.read_text(), cfg)
    for key, value in (overrides or {}).items():
        set_key(cfg, key, str(value))
    return cfg


def items(cfg) -> list:
    """Flattened ``(key, value)`` pairs in declaration order."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.extend((f"{f.name}.{k}", sub) for k, sub in items(v))
        else:
            out.append((f.name, v))
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in items(cfg))
