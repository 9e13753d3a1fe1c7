"""Metrics report and its JSON / CSV serialisations."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SIG_DIGITS = 6


def sig(x):
    """Round to 6 significant digits; non-floats pass through."""
    if isinstance(x, bool) or x is None or isinstance(x, (int, str)):
        return x
    x = float(x)
    if not math.isfinite(x) or x == 0:
        return x
    return float(f"{x:.{SIG_DIGITS - 1}e}")


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_tree(v) for v in obj]
    return sig(obj)


@dataclass
class EntityMetrics:
    """Accuracy of one model or ensemble; ``robust`` maps attack name to accuracy."""
    name: str
    clean: float
    robust: dict = field(default_factory=dict)
    sparsity: float = 0.0
    kind: str = "model"

    def __post_init__(self):
        for v in [self.clean, *self.robust.values()]:
            if not 0 <= v <= 1:
                raise ValueError(f"{self.name}: accuracy {v} outside [0, 1]")
        if not 0 <= self.sparsity <= 1:
            raise ValueError(f"{self.name}: sparsity {self.sparsity} outside [0, 1]")


@dataclass
class MetricsReport:
    attacks: list
    entities: list
    team: list = field(default_factory=list)
    rd: float | None = None
    global_sparsity: float = 0.0
    die: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)

    def entity(self, name) -> EntityMetrics:
        for e in self.entities:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_dict(self, timings=False) -> dict:
        out = {
            "attacks": list(self.attacks),
            "entities": [{"name": e.name, "kind": e.kind, "clean": e.clean,
                          "robust": {a: e.robust[a] for a in self.attacks},
                          "sparsity": e.sparsity} for e in self.entities],
            "team": list(self.team),
            "rd": self.rd,
            "global_sparsity": self.global_sparsity,
            "die": dict(self.die),
        }
        if timings:
            out["stage_seconds"] = dict(self.stage_seconds)
        return _round_tree(out)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        ents = [EntityMetrics(e["name"], e["clean"], dict(e["robust"]), e["sparsity"], e["kind"])
                for e in d["entities"]]
        return cls(list(d["attacks"]), ents, list(d.get("team", [])), d.get("rd"),
                   d.get("global_sparsity", 0.0), dict(d.get("die", {})),
                   dict(d.get("stage_seconds", {})))

    def csv_rows(self) -> list:
        rows = []
        for e in self.entities:
            rows.append([e.name, e.kind, "clean", sig(e.clean), sig(e.sparsity)])
            for a in self.attacks:
                rows.append([e.name, e.kind, a, sig(e.robust[a]), sig(e.sparsity)])
        return rows


CSV_HEADER = ["entity", "kind", "attack", "accuracy", "sparsity"]


def to_json(report: MetricsReport) -> str:
    """Canonical JSON (sorted keys, timings excluded) so equal runs are byte-identical."""
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(report.csv_rows())
    return buf.getvalue()


def emit_report(report: MetricsReport, out_dir, formats=("json", "csv")) -> list:
    """Write ``metrics.json`` / ``metrics.csv`` (and ``timings.json``) into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for fmt in formats:
            if fmt == "json":
                p = out_dir / "metrics.json"
                p.write_text(to_json(report))
            elif fmt == "csv":
                p = out_dir / "metrics.csv"
                p.write_text(to_csv(report))
            else:
                raise ValueError(f"unknown report format {fmt!r}")
            written.append(p)
        if report.stage_seconds:
            p = out_dir / "timings.json"
            p.write_text(json.dumps(_round_tree(report.stage_seconds), indent=2) + "\n")
            written.append(p)
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    return written


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))
