"""Run the whole pipeline on a small two-moons problem and print the metrics.

    python demos/quickstart.py [output-dir]

Takes about ten seconds. The configuration is the desk one with fewer
epochs, so the numbers are rougher than what the acceptance suite sees.
"""
import sys
from pathlib import Path

from eedlab.config import load_config
from eedlab.pipeline import run_pipeline
from eedlab.report import to_csv

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk_moons.cfg"

out = sys.argv[1] if len(sys.argv) > 1 else "runs/quickstart"
cfg = load_config(DESK, {"out": out, "stages.pretrain": "8", "stages.prune": "2",
                         "stages.finetune": "3", "stages.ensemble": "5"})
report = run_pipeline(cfg)

print(f"team {report.team}  rd={report.rd:.3f}  sparsity={report.global_sparsity:.3f}\n")
print(to_csv(report))
print(f"artifacts written to {cfg.out}/")
