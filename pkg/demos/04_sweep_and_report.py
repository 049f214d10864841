"""A small label-efficiency sweep, resumed halfway, then turned into a report.

Uses a reduced cohort and grid so it finishes in a few minutes. The full
sweep is ``chronocon sweep`` with the default configuration.
"""
import sys
from pathlib import Path

from chronocon.analysis import SweepSpec, emit_report, gap_trend, run_sweep
from chronocon.synthetic import CohortConfig, generate
from chronocon.training import TrainConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_sweep")
cohort, _ = generate(CohortConfig(n_patients=100, seed=0))
spec = SweepSpec(n_labeled=(3, 10, 60), variants=("scratch", "chrono+dae"), repetitions=2,
                 out_dir=str(out / "cells"), bootstrap=200)
cfg = TrainConfig.desk()

first = run_sweep(spec, cohort, cfg, max_cells=4)  # pretend we were interrupted
print(f"after interruption: {len(first)} cells on disk")
rows = run_sweep(spec, cohort, cfg)  # picks up where it stopped
print(f"after resume: {len(rows)} cells")

grid, gaps, rho = gap_trend(rows)
for n, g in zip(grid, gaps):
    print(f"  {n:>3} labeled patients: progression ICC gap {g:+.3f}")
print(f"Spearman rho(gap, n_labeled) = {rho:.2f}")
print("report written to", emit_report(rows, None, out / "report"))
