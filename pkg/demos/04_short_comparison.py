"""
Supervised versus CSD+ISD in a few minutes
==========================================

A scaled-down version of the benchmark comparison: fewer images, fewer
iterations, one seed. The full three-seed comparison is
``isdlab sweep --data <dir> --out <dir>``.
"""
import sys
from pathlib import Path

from isdlab.data import SyntheticSpec, write_dataset
from isdlab.experiments import run_sweep, write_report
from isdlab.trainer import TrainConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "short"
data = out / "data"
if not (data / "manifest.json").exists():
    write_dataset(data, SyntheticSpec(seed=0), n_labeled=100, n_unlabeled=400, n_eval=100, force=True)

base = TrainConfig(max_iterations=400, ramp_up=100, lr_steps=(300,), eval_every=200)
runs = run_sweep(data, out / "runs", base, [{"mode": "supervised"}, {"mode": "csd+isd"}], skip_existing=True)
print(write_report(runs, out / "report"))
