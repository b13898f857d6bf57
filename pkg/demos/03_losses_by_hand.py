"""
Consistency losses on hand-made predictions
===========================================

The divergences and the unsupervised weight schedule, evaluated on
numbers small enough to check with a pencil.
"""
import math
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from isdlab.detector import PredictionGrid
from isdlab.ssl_losses import js_divergence, kl_divergence, type1_loss, type2_loss, weight_schedule

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

p = torch.tensor([0.5, 0.5], dtype=torch.float64)
q = torch.tensor([0.25, 0.75], dtype=torch.float64)
print("KL(p||q)       =", kl_divergence(p, q).item(), "  by hand:", 0.5 * math.log(2) + 0.5 * math.log(2 / 3))
print("JS, disjoint   =", js_divergence(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64)).item(), " ln 2 =", math.log(2))

# one location: A says class 1, B says class 2, the mixed image says half/half
grid = lambda rows: PredictionGrid.from_probs(torch.tensor(rows, dtype=torch.float64))
g_a, g_b, g_m = grid([[0, 1, 0]]), grid([[0, 0, 1]]), grid([[0, 0.5, 0.5]])
mask = torch.tensor([True])
print("Type-I at lam=0.5 =", type1_loss(g_a, g_b, g_m, 0.5, mask).item())
print("Type-I at lam=0.9 =", round(type1_loss(g_a, g_b, g_m, 0.9, mask).item(), 4))

# Type-II compares the mixed prediction with the clean foreground one
cls, loc = type2_loss(grid([[0.5, 0.5, 0.0]]), grid([[0.25, 0.75, 0.0]]), mask)
print("Type-II cls =", round(cls.item(), 5), " loc =", loc.item())

total, ramp_up, ramp_down = 3000, 500, 500
ts = range(total + 1)
plt.figure(figsize=(5, 3))
plt.plot(ts, [weight_schedule(t, ramp_up, total, ramp_down) for t in ts])
plt.xlabel("iteration")
plt.ylabel("w(t)")
plt.tight_layout()
plt.savefig(out / "weight_schedule.png", dpi=110)
print("wrote", out / "weight_schedule.png")
