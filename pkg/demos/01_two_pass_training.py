"""
Baseline vs. hard-sample mining on a toy scene
==============================================

Trains the same field twice on the "spheres" scene, once with a single
graph-building pass over every sample and once with an inference pass
followed by a graph-building pass over the mined subset, then compares the
two at a matched MAC budget.

Run from the repository root:  python demos/01_two_pass_training.py
"""

import numpy as np

from hardnerf import TrainerConfig, generate_scene, make_dataset, train
from hardnerf.cli import compare_runs

# %%
# A small dataset: 16 views at 32x32, every eighth view held out.
scene = generate_scene("spheres", seed=0)
ds = make_dataset(scene, n_views=16, resolution=32, seed=0)
print(f"{len(ds.train_indices)} train / {len(ds.val_indices)} val views")

# %%
# Baseline first; its cumulative MACs set the budget for the mining run.
base = train(TrainerConfig(mode="baseline", iterations=600, eval_period=100), ds)
budget = base.trainer.macs_cum
print(f"baseline: {base.final_psnr:.2f} dB after {budget / 1e9:.1f} GMAC")

hm = train(TrainerConfig(mode="hardmine", iterations=10**6, budget_macs=budget, eval_period=100), ds)
print(f"hardmine: {hm.final_psnr:.2f} dB after {len(hm.metrics)} iterations")


# %%
# The metrics rows carry everything the comparison needs.
def as_columns(result):
    rows = result.metrics
    psnr = [np.nan if m.psnr_val is None else m.psnr_val for m in rows]
    return {"macs_cum": np.array([m.macs_cum for m in rows], float), "psnr_val": np.array(psnr)}


summary = compare_runs(as_columns(base), as_columns(hm))
for k, v in summary.items():
    print(f"  {k:28s} {v:.4g}")

# %%
# How small did the hard batch get?
b_over_B = np.array([m.b / m.B for m in hm.metrics if m.B])
print(f"b/B: first {b_over_B[0]:.2f}, median {np.median(b_over_B):.2f}, last {b_over_B[-1]:.2f}")
