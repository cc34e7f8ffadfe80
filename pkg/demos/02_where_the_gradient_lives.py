"""
Where the importance goes
=========================

After a short training run on the occlusion-heavy "clutter" scene, this
looks at one batch: the per-sample importance G (gradient norm at the
pre-activations), the compositing weights, and how much importance lands on
samples hidden behind the first surface.

Run from the repository root:  python demos/02_where_the_gradient_lives.py
"""

import numpy as np

from hardnerf import TrainerConfig, generate_scene, make_dataset, train
from hardnerf.evalbench import export_ray_importance, pdf_histogram, skewness
from hardnerf.hardmine import importance

# %%
ds = make_dataset(generate_scene("clutter", seed=0), n_views=16, resolution=32, seed=0)
res = train(TrainerConfig(mode="hardmine", iterations=800, eval_period=400), ds)
tr = res.trainer
print(f"val PSNR {res.final_psnr:.2f} dB")

# %%
# The trainer keeps the last batch, its compositing result and the cached
# pre-activation gradients.
G = importance(tr.last_cache)
w = tr.last_render.weights
hidden, visible = w < 1e-4, w >= 0.1
print(f"{tr.last_batch.size} samples, {hidden.sum()} with w < 1e-4, {visible.sum()} with w >= 0.1")
print(f"mean importance hidden/visible: {G[hidden].mean() / G[visible].mean():.3g}")

# %%
# The normalised importance is strongly right-tailed.
G_hat = G / G.sum()
print(f"skewness {skewness(G_hat):.2f}")
hist = pdf_histogram(G_hat[G_hat > 0], n_bins=20, log_scale=True)
for lo, d in zip(hist.edges[:-1], hist.density):
    print(f"  {lo:9.2e} {'#' * int(np.ceil(40 * d / hist.density.max()))}")

# %%
# One ray as a point cloud (importance in the red channel).
offs = tr.last_batch.ray_offsets
ray = int(np.argmax(np.diff(offs)))
s, e = offs[ray], offs[ray + 1]
export_ray_importance(ds.scene.to_world(tr.last_batch.positions[s:e]), G[s:e], "ray_importance.ply",
                      extra={"weight": w[s:e]})
print(f"wrote ray {ray} ({e - s} samples) to ray_importance.ply")
