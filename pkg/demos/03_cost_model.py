"""
What the second pass costs
==========================

Two forward passes and one backward on b samples against one forward and
one backward on B samples. The closed form assumes the backward costs twice
the forward; the ledger counts the actual MACs of this field.

Run from the repository root:  python demos/03_cost_model.py
"""

import numpy as np

from hardnerf import CostLedger, FieldParams
from hardnerf.evalbench import measured_network_fraction, measured_runtime_fraction, theoretical_runtime_fraction
from hardnerf.field import backward, forward_inference, forward_training

params = FieldParams.create(seed=0)
rng = np.random.default_rng(0)
B = 4096
pts = rng.random((B, 3))
dirs = rng.normal(size=(B, 3))
dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)


def one_iteration(mode, b):
    led = CostLedger()
    if mode == "hardmine":
        forward_inference(params, pts, dirs, ledger=led)
        sel = slice(0, b)
    else:
        sel = slice(0, B)
    _, tape = forward_training(params, pts[sel], dirs[sel], ledger=led)
    n = tape.batch_size
    backward(tape, np.ones(n), np.ones((n, 3)), ledger=led)
    led.end_iteration()
    return led


# %%
base = one_iteration("baseline", B)
k = base.backward_multiplier
print(f"backward/forward MAC multiplier: {k:.3f}")
print(f"break-even b/B = k/(1+k) = {k / (1 + k):.3f}")
print()
print("  b/B   closed form  with measured k  ledger   peak graph floats vs baseline")
for frac in (0.05, 0.1, 0.15, 0.5, 1.0):
    b = int(frac * B)
    hm = one_iteration("hardmine", b)
    mem = hm.history[-1]["peak_graph_floats"] / base.history[-1]["peak_graph_floats"]
    print(f"  {frac:4.2f}  {theoretical_runtime_fraction(B, b):11.3f}  {measured_runtime_fraction(B, b, k):15.3f}"
          f"  {measured_network_fraction(hm, base):6.3f}   {mem:.3f}")
