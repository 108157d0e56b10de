"""Two heads, one decision: how Dempster-Shafer fusion behaves.

Run: python3 demos/fusion_walkthrough.py
"""
import numpy as np

from trfeddis import Opinion, ds_fuse, predict, to_evidence, to_opinion


def show(tag, o):
    print(f"{tag:<28} b={np.round(o.b[0], 4)} u={o.u[0]:.4f}")


# Two confident heads that disagree: most of the mass is conflict.
g = Opinion.from_arrays([[0.8, 0.0]], [0.2])
l = Opinion.from_arrays([[0.0, 0.8]], [0.2])
f, diag = ds_fuse(g, l)
show("global", g)
show("local", l)
show("fused (disagree)", f)
print(f"{'conflict C':<28} {diag.conflict[0]:.4f}\n")

# Agreement sharpens the belief and shrinks u.
f, _ = ds_fuse(g, Opinion.from_arrays([[0.6, 0.0]], [0.4]))
show("fused (agree)", f)

# A vacuous opinion changes nothing.
f, _ = ds_fuse(g, Opinion.vacuous(1, 2))
show("fused with vacuous", f)
print()

# From raw head outputs: softplus evidence -> Dirichlet -> opinion.
raw_g = np.array([[4.0, -1.0, -2.0], [0.1, 0.0, -0.1]])
raw_l = np.array([[3.0, 0.5, -1.0], [-3.0, -3.0, -3.0]])
_, og = to_opinion(to_evidence(raw_g))
_, ol = to_opinion(to_evidence(raw_l))
fused, _ = ds_fuse(og, ol)
cls, belief, u = predict(fused)
for i in range(2):
    print(f"sample {i}: class {cls[i]} belief {belief[i]:.3f} u_global {og.u[i]:.3f} u_local {ol.u[i]:.3f} u_fused {u[i]:.3f}")
