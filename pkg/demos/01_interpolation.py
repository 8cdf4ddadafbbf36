"""
Interpolating an SDF inside an octree
=====================================

Every octree vertex stores a distance ``d`` and a gradient ``g``. Plain
trilinear interpolation blends the distances only; the gradient-augmented
form first extrapolates each vertex value linearly to the query point and
then blends those. This script compares both on a unit sphere and then runs
the four-way prior study on the shipped room scene.

Run with ``python demos/01_interpolation.py`` (about half a minute).
"""

import numpy as np

from gradsdf.config import make_config
from gradsdf.evalkit import evaluation_grid, prior_study, prop1_bound
from gradsdf.formats import shipped_scene
from gradsdf.geometry import generate_frames
from gradsdf.octree import CORNERS, interp_weights

# %%
# One octant next to a unit sphere
# --------------------------------
# The octant spans [1.1, 1.3] on every axis. Its corners get the exact
# distance and gradient of ``|x| - 1``.

lo, size = np.array([1.1, 1.1, 1.1]), 0.2
corners = lo + CORNERS * size
d = np.linalg.norm(corners, axis=1) - 1
g = corners / np.linalg.norm(corners, axis=1, keepdims=True)

u = (np.arange(8) + 0.5) / 8
x = lo + size * np.stack(np.meshgrid(u, u, u, indexing="ij"), -1).reshape(-1, 3)
w = interp_weights(lo, size, x)
truth = np.linalg.norm(x, axis=1) - 1
tl = w @ d
ga = np.sum(w * (d + np.einsum("kc,nkc->nk", g, x[:, None] - corners)), axis=1)

m = 1 / np.linalg.norm(lo)  # curvature bound of the sphere SDF inside the octant
print(f"max error  trilinear {np.abs(tl - truth).max():.2e}   "
      f"gradient-augmented {np.abs(ga - truth).max():.2e}")
print(f"bounds     trilinear {np.sqrt(3) * size / 2:.2e}   "
      f"gradient-augmented {prop1_bound(m, size):.2e}")

# %%
# Both schemes use the same weights, so for a smooth field their errors
# are close: the second-order terms match with opposite sign. The guaranteed
# bound is what differs. Gradient augmentation helps most where the field
# bends sharply, for example between obstacles.

# %%
# Prior study on the room
# -----------------------
# Exact vertex data from the analytic scene, octants allocated from
# synthetic scans, errors measured on a 5 cm grid.

scene = shipped_scene()
frames = generate_frames(scene, scene.trajectory[::2], 1500, seed=0)
grid = evaluation_grid(scene, 0.05)
study = prior_study(scene, frames, make_config().octree, grid)
print(f"\n{'mode':12s} {'interp':6s} {'near cm':>8s} {'far cm':>8s} {'vertices':>9s}")
for r in study.rows:
    print(f"{r.mode:12s} {r.interp:6s} {100 * r.mean_near:8.2f} {100 * r.mean_far:8.2f} "
          f"{r.vertices:9d}")
print(f"error bound audited on {study.audited_octants} octants, "
      f"{len(study.audit_violations)} violations")
