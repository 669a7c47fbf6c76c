"""
Pair features and the model table
=================================

Two oriented points give a four-number descriptor: their distance and three
angles. Quantized descriptors index a table that maps each key to the model
point pairs that produced it.
"""

import numpy as np

from ppfbin.mesh import make_bracket, mesh_to_cloud, object_diameter
from ppfbin.ppf import DetectorParams, build_model, compute_ppf, quantize

# a point on a floor and one on a wall, normals pointing outward
from ppfbin.mesh import OrientedPoint
floor = OrientedPoint(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
wall = OrientedPoint(np.array([1.0, 0.0, 0.5]), np.array([-1.0, 0.0, 0.0]))
f = compute_ppf(floor, wall)
print("distance and angles (rad):", tuple(round(x, 3) for x in f))

# the same pair moved somewhere else gives the same feature
from ppfbin.transforms import Pose, axis_angle_matrix
g = Pose(axis_angle_matrix([1, 2, 3], 0.7), [10.0, -4.0, 2.0])
moved = [OrientedPoint(g.apply(p.position[None])[0], g.apply_normals(p.normal[None])[0])
         for p in (floor, wall)]
print("after a rigid move:", tuple(round(x, 3) for x in compute_ppf(*moved)))
print("order matters:     ", tuple(round(x, 3) for x in compute_ppf(wall, floor)))

# the bracket part, sampled at 5% of its diameter
mesh = make_bracket()
d = object_diameter(mesh)
params = DetectorParams.for_diameter(d)
cloud = mesh_to_cloud(mesh, params.tau)
print(f"diameter {d:.2f}, {len(cloud)} model points")
print("key of the floor/wall pair:", quantize(f, params))

model = build_model(cloud, params, d)
sizes = np.diff(model.offsets)
print(f"{len(model.keys)} keys, {model.n_entries} entries, "
      f"largest bucket {sizes.max()}, median {int(np.median(sizes))}")
