"""
A synthetic bin of parts
========================

Parts are dropped onto a heightmap in layers, rendered by a z-buffer from a
camera above the bin, and the depth image is turned back into an oriented
point cloud.
"""

import tempfile

import numpy as np

from ppfbin.mesh import make_bracket
from ppfbin.synth import BinConfig, default_camera, synthesize_scene, write_scene

mesh = make_bracket()
cfg = BinConfig(n_layers=2)            # 2 x 35 parts
cam = default_camera(cfg)
print(f"camera {cam.width}x{cam.height}, focal {cam.f:g}")

scene = synthesize_scene(mesh, cfg, cam, sigma=0.0, seed=7)
print(len(scene.ground_truth), "parts placed")
print(int(scene.depth.valid.sum()), "pixels hit a part")

z = scene.depth.metric_depth()[scene.depth.valid]
print(f"depth range {z.min():.1f} .. {z.max():.1f}")

# the cloud has one oriented point per covered pixel
cloud = scene.scene_cloud
facing = np.sum(cloud.normals * cloud.positions, axis=1) < 0
print(len(cloud), "scene points; normals face the camera:", bool(facing.all()))

# same seed with depth noise of 2% of the part size
noisy = synthesize_scene(mesh, cfg, cam, sigma=0.02 * 5.2, seed=7)
diff = noisy.depth.metric_depth() - scene.depth.metric_depth()
print(f"noise std {diff[scene.depth.valid].std():.3f}")

out = tempfile.mkdtemp()
write_scene(scene, out)
print("written to", out)
