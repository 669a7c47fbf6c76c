"""
Precision under depth noise
===========================

Precision against error thresholds for noise levels from 0 to 5% of the part
size, for all detections and for the best-voted one per scene. Writes a CSV
of every detection, the curves, and an SVG chart.
"""

import sys
import warnings

from ppfbin.evaluation import curve_auc, noise_sweep
from ppfbin.mesh import make_bracket, object_diameter
from ppfbin.ppf import DetectorParams
from ppfbin.synth import BinConfig, default_camera

out = sys.argv[1] if len(sys.argv) > 1 else "noise_sweep"
seeds = range(int(sys.argv[2]) if len(sys.argv) > 2 else 3)

mesh = make_bracket()
d = object_diameter(mesh)
cfg = BinConfig(n_layers=1)
params = DetectorParams.for_diameter(d)
sigmas = [k / 100 * d for k in range(6)]

warnings.simplefilter("ignore")
curves = noise_sweep(mesh, cfg, default_camera(cfg), params, sigmas, seeds, out_dir=out)

for c in curves:
    if c.metric == "translation_rel":
        print(f"sigma {c.noise_sigma:.3f}  {c.selection_mode:15s}  area {curve_auc(c):.3f}")
print("chart:", f"{out}/precision.svg")
