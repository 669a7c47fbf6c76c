"""Pair-feature object detection in synthetic bin-picking scenes.

Submodules: ``mesh`` (loading, sampling), ``synth`` (scene generation),
``ppf`` (features and model tables), ``detect`` (hypotheses, voting,
clustering), ``evaluation`` (pose errors, precision curves) and ``cli``.
"""

from .detect import Detection, detect
from .mesh import PointCloud, TriangleMesh, load_mesh, make_bracket, mesh_to_cloud, object_diameter
from .ppf import DetectorParams, PPFModel, build_model, load_model, save_model
from .synth import BinConfig, CameraIntrinsics, default_camera, synthesize_scene
from .transforms import Pose

__version__ = "0.1.0"

__all__ = [
    "Detection", "detect", "PointCloud", "TriangleMesh", "load_mesh", "make_bracket",
    "mesh_to_cloud", "object_diameter", "DetectorParams", "PPFModel", "build_model",
    "load_model", "save_model", "BinConfig", "CameraIntrinsics", "default_camera",
    "synthesize_scene", "Pose",
]
