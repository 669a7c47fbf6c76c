"""Pipeline configuration file (TOML).

Example::

    mesh = "builtin:bracket"      # or a path to an OBJ/PLY file
    mesh_scale = 1.0
    out = "runs/demo"
    n_bins = 1
    seeds = [0]
    sigmas = [0.0, 0.01]          # fractions of the object diameter
    workers = 1

    [bin]
    bin_w = 60.0
    grid_nx = 7
    n_layers = 10

    [camera]
    width = 1600
    height = 900
    d_near = 10.0
    d_far = 200.0
    # f = 2400.0                  # default: bin spans 90% of the image width

    [detector]                    # any DetectorParams field; lengths absolute
    ref_fraction = 0.2
    n_hypotheses = 5

    [eval]
    translation_thresholds = [0.0, 0.05, 0.1]   # fractions of the diameter
    rotation_thresholds_deg = [0.0, 10.0, 20.0]
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .evaluation import DEFAULT_ROTATION_THRESHOLDS_DEG, DEFAULT_TRANSLATION_THRESHOLDS
from .mesh import TriangleMesh, load_mesh, make_bracket
from .ppf import DetectorParams
from .synth import BinConfig, CameraIntrinsics, default_camera

BUILTIN_MESHES = {"bracket": make_bracket}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    mesh: str = "builtin:bracket"
    mesh_scale: float = 1.0
    bin: BinConfig = field(default_factory=BinConfig)
    camera: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    sigmas: list[float] = field(default_factory=lambda: [0.0])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_bins: int = 1
    out: str = "ppfbin_out"
    workers: int = 1
    render_floor: bool = False
    translation_thresholds: list[float] = field(
        default_factory=lambda: list(DEFAULT_TRANSLATION_THRESHOLDS))
    rotation_thresholds_deg: list[float] = field(
        default_factory=lambda: list(DEFAULT_ROTATION_THRESHOLDS_DEG))

    def load_mesh(self) -> TriangleMesh:
        if self.mesh.startswith("builtin:"):
            name = self.mesh.split(":", 1)[1]
            if name not in BUILTIN_MESHES:
                raise ConfigError(f"unknown builtin mesh {name!r}")
            mesh = BUILTIN_MESHES[name]()
        else:
            mesh = load_mesh(self.mesh)
        if self.mesh_scale != 1.0:
            mesh = dataclasses.replace(mesh, vertices=mesh.vertices * self.mesh_scale)
        return mesh

    def intrinsics(self) -> CameraIntrinsics:
        cam = dict(self.camera)
        f = cam.pop("f", None)
        base = default_camera(self.bin, **cam)
        return dataclasses.replace(base, f=float(f)) if f is not None else base

    def detector_params(self, diameter: float) -> DetectorParams:
        kw = dict(self.detector)
        if "cluster_angle_deg" in kw:
            kw["cluster_angle"] = math.radians(kw.pop("cluster_angle_deg"))
        if "up_axis" in kw:
            kw["up_axis"] = tuple(kw["up_axis"])
        return DetectorParams.for_diameter(diameter, **kw)


_TOP_KEYS = {"mesh", "mesh_scale", "sigmas", "seeds", "n_bins", "out", "workers",
             "render_floor"}
_CAMERA_KEYS = {"width", "height", "d_near", "d_far", "f", "coverage"}


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        cfg = PipelineConfig()
        validate(cfg)
        return cfg
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, base_dir=path.parent)


def config_from_dict(doc: dict, base_dir: Path | None = None) -> PipelineConfig:
    unknown = set(doc) - _TOP_KEYS - {"bin", "camera", "detector", "eval"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig()
    for key in _TOP_KEYS & set(doc):
        setattr(cfg, key, doc[key])
    if base_dir is not None and not cfg.mesh.startswith("builtin:"):
        if not os.path.isabs(cfg.mesh):
            cfg.mesh = str((base_dir / cfg.mesh).resolve())
    if base_dir is not None and not os.path.isabs(cfg.out):
        cfg.out = str((base_dir / cfg.out).resolve())
    try:
        cfg.bin = BinConfig(**doc.get("bin", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[bin]: {exc}") from None
    cam = doc.get("camera", {})
    if set(cam) - _CAMERA_KEYS:
        raise ConfigError(f"[camera]: unknown keys {sorted(set(cam) - _CAMERA_KEYS)}")
    cfg.camera = dict(cam)
    det = doc.get("detector", {})
    allowed = {f.name for f in dataclasses.fields(DetectorParams)} | {"cluster_angle_deg"}
    if set(det) - allowed:
        raise ConfigError(f"[detector]: unknown keys {sorted(set(det) - allowed)}")
    cfg.detector = dict(det)
    ev = doc.get("eval", {})
    if "translation_thresholds" in ev:
        cfg.translation_thresholds = [float(x) for x in ev["translation_thresholds"]]
    if "rotation_thresholds_deg" in ev:
        cfg.rotation_thresholds_deg = [float(x) for x in ev["rotation_thresholds_deg"]]
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if not cfg.mesh.startswith("builtin:") and not os.path.exists(cfg.mesh):
        raise ConfigError(f"mesh file not found: {cfg.mesh}")
    if not cfg.mesh_scale > 0:
        raise ConfigError("mesh_scale must be positive")
    if any(s < 0 for s in cfg.sigmas):
        raise ConfigError("sigmas must be non-negative")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    if cfg.n_bins < 1 or cfg.workers < 1:
        raise ConfigError("n_bins and workers must be >= 1")
    try:
        cfg.intrinsics()
        cfg.detector_params(5.2)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def thread_cap(requested: int) -> int:
    """Worker count limited by the PPFBIN_THREADS environment variable."""
    cap = os.environ.get("PPFBIN_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ConfigError("PPFBIN_THREADS must be an integer") from None
    return max(1, requested)


__all__ = ["PipelineConfig", "ConfigError", "load_config", "config_from_dict", "validate",
           "thread_cap", "BUILTIN_MESHES"]
