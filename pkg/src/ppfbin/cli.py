"""Command line entry point: ``ppfbin synth|train|detect|eval|sweep``.

Exit codes: 0 success, 1 user or configuration error, 2 internal invariant
violation. The PPFBIN_THREADS environment variable caps ``--workers``.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config, thread_cap, validate
from .detect import Detection, detect
from .evaluation import (EvalRecord, curves_from_records, evaluate_scene, precision_sweep,
                         write_curves_csv, write_records_csv, write_svg)
from .mesh import MeshError, mesh_to_cloud, object_diameter
from .ppf import ModelFormatError, build_model, dump_model_json, load_model, save_model
from .synth import read_pose_records, read_scene, synthesize_scene, write_scene

MODEL_NAME = "model.ppfm"
REPORT_NAME = "detections.json"
BIN_SEED_STRIDE = 1_000_003


def scene_seed(seed: int, bin_index: int) -> int:
    return int(seed) + BIN_SEED_STRIDE * int(bin_index)


def scene_name(bin_index: int, seed: int, sigma_rel: float) -> str:
    return f"bin{bin_index:03d}_seed{seed}_sigma{sigma_rel:g}"


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: PipelineConfig, workers: int = 1) -> list[Path]:
    """One scene directory per (bin, seed, sigma) under ``<out>/scenes``."""
    mesh = cfg.load_mesh()
    diameter = object_diameter(mesh)
    cam = cfg.intrinsics()
    root = Path(cfg.out) / "scenes"
    jobs = [(b, s, sg) for b in range(cfg.n_bins) for s in cfg.seeds for sg in cfg.sigmas]

    def one(job):
        b, seed, sigma_rel = job
        scene = synthesize_scene(mesh, cfg.bin, cam, sigma_rel * diameter, scene_seed(seed, b),
                                 render_floor=cfg.render_floor)
        scene.meta.update({"bin_index": b, "base_seed": int(seed), "sigma_rel": float(sigma_rel)})
        name = scene_name(b, seed, sigma_rel)
        return write_scene(scene, root / name, scene_id=name)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            dirs = list(ex.map(one, jobs))
    else:
        dirs = [one(j) for j in jobs]
    print(f"wrote {len(dirs)} scene(s) to {root}")
    return dirs


def cmd_train(cfg: PipelineConfig, out: str | None = None, json_dump: str | None = None,
              workers: int = 1) -> Path:
    mesh = cfg.load_mesh()
    diameter = object_diameter(mesh)
    params = cfg.detector_params(diameter)
    cloud = mesh_to_cloud(mesh, params.tau)
    model = build_model(cloud, params, diameter, workers=workers)
    path = Path(out) if out else Path(cfg.out) / MODEL_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    if json_dump:
        dump_model_json(model, json_dump)
    print(f"diameter {diameter:.6g}  points {len(cloud)}  keys {len(model.keys)}  "
          f"entries {model.n_entries}  -> {path}")
    return path


def cmd_detect(model_path, scene_dirs, cfg: PipelineConfig, *, out: str | None = None,
               timing: bool = True, workers: int = 1) -> list[Path]:
    probe = load_model(model_path)
    params = cfg.detector_params(probe.diameter)
    model = load_model(model_path, params)
    params = model.params
    written = []
    for sd in scene_dirs:
        sd = Path(sd)
        if not (sd / "scene.json").exists() or not (sd / "depth.pfm").exists():
            raise FileNotFoundError(f"{sd} is not a scene directory")
        scene = read_scene(sd)
        scene_id = scene.meta.get("scene_id", sd.name)
        dets = detect(scene.scene_cloud, model, params, workers=workers)
        report = [dict(d.to_record(timing), scene_id=scene_id) for d in dets]
        path = Path(out) if (out and len(scene_dirs) == 1) else sd / REPORT_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
        best = [d for d in dets if d.best_by_votes]
        summary = f"best rank {best[0].hypothesis_rank}, {best[0].votes} votes" if best else "none"
        print(f"{scene_id}: {len(dets)} detection(s), {summary} -> {path}")
        written.append(path)
    return written


def _load_report(path: Path) -> list[dict]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ValueError(f"{path}: detection report must be a JSON list")
    return doc


def cmd_eval(scene_dirs, cfg: PipelineConfig, *, reports=None, out: str | None = None) -> Path:
    """Score detection reports against the scenes' ground truth."""
    if reports is not None and len(reports) != len(scene_dirs):
        raise ValueError("need one report per scene directory")
    records: list[EvalRecord] = []
    for k, sd in enumerate(scene_dirs):
        sd = Path(sd)
        side = json.loads((sd / "scene.json").read_text(encoding="utf-8"))
        scene_id = side.get("scene_id", sd.name)
        rpath = Path(reports[k]) if reports is not None else sd / REPORT_NAME
        entries = _load_report(rpath)
        for e in entries:
            if "scene_id" in e and e["scene_id"] != scene_id:
                raise ValueError(f"report {rpath} is for scene {e['scene_id']!r}, "
                                 f"not {scene_id!r}")
        gts = read_pose_records(json.loads((sd / "ground_truth.json").read_text(encoding="utf-8")))
        dets = [Detection.from_record(e) for e in entries]
        records += evaluate_scene(dets, gts, float(side["diameter"]),
                                  sigma=float(side.get("sigma_rel", side.get("noise_sigma", 0.0))),
                                  seed=int(side.get("seed", 0)), scene_id=scene_id)
    records.sort(key=lambda r: (r.sigma, r.seed, r.scene_id, r.detection.hypothesis_rank))
    out_dir = Path(out) if out else Path(cfg.out) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records_csv(records, out_dir / "eval.csv")
    if records:
        curves = curves_from_records(records, cfg.translation_thresholds,
                                     cfg.rotation_thresholds_deg)
        write_curves_csv(curves, out_dir / "curves.csv")
        write_svg(curves, out_dir / "precision.svg")
        for mode in ("all_detections", "max_votes_only"):
            t = precision_sweep(records, [0.05, 0.10], mode, "translation_rel")
            r = precision_sweep(records, [12.0, 20.0], mode, "rotation_deg")
            print(f"{mode:15s} n={t.n_considered:4d}  trans<=5%: {t.precision[0]:.3f}  "
                  f"trans<=10%: {t.precision[1]:.3f}  rot<=12deg: {r.precision[0]:.3f}  "
                  f"rot<=20deg: {r.precision[1]:.3f}")
    else:
        print("no detections to evaluate")
    print(f"wrote {out_dir / 'eval.csv'}")
    return out_dir


def cmd_sweep(cfg: PipelineConfig, workers: int = 1, timing: bool = False) -> Path:
    scenes = cmd_synth(cfg, workers)
    model = cmd_train(cfg, workers=workers)
    cmd_detect(model, scenes, cfg, timing=timing, workers=workers)
    return cmd_eval(scenes, cfg)


# ---------------------------------------------------------------------------
# argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML pipeline configuration file")
    p.add_argument("--out", help="output directory (or file, where noted)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (capped by PPFBIN_THREADS)")
    p.add_argument("--mesh", help="mesh file (OBJ/PLY) or builtin:<name>")
    p.add_argument("--mesh-scale", type=float, help="multiply mesh coordinates by this factor")


def _detector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ref-fraction", type=float, help="fraction of scene points used as references")
    p.add_argument("--hypotheses", type=int, help="number of highest-point hypotheses")


def _scene_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, action="append",
                   help="scene seed; repeat for several (replaces config seeds)")
    p.add_argument("--sigma", type=float, action="append",
                   help="depth noise as a fraction of the object diameter; repeatable")
    p.add_argument("--bins", type=int, help="number of bins per seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppfbin", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic bin scenes")
    _common(p)
    _scene_flags(p)

    p = sub.add_parser("train", help="build a pair-feature model from the mesh")
    _common(p)
    p.add_argument("--json", dest="json_dump", help="also write a JSON debug dump here")

    p = sub.add_parser("detect", help="detect objects in scene directories")
    _common(p)
    _detector_flags(p)
    p.add_argument("--model", required=True, help="model file written by 'train'")
    p.add_argument("scenes", nargs="+", help="scene directories")
    p.add_argument("--no-timing", action="store_true",
                   help="write elapsed_ms as null so reports are byte-reproducible")

    p = sub.add_parser("eval", help="score detection reports against ground truth")
    _common(p)
    p.add_argument("scenes", nargs="+", help="scene directories (with ground_truth.json)")
    p.add_argument("--reports", nargs="+",
                   help="report files, one per scene (default: <scene>/detections.json)")

    p = sub.add_parser("sweep", help="synth + train + detect + eval over the sigma x seed grid")
    _common(p)
    _scene_flags(p)
    _detector_flags(p)
    return ap


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    if getattr(args, "sigma", None):
        cfg.sigmas = sorted(args.sigma)
    if getattr(args, "bins", None) is not None:
        cfg.n_bins = args.bins
    if getattr(args, "ref_fraction", None) is not None:
        cfg.detector["ref_fraction"] = args.ref_fraction
    if getattr(args, "hypotheses", None) is not None:
        cfg.detector["n_hypotheses"] = args.hypotheses
    if args.out and args.command in ("synth", "sweep"):
        cfg.out = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.mesh:
        cfg.mesh = args.mesh
    if args.mesh_scale is not None:
        cfg.mesh_scale = args.mesh_scale
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        workers = thread_cap(cfg.workers)
        if args.command == "synth":
            cmd_synth(cfg, workers)
        elif args.command == "train":
            cmd_train(cfg, out=args.out, json_dump=args.json_dump, workers=workers)
        elif args.command == "detect":
            cmd_detect(args.model, args.scenes, cfg, out=args.out,
                       timing=not args.no_timing, workers=workers)
        elif args.command == "eval":
            cmd_eval(args.scenes, cfg, reports=args.reports, out=args.out)
        elif args.command == "sweep":
            cmd_sweep(cfg, workers)
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, MeshError, ModelFormatError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
