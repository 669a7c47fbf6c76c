"""Pose error metrics, precision curves and noise sweeps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detect import Detection, detect
from .mesh import TriangleMesh, mesh_to_cloud, object_diameter
from .ppf import DetectorParams, PPFModel, build_model
from .synth import BinConfig, CameraIntrinsics, synthesize_scene
from .transforms import Pose

__all__ = [
    "PoseError", "PrecisionCurve", "EvalRecord", "pose_error", "match_to_ground_truth",
    "precision_sweep", "curve_auc", "evaluate_scene", "noise_sweep", "run_sweep",
    "curves_from_records", "read_records_csv",
    "write_records_csv", "write_curves_csv", "write_svg", "CSV_COLUMNS",
    "DEFAULT_TRANSLATION_THRESHOLDS", "DEFAULT_ROTATION_THRESHOLDS_DEG",
]

CSV_COLUMNS = ("sigma", "seed", "scene_id", "hypothesis_rank", "votes", "translation_err",
               "translation_err_rel", "rotation_err_deg", "best_by_votes")

# fractions of the object diameter, and degrees
DEFAULT_TRANSLATION_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.25, 26), 4))
DEFAULT_ROTATION_THRESHOLDS_DEG = tuple(float(x) for x in range(0, 31))

MODES = ("all_detections", "max_votes_only")


@dataclass(frozen=True)
class PoseError:
    translation_err: float
    translation_err_rel: float
    rotation_err: float
    matched_gt_id: int = -1
    ambiguous: bool = False

    @property
    def rotation_err_deg(self) -> float:
        return math.degrees(self.rotation_err)


@dataclass(frozen=True)
class PrecisionCurve:
    thresholds: tuple[float, ...]
    precision: tuple[float, ...]
    noise_sigma: float
    selection_mode: str
    metric: str = "translation_rel"
    n_considered: int = 0

    def __post_init__(self):
        p = np.asarray(self.precision)
        if p.size and np.any(np.diff(p) < 0):
            raise AssertionError("precision curve is not monotone in threshold")


@dataclass
class EvalRecord:
    sigma: float
    seed: int
    scene_id: str
    detection: Detection
    error: PoseError


def pose_error(det: Pose, gt: Pose, diameter: float) -> PoseError:
    """Euclidean translation error and angle of the aligning rotation."""
    det = det.pose if isinstance(det, Detection) else det
    te = float(np.linalg.norm(det.translation - gt.translation))
    tr = np.trace(det.rotation.T @ gt.rotation)
    re = float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
    return PoseError(te, te / diameter, re)


def match_to_ground_truth(det, gts, diameter: float) -> PoseError:
    """Error against the nearest ground-truth pose (by translation, then rotation).

    ``ambiguous`` is set when two or more ground truths lie within half a
    diameter of the detection.
    """
    gts = list(gts)
    if not gts:
        raise ValueError("no ground truth to match against")
    pose = det.pose if isinstance(det, Detection) else det
    errs = [(pose_error(pose, g, diameter), gid) for gid, g in gts]
    best, gid = min(errs, key=lambda e: (e[0].translation_err, e[0].rotation_err))
    close = sum(1 for e, _ in errs if e.translation_err <= 0.5 * diameter)
    return PoseError(best.translation_err, best.translation_err_rel, best.rotation_err,
                     gid, close >= 2)


def _metric_value(err: PoseError, metric: str) -> float:
    if metric == "translation":
        return err.translation_err
    if metric == "translation_rel":
        return err.translation_err_rel
    if metric == "rotation":
        return err.rotation_err
    if metric == "rotation_deg":
        return err.rotation_err_deg
    raise ValueError(f"unknown metric {metric!r}")


def precision_sweep(detections, thresholds, mode: str = "all_detections",
                    metric: str = "translation_rel", noise_sigma: float = 0.0) -> PrecisionCurve:
    """Fraction of considered detections whose error is within each threshold.

    ``detections`` holds (Detection, PoseError) pairs or EvalRecords.
    ``max_votes_only`` keeps just the detections flagged ``best_by_votes``.
    """
    pairs = [(r.detection, r.error) if isinstance(r, EvalRecord) else r for r in detections]
    if not pairs:
        raise ValueError("no detections to evaluate")
    if mode == "max_votes_only":
        pairs = [p for p in pairs if p[0].best_by_votes]
    elif mode != "all_detections":
        raise ValueError(f"unknown selection mode {mode!r}")
    thr = np.sort(np.asarray(thresholds, dtype=np.float64))
    if pairs:
        vals = np.sort([_metric_value(e, metric) for _, e in pairs])
        prec = np.searchsorted(vals, thr, side="right") / len(vals)
    else:
        prec = np.zeros(len(thr))
    return PrecisionCurve(tuple(float(x) for x in thr), tuple(float(x) for x in prec),
                          float(noise_sigma), mode, metric, len(pairs))


def curve_auc(curve: PrecisionCurve) -> float:
    """Area under the curve normalised by the threshold span (so in [0, 1])."""
    t = np.asarray(curve.thresholds)
    p = np.asarray(curve.precision)
    if len(t) < 2 or t[-1] == t[0]:
        return float(p.mean()) if len(p) else 0.0
    return float(np.sum((p[1:] + p[:-1]) * np.diff(t)) / 2.0 / (t[-1] - t[0]))


def evaluate_scene(detections, ground_truth, diameter: float, *, sigma: float = 0.0,
                   seed: int = 0, scene_id: str = "") -> list[EvalRecord]:
    if not ground_truth:
        return []
    return [EvalRecord(sigma, seed, scene_id, d, match_to_ground_truth(d, ground_truth, diameter))
            for d in detections]


def run_sweep(mesh: TriangleMesh, cfg: BinConfig, cam: CameraIntrinsics,
              params: DetectorParams, sigmas, seeds, *, model: PPFModel | None = None,
              workers: int = 1, **scene_kw) -> list[EvalRecord]:
    """Synthesize, detect and score one scene per (sigma, seed)."""
    diameter = object_diameter(mesh)
    if model is None:
        model = build_model(mesh_to_cloud(mesh, params.tau), params, diameter)
    jobs = [(float(s), int(seed)) for s in sigmas for seed in seeds]

    def one(job):
        sigma, seed = job
        scene = synthesize_scene(mesh, cfg, cam, sigma, seed, **scene_kw)
        dets = detect(scene.scene_cloud, model, params)
        sid = f"seed{seed}_sigma{sigma:.6g}"
        return evaluate_scene(dets, scene.ground_truth, diameter, sigma=sigma, seed=seed,
                              scene_id=sid)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: (r.sigma, r.seed, r.scene_id, r.detection.hypothesis_rank))
    return records


def curves_from_records(records, translation_thresholds=DEFAULT_TRANSLATION_THRESHOLDS,
                        rotation_thresholds_deg=DEFAULT_ROTATION_THRESHOLDS_DEG) -> list[PrecisionCurve]:
    curves = []
    for sigma in sorted({r.sigma for r in records}):
        sub = [r for r in records if r.sigma == sigma]
        for mode in MODES:
            curves.append(precision_sweep(sub, translation_thresholds, mode, "translation_rel", sigma))
            curves.append(precision_sweep(sub, rotation_thresholds_deg, mode, "rotation_deg", sigma))
    return curves


def noise_sweep(mesh: TriangleMesh, cfg: BinConfig, cam: CameraIntrinsics,
                params: DetectorParams, sigmas, seeds, *, out_dir=None,
                model: PPFModel | None = None, workers: int = 1,
                translation_thresholds=DEFAULT_TRANSLATION_THRESHOLDS,
                rotation_thresholds_deg=DEFAULT_ROTATION_THRESHOLDS_DEG,
                **scene_kw) -> list[PrecisionCurve]:
    """Precision curves per noise level, selection mode and error metric.

    With ``out_dir`` the per-detection CSV, the curve CSV and an SVG chart
    are written there.
    """
    sigmas = list(sigmas)
    if sigmas != sorted(sigmas):
        raise ValueError("sigmas must be sorted ascending")
    records = run_sweep(mesh, cfg, cam, params, sigmas, seeds, model=model, workers=workers,
                        **scene_kw)
    curves = curves_from_records(records, translation_thresholds, rotation_thresholds_deg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_records_csv(records, out / "detections.csv")
        write_curves_csv(curves, out / "curves.csv")
        write_svg(curves, out / "precision.svg")
    return curves


# ---------------------------------------------------------------------------
# output

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_records_csv(records, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        d, e = r.detection, r.error
        w.writerow([_fmt(r.sigma), r.seed, r.scene_id, d.hypothesis_rank, d.votes,
                    _fmt(e.translation_err), _fmt(e.translation_err_rel),
                    _fmt(e.rotation_err_deg), int(d.best_by_votes)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_records_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_curves_csv(curves, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "selection_mode", "sigma", "threshold", "precision"))
    for c in curves:
        for t, p in zip(c.thresholds, c.precision):
            w.writerow((c.metric, c.selection_mode, _fmt(c.noise_sigma), _fmt(t), _fmt(p)))
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


_PALETTE = ("#1f77b4", "#2ca02c", "#bcbd22", "#ff7f0e", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#17becf", "#7f7f7f")

_AXIS_LABEL = {"translation_rel": "translation threshold (fraction of diameter)",
               "translation": "translation threshold",
               "rotation_deg": "rotation threshold (deg)",
               "rotation": "rotation threshold (rad)"}


def write_svg(curves, path, panel_w: int = 360, panel_h: int = 260) -> None:
    """Grid of precision-vs-threshold panels: rows are metrics, columns are
    selection modes, one coloured line per noise level."""
    curves = list(curves)
    metrics = sorted({c.metric for c in curves}, key=lambda m: ("rot" in m, m))
    modes = [m for m in MODES if any(c.selection_mode == m for c in curves)]
    sigmas = sorted({c.noise_sigma for c in curves})
    colour = {s: _PALETTE[i % len(_PALETTE)] for i, s in enumerate(sigmas)}
    ml, mt, pad = 50, 30, 20
    W = len(modes) * (panel_w + pad) + pad + 140
    H = len(metrics) * (panel_h + mt + 40) + pad
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    for row, metric in enumerate(metrics):
        for col, mode in enumerate(modes):
            x0 = pad + col * (panel_w + pad)
            y0 = pad + row * (panel_h + mt + 40)
            pw, ph = panel_w - ml, panel_h - 40
            ox, oy = x0 + ml, y0 + mt
            sel = [c for c in curves if c.metric == metric and c.selection_mode == mode]
            tmax = max((max(c.thresholds) for c in sel if c.thresholds), default=1.0) or 1.0
            out.append(f'<text x="{ox}" y="{y0 + 14}" font-weight="bold">'
                       f'{metric} / {mode}</text>')
            out.append(f'<rect x="{ox}" y="{oy}" width="{pw}" height="{ph}" '
                       f'fill="none" stroke="black"/>')
            for k in range(5):
                yy = oy + ph - k * ph / 4
                out.append(f'<text x="{ox - 6}" y="{yy + 4:.1f}" text-anchor="end">'
                           f'{k / 4:.2f}</text>')
                xx = ox + k * pw / 4
                out.append(f'<text x="{xx:.1f}" y="{oy + ph + 14}" text-anchor="middle">'
                           f'{tmax * k / 4:.3g}</text>')
            out.append(f'<text x="{ox + pw / 2}" y="{oy + ph + 30}" text-anchor="middle">'
                       f'{_AXIS_LABEL.get(metric, metric)}</text>')
            for c in sel:
                pts = " ".join(f"{ox + t / tmax * pw:.2f},{oy + ph - p * ph:.2f}"
                               for t, p in zip(c.thresholds, c.precision))
                out.append(f'<polyline fill="none" stroke="{colour[c.noise_sigma]}" '
                           f'stroke-width="1.5" points="{pts}"/>')
    lx = pad + len(modes) * (panel_w + pad)
    out.append(f'<text x="{lx}" y="{pad + 14}" font-weight="bold">noise sigma</text>')
    for i, s in enumerate(sigmas):
        y = pad + 32 + 16 * i
        out.append(f'<line x1="{lx}" y1="{y - 4}" x2="{lx + 20}" y2="{y - 4}" '
                   f'stroke="{colour[s]}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{y}">{s:.4g}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
