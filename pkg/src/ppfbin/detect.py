"""Scene-side detection: highest-point hypotheses, pair-feature voting and
pose clustering."""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .mesh import PointCloud, voxel_subsample
from .ppf import (DetectorParams, PPFModel, canonical_rotations, local_alpha_arrays,
                  pack_keys, ppf_arrays, quantize_arrays)
from .transforms import Pose, matrix_to_quat, quat_to_matrix, rot_x

__all__ = [
    "Hypothesis", "Detection", "RawPoses", "select_hypotheses", "reference_indices",
    "vote", "vote_arrays", "accumulator", "cluster_poses", "detect",
]


@dataclass
class Hypothesis:
    center: np.ndarray
    region: PointCloud
    rank: int
    center_index: int = -1


@dataclass
class Detection:
    pose: Pose
    votes: int
    hypothesis_rank: int
    cluster_size: int
    best_by_votes: bool = False
    elapsed_ms: float | None = None

    def to_record(self, with_timing: bool = True) -> dict:
        return {
            "hypothesis_rank": int(self.hypothesis_rank),
            "votes": int(self.votes),
            "cluster_size": int(self.cluster_size),
            "rotation": [float(x) for x in self.pose.rotation.reshape(-1)],
            "translation": [float(x) for x in self.pose.translation],
            "best_by_votes": bool(self.best_by_votes),
            "elapsed_ms": (round(float(self.elapsed_ms), 3)
                           if with_timing and self.elapsed_ms is not None else None),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(Pose(np.reshape(rec["rotation"], (3, 3)), rec["translation"]),
                   int(rec["votes"]), int(rec["hypothesis_rank"]), int(rec["cluster_size"]),
                   bool(rec.get("best_by_votes", False)), rec.get("elapsed_ms"))


@dataclass
class RawPoses:
    """Voted poses as parallel arrays, in (reference, model point, alpha bin) order."""

    rotations: np.ndarray
    translations: np.ndarray
    votes: np.ndarray
    reference: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.votes)

    def as_list(self) -> list[tuple[Pose, int]]:
        return [(Pose(r, t), int(v)) for r, t, v in
                zip(self.rotations, self.translations, self.votes)]

    @classmethod
    def from_list(cls, raw) -> "RawPoses":
        raw = list(raw)
        if not raw:
            return cls(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return cls(np.array([p.rotation for p, _ in raw]),
                   np.array([p.translation for p, _ in raw]),
                   np.array([v for _, v in raw], dtype=np.int64),
                   np.arange(len(raw)))


# ---------------------------------------------------------------------------
# hypotheses

def _smoothed_heights(pos: np.ndarray, heights: np.ndarray, radius: float,
                      tree: cKDTree) -> np.ndarray:
    pairs = tree.query_pairs(radius, output_type="ndarray")
    n = len(pos)
    total = heights.copy()
    count = np.ones(n)
    if len(pairs):
        total += np.bincount(pairs[:, 0], heights[pairs[:, 1]], n)
        total += np.bincount(pairs[:, 1], heights[pairs[:, 0]], n)
        count += np.bincount(pairs[:, 0], minlength=n) + np.bincount(pairs[:, 1], minlength=n)
    return total / count


def select_hypotheses(scene: PointCloud, params: DetectorParams) -> list[Hypothesis]:
    """Pick up to ``n_hypotheses`` highest points, each excluding its
    neighbourhood from later picks.

    Heights are measured along ``params.up_axis`` and low-pass filtered by
    averaging over a radius of twice the sampling resolution. A region holds
    every scene point within ``exclusion_radius`` of its centre, whether or
    not an earlier hypothesis already claimed it.
    """
    if len(scene) == 0:
        return []
    pos = scene.positions
    up = np.asarray(params.up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    heights = pos @ up
    tree = cKDTree(pos)
    if params.smoothing:
        heights = _smoothed_heights(pos, heights, 2.0 * params.tau, tree)
    candidate = np.ones(len(pos), dtype=bool)
    out = []
    for rank in range(1, params.n_hypotheses + 1):
        if not candidate.any():
            warnings.warn(f"only {len(out)} of {params.n_hypotheses} hypotheses available",
                          stacklevel=2)
            break
        masked = np.where(candidate, heights, -np.inf)
        best = int(np.argmax(masked))
        centre = pos[best]
        idx = np.sort(np.asarray(tree.query_ball_point(centre, params.exclusion_radius),
                                 dtype=np.int64))
        candidate[idx] = False
        out.append(Hypothesis(centre.copy(), scene.subset(idx), rank, best))
    return out


# ---------------------------------------------------------------------------
# voting

def reference_indices(n: int, params: DetectorParams) -> np.ndarray:
    k = max(1, int(round(1.0 / params.ref_fraction)))
    if params.random_reference:
        m = int(math.ceil(n / k))
        rng = np.random.default_rng(params.reference_seed)
        return np.sort(rng.choice(n, size=m, replace=False))
    return np.arange(0, n, k)


@numba.njit(cache=True, nogil=True)
def _accumulate(pair_ref, key_slot, alpha_s, offsets, e_idx, e_alpha,
                n_refs, n_model, n_alpha, peak_fraction):
    """Vote per reference point and return cells at or above the peak threshold.

    Pairs must be grouped by ``pair_ref`` (0..n_refs-1, ascending).
    """
    two_pi = 2.0 * np.pi
    width = two_pi / n_alpha
    acc = np.zeros(n_model * n_alpha, dtype=np.int64)
    cap = 1024
    out_ref = np.empty(cap, dtype=np.int64)
    out_cell = np.empty(cap, dtype=np.int64)
    out_votes = np.empty(cap, dtype=np.int64)
    n_out = 0
    p = 0
    n_pairs = pair_ref.shape[0]
    for r in range(n_refs):
        acc[:] = 0
        while p < n_pairs and pair_ref[p] == r:
            s = key_slot[p]
            if s >= 0:
                a_s = alpha_s[p]
                for e in range(offsets[s], offsets[s + 1]):
                    a = e_alpha[e] - a_s
                    if a <= -np.pi:
                        a += two_pi
                    elif a > np.pi:
                        a -= two_pi
                    b = int(np.floor((a + np.pi) / width))
                    if b < 0:
                        b = 0
                    elif b >= n_alpha:
                        b = n_alpha - 1
                    acc[e_idx[e] * n_alpha + b] += 1
            p += 1
        top = 0
        for c in range(acc.shape[0]):
            if acc[c] > top:
                top = acc[c]
        if top == 0:
            continue
        thresh = peak_fraction * top - 1e-9
        for c in range(acc.shape[0]):
            if acc[c] >= thresh:
                if n_out == cap:
                    cap *= 2
                    nr = np.empty(cap, dtype=np.int64)
                    nc = np.empty(cap, dtype=np.int64)
                    nv = np.empty(cap, dtype=np.int64)
                    nr[:n_out] = out_ref[:n_out]
                    nc[:n_out] = out_cell[:n_out]
                    nv[:n_out] = out_votes[:n_out]
                    out_ref, out_cell, out_votes = nr, nc, nv
                out_ref[n_out] = r
                out_cell[n_out] = c
                out_votes[n_out] = acc[c]
                n_out += 1
    return out_ref[:n_out], out_cell[:n_out], out_votes[:n_out]


def _scene_pairs(region: PointCloud, refs: np.ndarray, model: PPFModel, params: DetectorParams):
    """Pairs (reference, other) within d_max with their table slot and scene alpha."""
    pos, nrm = region.positions, region.normals
    n = len(pos)
    rot_s = canonical_rotations(nrm[refs])
    r_loc, slots, alphas = [], [], []
    block = max(1, 400_000 // max(n, 1))
    for s in range(0, len(refs), block):
        rl = np.arange(s, min(s + block, len(refs)))
        i = np.repeat(refs[rl], n)
        j = np.tile(np.arange(n), len(rl))
        li = np.repeat(rl, n)
        d2 = np.sum((pos[j] - pos[i]) ** 2, axis=1)
        keep = (i != j) & (d2 <= params.d_max ** 2 * (1 + 1e-12))
        i, j, li = i[keep], j[keep], li[keep]
        f = ppf_arrays(pos[i], nrm[i], pos[j], nrm[j])
        keep = (f[:, 0] <= params.d_max) & (f[:, 0] > 0)
        i, j, li, f = i[keep], j[keep], li[keep], f[keep]
        keys = pack_keys(quantize_arrays(f, params))
        slot = np.searchsorted(model.keys, keys)
        slot_c = np.minimum(slot, len(model.keys) - 1)
        slot = np.where(model.keys[slot_c] == keys, slot_c, -1)
        r_loc.append(li)
        slots.append(slot)
        alphas.append(local_alpha_arrays(pos[i], None, pos[j], ref_rot=rot_s[li]))
    if not r_loc:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), rot_s
    return (np.concatenate(r_loc).astype(np.int64), np.concatenate(slots).astype(np.int64),
            np.concatenate(alphas), rot_s)


def _check_params(model: PPFModel, params: DetectorParams) -> None:
    mp = model.params
    if (mp.n_angle_steps, mp.n_dist_steps, mp.d_max) != (params.n_angle_steps,
                                                        params.n_dist_steps, params.d_max):
        raise ValueError("detector quantization differs from the model's")


def vote_arrays(region: PointCloud, model: PPFModel, params: DetectorParams,
                refs: np.ndarray | None = None) -> RawPoses:
    """Voting over a region; see :func:`vote`."""
    _check_params(model, params)
    if len(region) < 2 or len(model.keys) == 0:
        return RawPoses.from_list([])
    if refs is None:
        refs = reference_indices(len(region), params)
    refs = np.asarray(refs, dtype=np.int64)
    pair_ref, slot, alpha_s, rot_s = _scene_pairs(region, refs, model, params)
    n_model = len(model.model_cloud)
    A = params.n_alpha_steps
    p_ref, p_cell, p_votes = _accumulate(pair_ref, slot, alpha_s, model.offsets,
                                         model.entry_index.astype(np.int64), model.entry_alpha,
                                         len(refs), n_model, A, params.peak_fraction)
    m_idx, a_bin = p_cell // A, p_cell % A
    alpha = -np.pi + (a_bin + 0.5) * (2.0 * np.pi / A)
    rot_m = canonical_rotations(model.model_cloud.normals[m_idx])
    rot = np.einsum("nji,njk,nkl->nil", rot_s[p_ref], rot_x(alpha), rot_m)
    s_pos = region.positions[refs[p_ref]]
    m_pos = model.model_cloud.positions[m_idx]
    trans = s_pos - np.einsum("nij,nj->ni", rot, m_pos)
    return RawPoses(rot, trans, p_votes, refs[p_ref])


def vote(region: PointCloud, model: PPFModel, params: DetectorParams) -> list[tuple[Pose, int]]:
    """Pose votes from the region's reference points.

    Every ``round(1/ref_fraction)``-th region point is a reference point.
    Each pairs with all region points within ``d_max``; matching model
    entries vote in a (model point, alpha bin) accumulator, and every cell
    reaching ``peak_fraction`` of the maximum is turned into a pose.
    """
    return vote_arrays(region, model, params).as_list()


def accumulator(region: PointCloud, model: PPFModel, params: DetectorParams,
                ref: int) -> np.ndarray:
    """Full (model points x alpha bins) vote grid of one reference point."""
    _check_params(model, params)
    refs = np.array([ref], dtype=np.int64)
    pair_ref, slot, alpha_s, _ = _scene_pairs(region, refs, model, params)
    n_model = len(model.model_cloud)
    A = params.n_alpha_steps
    p_ref, p_cell, p_votes = _accumulate(pair_ref, slot, alpha_s, model.offsets,
                                         model.entry_index.astype(np.int64), model.entry_alpha,
                                         1, n_model, A, 0.0)
    grid = np.zeros(n_model * A, dtype=np.int64)
    grid[p_cell] = p_votes
    return grid.reshape(n_model, A)


# ---------------------------------------------------------------------------
# clustering

def cluster_poses(raw, params: DetectorParams) -> list[Detection]:
    """Greedy pose clustering with vote-weighted averaging.

    Poses are visited by descending votes (ties keep input order); each
    joins the first cluster whose seed is within both ``cluster_dist`` and
    ``cluster_angle``, otherwise it seeds a new cluster.
    """
    if not isinstance(raw, RawPoses):
        raw = RawPoses.from_list(raw)
    if len(raw) == 0:
        return []
    order = np.argsort(-raw.votes, kind="stable")
    quats = matrix_to_quat(raw.rotations[order])
    trans = raw.translations[order]
    votes = raw.votes[order].astype(np.float64)
    cos_half = math.cos(params.cluster_angle / 2.0)
    d2max = params.cluster_dist ** 2

    cap = 64
    seed_q = np.empty((cap, 4))
    seed_t = np.empty((cap, 3))
    members: list[list[int]] = []
    for k in range(len(order)):
        n = len(members)
        if n:
            dt = np.sum((seed_t[:n] - trans[k]) ** 2, axis=1)
            dq = np.abs(seed_q[:n] @ quats[k])
            hit = np.flatnonzero((dt <= d2max) & (dq >= cos_half - 1e-12))
            if hit.size:
                members[hit[0]].append(k)
                continue
        if n == cap:
            cap *= 2
            seed_q = np.resize(seed_q, (cap, 4))
            seed_t = np.resize(seed_t, (cap, 3))
        seed_q[n] = quats[k]
        seed_t[n] = trans[k]
        members.append([k])

    out = []
    for mem in members:
        mem = np.asarray(mem)
        w = votes[mem]
        q = quats[mem]
        q = np.where((q @ q[0] < 0)[:, None], -q, q)
        qm = w @ q
        qm /= np.linalg.norm(qm)
        t = w @ trans[mem] / w.sum()
        out.append(Detection(Pose(quat_to_matrix(qm), t), int(w.sum()), 0, len(mem)))
    out.sort(key=lambda d: -d.votes)
    return out


# ---------------------------------------------------------------------------
# end to end

def _detect_one(h: Hypothesis, model: PPFModel, params: DetectorParams):
    t0 = time.perf_counter()
    raw = vote_arrays(h.region, model, params)
    clusters = cluster_poses(raw, params)
    elapsed = (time.perf_counter() - t0) * 1000.0
    if not clusters:
        return None
    top = clusters[0]
    top.hypothesis_rank = h.rank
    top.elapsed_ms = elapsed
    return top


def detect(scene: PointCloud, model: PPFModel, params: DetectorParams | None = None,
           workers: int = 1, hypotheses: list[Hypothesis] | None = None) -> list[Detection]:
    """Detect object instances in a camera-frame scene cloud.

    Returns the top cluster of each hypothesis in hypothesis order; the one
    with the most votes (lowest rank on ties) is flagged ``best_by_votes``.
    """
    params = params or model.params
    if len(scene) == 0:
        return []
    if hypotheses is None:
        sub = voxel_subsample(scene, params.tau)
        hypotheses = select_hypotheses(sub, params)
    if workers > 1 and len(hypotheses) > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda h: _detect_one(h, model, params), hypotheses))
    else:
        results = [_detect_one(h, model, params) for h in hypotheses]
    dets = [d for d in results if d is not None]
    if dets:
        best = max(dets, key=lambda d: (d.votes, -d.hypothesis_rank))
        best.best_by_votes = True
    return dets
