"""Skeleton and skinning metrics, deformation error, and geometric skinning baselines."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import segment_distances
from .skeleton import Pose, Rig, SkinningMatrix, bone_segment_samples, linear_blend_skinning

B2B_SAMPLES = 16
PRECISION_THRESHOLD = 1e-4
DEFORM_POSES = 10
DEFORM_RANGE_DEG = 10.0


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    d = _pairwise(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def _joints(x) -> np.ndarray:
    return np.asarray(getattr(x, "joints", x), dtype=np.float64)


def cd_j2j(pred, gt) -> float:
    return chamfer(_joints(pred), _joints(gt))


def _joint_to_bones(points: np.ndarray, rig: Rig) -> np.ndarray:
    bones = np.array(rig.topology.bones)
    return segment_distances(points, rig.joints[bones[:, 0]], rig.joints[bones[:, 1]]).min(axis=1)


def cd_j2b(pred: Rig, gt: Rig) -> float:
    """Joints of each skeleton against the bone segments of the other, symmetrized."""
    return 0.5 * (float(_joint_to_bones(pred.joints, gt).mean()) + float(_joint_to_bones(gt.joints, pred).mean()))


def cd_b2b(pred: Rig, gt: Rig, samples_per_bone: int = B2B_SAMPLES) -> float:
    return chamfer(bone_segment_samples(pred, samples_per_bone), bone_segment_samples(gt, samples_per_bone))


def _weights(x) -> np.ndarray:
    return np.asarray(getattr(x, "weights", x), dtype=np.float64)


def skinning_precision(pred, gt, threshold: float = PRECISION_THRESHOLD) -> float:
    """Mean over vertices of |pred influences & gt influences| / |pred influences|.

    Vertices whose predicted influence set is empty are skipped.
    """
    p = _weights(pred) >= threshold
    g = _weights(gt) >= threshold
    n_pred = p.sum(axis=1)
    valid = n_pred > 0
    if not valid.any():
        return 0.0
    return float(((p & g).sum(axis=1)[valid] / n_pred[valid]).mean())


def skinning_l1(pred, gt) -> float:
    return float(np.abs(_weights(pred) - _weights(gt)).sum(axis=1).mean())


def sample_poses(n_joints: int, count: int = DEFORM_POSES, max_deg: float = DEFORM_RANGE_DEG,
                 seed=0) -> list[Pose]:
    """Independent per-joint XYZ Euler angles uniform in [-max_deg, max_deg]."""
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(count):
        eul = rng.uniform(-max_deg, max_deg, size=(n_joints, 3))
        poses.append(Pose(Rotation.from_euler("xyz", eul, degrees=True).as_rotvec()))
    return poses


def deformation_error(vertices, gt_rig: Rig, pred_skinning, gt_skinning=None, pose_count: int = DEFORM_POSES,
                      max_deg: float = DEFORM_RANGE_DEG, seed=0) -> float:
    """Mean vertex distance between predicted-skinning and GT-skinning deformations.

    Both use the GT skeleton, so only the skinning weights differ.
    """
    verts = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    gt_w = gt_skinning if gt_skinning is not None else gt_rig.skinning
    total = 0.0
    poses = sample_poses(gt_rig.topology.n_joints, pose_count, max_deg, seed)
    for pose in poses:
        a = linear_blend_skinning(verts, gt_rig, pred_skinning, pose)
        b = linear_blend_skinning(verts, gt_rig, gt_w, pose)
        total += float(np.linalg.norm(a - b, axis=1).mean())
    return total / len(poses)


def _top_k_normalize(score: np.ndarray, top_k: int) -> np.ndarray:
    """Keep each row's ``top_k`` largest scores and renormalize them to sum to 1."""
    k = min(top_k, score.shape[1])
    idx = np.argsort(-score, axis=1, kind="stable")[:, :k]
    kept = np.take_along_axis(score, idx, axis=1)
    w = np.zeros_like(score)
    np.put_along_axis(w, idx, kept / kept.sum(axis=1, keepdims=True), axis=1)
    return w


def baseline_inverse_distance(vertices, rig: Rig, power: float = 2.0, top_k: int = 4,
                              eps: float = 1e-6) -> SkinningMatrix:
    """Weights proportional to 1 / distance-to-joint ** power over the nearest joints."""
    verts = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    d = _pairwise(verts, rig.joints)
    return SkinningMatrix(_top_k_normalize(1.0 / np.maximum(d, eps) ** power, top_k))


def baseline_bone_line(vertices, rig: Rig, falloff: float = 0.05, top_k: int = 4) -> SkinningMatrix:
    """Gaussian falloff of the distance to each bone segment, credited to the child joint."""
    verts = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    bones = np.array(rig.topology.bones)
    d = segment_distances(verts, rig.joints[bones[:, 0]], rig.joints[bones[:, 1]])
    logit = -(d / falloff) ** 2
    logit -= logit.max(axis=1, keepdims=True)
    per_bone = _top_k_normalize(np.exp(logit), top_k)
    w = np.zeros((len(verts), rig.topology.n_joints))
    w[:, bones[:, 1]] = per_bone
    return SkinningMatrix(w)


@dataclass
class EvalReport:
    cd_j2j: float
    cd_j2b: float
    cd_b2b: float
    precision: float
    l1: float
    deformation_error: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def mean(cls, reports: list["EvalReport"]) -> "EvalReport":
        return cls(**{f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(cls)})


def evaluate_rig(vertices, pred: Rig, gt: Rig, seed=0) -> EvalReport:
    """Full metric suite for one predicted rig (joints + skinning) against GT."""
    return EvalReport(
        cd_j2j=cd_j2j(pred, gt),
        cd_j2b=cd_j2b(pred, gt),
        cd_b2b=cd_b2b(pred, gt),
        precision=skinning_precision(pred.skinning, gt.skinning),
        l1=skinning_l1(pred.skinning, gt.skinning),
        deformation_error=deformation_error(vertices, gt, pred.skinning, seed=seed),
    )


def report_table(ids: list[str], reports: list[EvalReport]) -> str:
    """CSV with one row per sample and a trailing ``mean`` row."""
    buf = io.StringIO()
    names = [f.name for f in fields(EvalReport)]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample"] + names)
    for sid, r in zip(ids, reports):
        writer.writerow([sid] + [repr(getattr(r, n)) for n in names])
    mean = EvalReport.mean(reports)
    writer.writerow(["mean"] + [repr(getattr(mean, n)) for n in names])
    return buf.getvalue()
