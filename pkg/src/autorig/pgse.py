"""Lifting 2D skeleton joints to a coarse 3D skeleton by casting camera rays into the mesh."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .geometry import CameraModel, TriMesh, back_project_ray, project_points, ray_mesh_intersections
from .skeleton import JOINT_BOX, N_JOINTS

DEFAULT_NOISE_FRACTION = 0.01  # of image width


class Joints2DError(ValueError):
    pass


class Provenance(str, Enum):
    MIDPOINT = "intersection-midpoint"
    SINGLE_HIT = "single-hit"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class CoarseSkeleton:
    positions: np.ndarray  # (s, 3)
    provenance: tuple[Provenance, ...]


def _check_joints2d(j2d, n_joints: int = N_JOINTS) -> np.ndarray:
    arr = np.asarray(j2d, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise Joints2DError(f"joints2d must be an (n, 2) array, got shape {arr.shape}")
    if arr.shape[0] != n_joints:
        raise Joints2DError(f"expected {n_joints} 2D joints, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise Joints2DError("joints2d contains non-finite values")
    return arr


def estimate_coarse_skeleton(mesh: TriMesh, camera: CameraModel, j2d, n_joints: int = N_JOINTS) -> CoarseSkeleton:
    """Midpoint of the first and last mesh hit along each joint's camera ray.

    A single hit is used as-is.  A ray that misses falls back to the point on
    the ray nearest the mesh's bounding-box center.
    """
    j2d = _check_joints2d(j2d, n_joints)
    lo, hi = mesh.bounds()
    box_center = (lo + hi) / 2.0
    out = np.empty((len(j2d), 3))
    prov = []
    for i, q in enumerate(j2d):
        ray = back_project_ray(camera, q)
        hits = ray_mesh_intersections(mesh, ray)
        if len(hits) >= 2:
            out[i] = ray.point(0.5 * (hits[0][0] + hits[-1][0]))
            prov.append(Provenance.MIDPOINT)
        elif len(hits) == 1:
            out[i] = hits[0][1]
            prov.append(Provenance.SINGLE_HIT)
        else:
            mu = float((box_center - ray.origin) @ ray.direction)
            out[i] = np.clip(ray.point(mu), -JOINT_BOX, JOINT_BOX)
            prov.append(Provenance.FALLBACK)
    return CoarseSkeleton(out, tuple(prov))


def skeleton_aware_features(vertices, joints) -> np.ndarray:
    """Per-vertex ``[x, y, z, |v - p_0|, ..., |v - p_{s-1}|]``, shape (m, 3 + s)."""
    v = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    p = np.asarray(getattr(joints, "positions", joints), dtype=np.float64)
    dist = np.sqrt(((v[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1))
    return np.concatenate([v, dist], axis=1)


def synthesize_j2d(camera: CameraModel, gt_joints, noise_sigma: float, seed) -> np.ndarray:
    """Project GT joints and add isotropic Gaussian pixel noise (stand-in for a 2D pose detector)."""
    p2d = project_points(camera, gt_joints)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        p2d = p2d + rng.normal(0.0, noise_sigma, size=p2d.shape)
    return p2d


def save_joints2d(j2d, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"joints2d": np.asarray(j2d, dtype=np.float64).tolist()}) + "\n")


def load_joints2d(path: str | Path, n_joints: int = N_JOINTS) -> np.ndarray:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise Joints2DError(f"{path}: {exc}") from None
    if "joints2d" not in doc:
        raise Joints2DError(f"{path}: missing 'joints2d'")
    try:
        return _check_joints2d(doc["joints2d"], n_joints)
    except Joints2DError as exc:
        raise Joints2DError(f"{path}: {exc}") from None
