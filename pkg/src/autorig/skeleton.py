"""Skeleton topology, rig container, forward kinematics and linear blend skinning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

N_JOINTS = 22
JOINT_BOX = 0.75
ROW_SUM_TOL = 1e-4


class RigError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]  # -1 marks the root

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        n = len(self.joint_names)
        if len(self.parent) != n:
            raise RigError("joint_names and parents differ in length")
        if sum(p == -1 for p in self.parent) != 1:
            raise RigError("skeleton must have exactly one root")
        for j, p in enumerate(self.parent):
            if p != -1 and not 0 <= p < n:
                raise RigError(f"joint {j} has out-of-range parent {p}")
        # every joint must reach the root without revisiting a joint
        for j in range(n):
            seen, k = set(), j
            while k != -1:
                if k in seen:
                    raise RigError(f"parent graph has a cycle through joint {k}")
                seen.add(k)
                k = self.parent[k]

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @cached_property
    def bones(self) -> tuple[tuple[int, int], ...]:
        return tuple((p, j) for j, p in enumerate(self.parent) if p != -1)

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Joint indices with every parent before its children."""
        depth = []
        for j in range(self.n_joints):
            d, k = 0, j
            while self.parent[k] != -1:
                k = self.parent[k]
                d += 1
            depth.append(d)
        return tuple(sorted(range(self.n_joints), key=lambda j: (depth[j], j)))

    def index(self, name: str) -> int:
        return self.joint_names.index(name)


_MIXAMO_JOINTS = [
    ("Hips", None),
    ("Spine", "Hips"),
    ("Spine1", "Spine"),
    ("Spine2", "Spine1"),
    ("Neck", "Spine2"),
    ("Head", "Neck"),
    ("LeftShoulder", "Spine2"),
    ("LeftArm", "LeftShoulder"),
    ("LeftForeArm", "LeftArm"),
    ("LeftHand", "LeftForeArm"),
    ("RightShoulder", "Spine2"),
    ("RightArm", "RightShoulder"),
    ("RightForeArm", "RightArm"),
    ("RightHand", "RightForeArm"),
    ("LeftUpLeg", "Hips"),
    ("LeftLeg", "LeftUpLeg"),
    ("LeftFoot", "LeftLeg"),
    ("LeftToeBase", "LeftFoot"),
    ("RightUpLeg", "Hips"),
    ("RightLeg", "RightUpLeg"),
    ("RightFoot", "RightLeg"),
    ("RightToeBase", "RightFoot"),
]


def mixamo_topology() -> SkeletonTopology:
    """The fixed 22-joint humanoid hierarchy (no fingers, no head-top end site)."""
    names = [n for n, _ in _MIXAMO_JOINTS]
    parents = [-1 if p is None else names.index(p) for _, p in _MIXAMO_JOINTS]
    return SkeletonTopology(tuple(names), tuple(parents))


@dataclass(frozen=True)
class SkinningMatrix:
    weights: np.ndarray  # (m, s), rows on the probability simplex

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise RigError("skinning weights must be a 2-D matrix")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise RigError("skinning weights must be finite and non-negative")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise RigError("skinning rows must sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


@dataclass(frozen=True)
class Rig:
    topology: SkeletonTopology
    joints: np.ndarray  # (s, 3)
    skinning: SkinningMatrix | None = None

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64)
        if j.shape != (self.topology.n_joints, 3):
            raise RigError(f"expected joints of shape ({self.topology.n_joints}, 3), got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise RigError("joint positions must be finite")
        j.setflags(write=False)
        object.__setattr__(self, "joints", j)
        if self.skinning is not None and self.skinning.shape[1] != self.topology.n_joints:
            raise RigError("skinning column count does not match joint count")

    def with_skinning(self, skinning: SkinningMatrix | None) -> "Rig":
        return Rig(self.topology, self.joints, skinning)

    def validate(self) -> None:
        if np.any(np.abs(self.joints) > JOINT_BOX):
            raise RigError(f"joints must lie within [-{JOINT_BOX}, {JOINT_BOX}]^3")


@dataclass(frozen=True)
class Pose:
    rotations: np.ndarray  # (s, 3) axis-angle, radians

    def __post_init__(self):
        r = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(r)):
            raise RigError("pose rotations must be finite")
        object.__setattr__(self, "rotations", r)

    @classmethod
    def identity(cls, n_joints: int = N_JOINTS) -> "Pose":
        return cls(np.zeros((n_joints, 3)))


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix for an axis-angle vector."""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-15:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def forward_kinematics(rig: Rig, pose: Pose) -> np.ndarray:
    """Per-joint 4x4 rest-to-posed transforms, shape (s, 4, 4).

    Each joint's local rotation pivots about its own rest position and is
    composed onto its parent's transform, so ``T_j = G_j(pose) G_j(rest)^-1``
    and the identity pose gives identity transforms exactly.
    """
    topo = rig.topology
    rot = pose.rotations
    if rot.shape[0] != topo.n_joints:
        raise RigError(f"pose has {rot.shape[0]} joints, rig has {topo.n_joints}")
    rest = rig.joints
    out = np.empty((topo.n_joints, 4, 4))
    for j in topo.order:
        local = np.eye(4)
        r = rodrigues(rot[j])
        local[:3, :3] = r
        local[:3, 3] = rest[j] - r @ rest[j]
        p = topo.parent[j]
        out[j] = local if p == -1 else out[p] @ local
    return out


def posed_joints(rig: Rig, pose: Pose) -> np.ndarray:
    t = forward_kinematics(rig, pose)
    return np.einsum("jab,jb->ja", t[:, :3, :3], rig.joints) + t[:, :3, 3]


def linear_blend_skinning(vertices, rig: Rig, skinning: SkinningMatrix | np.ndarray, pose: Pose) -> np.ndarray:
    """Deform rest-pose vertices by the weight-blended joint transforms."""
    verts = np.asarray(getattr(vertices, "vertices", vertices), dtype=np.float64)
    w = skinning.weights if isinstance(skinning, SkinningMatrix) else np.asarray(skinning, dtype=np.float64)
    if w.shape[0] != len(verts):
        raise RigError(f"skinning has {w.shape[0]} rows but mesh has {len(verts)} vertices")
    if not np.any(pose.rotations):
        # rows of a predicted matrix may sum to 1 only up to rounding
        return verts.copy()
    t = forward_kinematics(rig, pose)[:, :3, :].reshape(rig.topology.n_joints, 12)
    blend = (w @ t).reshape(-1, 3, 4)
    return np.einsum("vab,vb->va", blend[:, :, :3], verts) + blend[:, :, 3]


def bone_segment_samples(rig: Rig, samples_per_bone: int = 16) -> np.ndarray:
    """Evenly spaced points along every bone, endpoints included; shape (bones * n, 3)."""
    if samples_per_bone < 2:
        raise ValueError("samples_per_bone must be at least 2")
    bones = np.array(rig.topology.bones)
    a = rig.joints[bones[:, 0]]
    b = rig.joints[bones[:, 1]]
    t = np.linspace(0.0, 1.0, samples_per_bone)
    # (1 - t) a + t b hits both endpoints exactly
    return ((1.0 - t)[None, :, None] * a[:, None, :] + t[None, :, None] * b[:, None, :]).reshape(-1, 3)


def save_rig(rig: Rig, path: str | Path) -> None:
    doc = {
        "joint_names": list(rig.topology.joint_names),
        "parents": list(rig.topology.parent),
        "joints": rig.joints.tolist(),
    }
    if rig.skinning is not None:
        w = rig.skinning.weights
        vi, ji = np.nonzero(w)
        doc["n_vertices"] = int(w.shape[0])
        doc["skinning"] = [[int(v), int(j), float(w[v, j])] for v, j in zip(vi, ji)]
    Path(path).write_text(json.dumps(doc) + "\n")


def load_rig(path: str | Path) -> Rig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise RigError(f"{path}: {exc}") from None
    for key in ("joint_names", "parents", "joints"):
        if key not in doc:
            raise RigError(f"{path}: missing '{key}'")
    topo = SkeletonTopology(tuple(doc["joint_names"]), tuple(doc["parents"]))
    joints = np.asarray(doc["joints"], dtype=np.float64)
    skinning = None
    if "skinning" in doc:
        trip = np.asarray(doc["skinning"], dtype=np.float64).reshape(-1, 3)
        n_vertices = int(doc.get("n_vertices", trip[:, 0].max() + 1 if len(trip) else 0))
        vi = trip[:, 0].astype(np.int64)
        ji = trip[:, 1].astype(np.int64)
        if np.any(vi < 0) or np.any(vi >= n_vertices) or np.any(ji < 0) or np.any(ji >= topo.n_joints):
            raise RigError(f"{path}: skinning index out of range")
        if np.any(trip[:, 2] < 0) or not np.all(np.isfinite(trip[:, 2])):
            raise RigError(f"{path}: negative or non-finite skinning weight")
        w = np.zeros((n_vertices, topo.n_joints))
        np.add.at(w, (vi, ji), trip[:, 2])
        sums = w.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise RigError(f"{path}: skinning row {bad[0]} sums to {sums[bad[0]]!r}")
        # rows already exact to rounding are kept so save/load is lossless
        needs = np.abs(sums - 1.0) > 1e-12
        w[needs] /= sums[needs, None]
        skinning = SkinningMatrix(w)
    rig = Rig(topo, joints, skinning)
    rig.validate()
    return rig
