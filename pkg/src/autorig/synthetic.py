"""Procedural T-pose characters built from capsules, with analytic ground-truth rigs.

Characters face +z with y up and arms along +-x.  Lengths are in head units
(the head sphere has diameter 1) before normalization, so a character with
head-to-body ratio R is exactly R units tall.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    CameraModel,
    TriMesh,
    load_camera,
    load_obj,
    normalize_mesh,
    save_camera,
    save_obj,
    segment_distances,
)
from .pgse import DEFAULT_NOISE_FRACTION, load_joints2d, save_joints2d, synthesize_j2d
from .skeleton import Rig, SkinningMatrix, load_rig, mixamo_topology, save_rig

IMAGE_SIZE = 512
CAMERA_DISTANCE = 2.2
SKIN_TOP_K = 4
SKIN_FALLOFF = 0.3  # times bone length
RATIO_RANGE = (2.0, 9.0)
MIN_VERTEX_BUDGET = 500


def canonical_camera() -> CameraModel:
    """Front camera on +z looking at the origin; the unit box fills ~80% of the image."""
    f = 0.8 * IMAGE_SIZE * CAMERA_DISTANCE
    c = IMAGE_SIZE / 2.0
    return CameraModel.look_at([0.0, 0.0, CAMERA_DISTANCE], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], f, f, c, c)


DEFAULT_NOISE_SIGMA = DEFAULT_NOISE_FRACTION * IMAGE_SIZE


@dataclass(frozen=True)
class CharacterSpec:
    head_to_body_ratio: float = 7.0
    arm_thickness: float = 1.0
    leg_thickness: float = 1.0
    torso_thickness: float = 1.0
    shoulder_width: float = 1.0  # multiplier on the proportional default
    hip_width: float = 1.0
    vertex_budget: int = 800
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        lo, hi = RATIO_RANGE
        if not lo <= self.head_to_body_ratio <= hi:
            raise ValueError(f"head_to_body_ratio must be in [{lo}, {hi}]")
        if self.vertex_budget < MIN_VERTEX_BUDGET:
            raise ValueError(f"vertex_budget must be at least {MIN_VERTEX_BUDGET}")

    @classmethod
    def sample(cls, rng: np.random.Generator, ratio: float, **overrides) -> "CharacterSpec":
        """Random body-shape factors around the defaults for a given ratio."""
        kw = dict(
            head_to_body_ratio=float(ratio),
            arm_thickness=float(rng.uniform(0.75, 1.3)),
            leg_thickness=float(rng.uniform(0.75, 1.3)),
            torso_thickness=float(rng.uniform(0.8, 1.25)),
            shoulder_width=float(rng.uniform(0.85, 1.15)),
            hip_width=float(rng.uniform(0.85, 1.15)),
            seed=int(rng.integers(2**31)),
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class RiggedSample:
    mesh: TriMesh
    camera: CameraModel
    joints2d: np.ndarray
    gt_rig: Rig
    spec: CharacterSpec
    part_faces: list[tuple[int, int]] | None = None  # face range of each closed part


def _skeleton_layout(spec: CharacterSpec) -> tuple[np.ndarray, dict[str, float]]:
    topo = mixamo_topology()
    R = spec.head_to_body_ratio
    body = R - 1.0
    legs = 0.5 * body
    torso = body - legs
    limb_scale = 0.55 + 0.45 * min(body / 6.0, 1.0)
    r_foot = 0.11 * limb_scale * spec.leg_thickness
    r_shin = 0.16 * limb_scale * spec.leg_thickness
    # the shin capsule must not dip below the soles, or the height would exceed R
    ankle_y = max(0.07 * legs, r_foot * 1.2, r_shin)
    foot_len = 0.1 * legs + 0.15
    sw = (0.25 * torso + 0.2) * spec.shoulder_width
    hw = 0.45 * sw * spec.hip_width
    arm = 0.4 * body
    shoulder_y = legs + 0.85 * torso

    pos = {
        "Hips": (0.0, legs, 0.0),
        "Spine": (0.0, legs + 0.2 * torso, 0.0),
        "Spine1": (0.0, legs + 0.45 * torso, 0.0),
        "Spine2": (0.0, legs + 0.7 * torso, 0.0),
        "Neck": (0.0, legs + torso, 0.0),
        "Head": (0.0, R - 0.5, 0.0),
    }
    for side, sx in (("Left", 1.0), ("Right", -1.0)):
        pos[f"{side}Shoulder"] = (sx * 0.3 * sw, shoulder_y, 0.0)
        pos[f"{side}Arm"] = (sx * sw, shoulder_y, 0.0)
        pos[f"{side}ForeArm"] = (sx * (sw + 0.5 * arm), shoulder_y, 0.0)
        pos[f"{side}Hand"] = (sx * (sw + arm), shoulder_y, 0.0)
        pos[f"{side}UpLeg"] = (sx * hw, legs - 0.05 * torso, 0.0)
        pos[f"{side}Leg"] = (sx * hw, ankle_y + 0.5 * (legs - 0.05 * torso - ankle_y), 0.0)
        pos[f"{side}Foot"] = (sx * hw, ankle_y, 0.0)
        pos[f"{side}ToeBase"] = (sx * hw, r_foot, foot_len)
    joints = np.array([pos[n] for n in topo.joint_names])

    radii = {
        "spine": 0.5 * sw * spec.torso_thickness,
        "neck": 0.18 * spec.torso_thickness,
        "clavicle": 0.17 * limb_scale * spec.arm_thickness,
        "upper_arm": 0.16 * limb_scale * spec.arm_thickness,
        "forearm": 0.13 * limb_scale * spec.arm_thickness,
        "hip": 0.3 * sw * spec.torso_thickness,
        "thigh": 0.22 * limb_scale * spec.leg_thickness,
        "shin": r_shin,
        "foot": r_foot,
    }
    return joints, radii


def _bone_radius(child: str, radii: dict[str, float]) -> float:
    if child in ("Spine", "Spine1", "Spine2", "Neck"):
        return radii["spine"] if child != "Neck" else 0.8 * radii["spine"]
    if child == "Head":
        return radii["neck"]
    for key, part in (("Shoulder", "clavicle"), ("ForeArm", "upper_arm"), ("Hand", "forearm"),
                      ("UpLeg", "hip"), ("Leg", "thigh"), ("Foot", "shin"), ("ToeBase", "foot")):
        if child.endswith(key) and not (key == "Leg" and child.endswith("UpLeg")):
            return radii[part]
    if child.endswith("Arm"):
        return radii["clavicle"]
    raise KeyError(child)


def _resolution(budget: int, n_parts: int) -> tuple[int, int]:
    """Largest (around, rings-per-cap) whose total vertex count fits the budget."""
    best = (6, 1)
    for around in range(6, 65, 2):
        for cap in range(1, around // 2 + 1):
            if n_parts * (2 + around * 2 * cap) <= budget:
                if around * cap > best[0] * best[1] or (around * cap == best[0] * best[1] and around > best[0]):
                    best = (around, cap)
    return best


def capsule(a, b, radius: float, around: int, cap_rings: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed triangulated capsule around segment ``a``-``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    u = axis / length if length > 1e-12 else np.array([0.0, 1.0, 0.0])
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)

    # (center, axial offset, ring radius) for each ring, bottom pole to top pole
    rings = []
    for i in range(1, cap_rings + 1):
        th = -np.pi / 2 + (np.pi / 2) * i / cap_rings
        rings.append((a, radius * np.sin(th), radius * np.cos(th)))
    # a zero-length capsule is a sphere: its two equators coincide
    for i in range(0 if length > 1e-12 else 1, cap_rings):
        th = (np.pi / 2) * i / cap_rings
        rings.append((b, radius * np.sin(th), radius * np.cos(th)))
    phi = 2 * np.pi * np.arange(around) / around
    circle = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    verts = [a - radius * u]
    for center, off, rr in rings:
        verts.extend(center + off * u + rr * circle)
    verts.append(b + radius * u)
    verts = np.array(verts)

    faces = []
    n_r = len(rings)
    top = len(verts) - 1
    ring = lambda r, j: 1 + r * around + (j % around)  # noqa: E731
    for j in range(around):
        faces.append((0, ring(0, j + 1), ring(0, j)))
        faces.append((top, ring(n_r - 1, j), ring(n_r - 1, j + 1)))
    for r in range(n_r - 1):
        for j in range(around):
            p, q = ring(r, j), ring(r, j + 1)
            s, t = ring(r + 1, j), ring(r + 1, j + 1)
            faces.append((p, q, t))
            faces.append((p, t, s))
    return verts, np.array(faces, dtype=np.int64)


def ground_truth_skinning(vertices: np.ndarray, joints: np.ndarray, bones, top_k: int = SKIN_TOP_K,
                          falloff: float = SKIN_FALLOFF) -> np.ndarray:
    """Gaussian falloff from bone segments over the ``top_k`` nearest bones.

    Each bone's weight goes to its child joint's column; normalization is done
    in log space so far-away vertices still get a valid row.
    """
    bones = np.asarray(bones)
    a, b = joints[bones[:, 0]], joints[bones[:, 1]]
    d = segment_distances(vertices, a, b)
    scale = np.maximum(falloff * np.linalg.norm(b - a, axis=1), 1e-9)
    near = np.argsort(d, axis=1, kind="stable")[:, :top_k]
    logit = -(np.take_along_axis(d, near, axis=1) / scale[near]) ** 2
    logit -= logit.max(axis=1, keepdims=True)
    w_near = np.exp(logit)
    w_near /= w_near.sum(axis=1, keepdims=True)
    w = np.zeros((len(vertices), len(joints)))
    np.put_along_axis(w, bones[near, 1], w_near, axis=1)
    return w


def generate_character(spec: CharacterSpec) -> RiggedSample:
    topo = mixamo_topology()
    joints, radii = _skeleton_layout(spec)
    n_parts = len(topo.bones) + 1
    around, cap_rings = _resolution(spec.vertex_budget, n_parts)

    verts, faces, part_faces = [], [], []
    n_v = n_f = 0
    parts = [(joints[p], joints[c], _bone_radius(topo.joint_names[c], radii)) for p, c in topo.bones]
    head = joints[topo.index("Head")]
    parts.append((head, head, 0.5))
    for a, b, r in parts:
        v, f = capsule(a, b, r, around, cap_rings)
        verts.append(v)
        faces.append(f + n_v)
        part_faces.append((n_f, n_f + len(f)))
        n_v += len(v)
        n_f += len(f)
    raw = TriMesh(np.concatenate(verts), np.concatenate(faces))
    mesh, transform = normalize_mesh(raw)
    gt_joints = transform.apply(joints)
    weights = ground_truth_skinning(mesh.vertices, gt_joints, topo.bones)
    rig = Rig(topo, gt_joints, SkinningMatrix(weights))
    camera = canonical_camera()
    j2d = synthesize_j2d(camera, gt_joints, spec.noise_sigma, [spec.seed, 1])
    return RiggedSample(mesh, camera, j2d, rig, spec, part_faces)


@dataclass
class Dataset:
    samples: list[RiggedSample]
    splits: dict[str, list[int]]

    def split(self, name: str) -> list[RiggedSample]:
        return [self.samples[i] for i in self.splits[name]]


def parse_ratio_distribution(dist: str | float) -> tuple[str, float]:
    if isinstance(dist, (int, float)):
        return "point", float(dist)
    if dist == "uniform":
        return "uniform", 0.0
    if dist.startswith("point:"):
        value = float(dist.split(":", 1)[1])
        lo, hi = RATIO_RANGE
        if not lo <= value <= hi:
            raise ValueError(f"point ratio must be in [{lo}, {hi}]")
        return "point", value
    raise ValueError(f"unknown ratio distribution '{dist}' (use 'uniform' or 'point:R')")


def split_indices(count: int, rng: np.random.Generator) -> dict[str, list[int]]:
    order = rng.permutation(count)
    n_train = int(round(0.8 * count))
    n_val = int(round(0.1 * count))
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }


def dataset_specs(count: int, ratio_distribution: str | float = "uniform", seed: int = 0,
                  **spec_overrides) -> tuple[list[CharacterSpec], dict[str, list[int]]]:
    """Per-sample specs and the split, without building any geometry."""
    kind, value = parse_ratio_distribution(ratio_distribution)
    root = np.random.SeedSequence(seed)
    split_seq, *sample_seqs = root.spawn(count + 1)
    specs = []
    for seq in sample_seqs:
        rng = np.random.default_rng(seq)
        ratio = rng.uniform(*RATIO_RANGE) if kind == "uniform" else value
        specs.append(CharacterSpec.sample(rng, ratio, **spec_overrides))
    return specs, split_indices(count, np.random.default_rng(split_seq))


def generate_dataset(count: int, ratio_distribution: str | float = "uniform", seed: int = 0,
                     **spec_overrides) -> Dataset:
    if count < 10:
        raise ValueError("a dataset needs at least 10 samples")
    specs, splits = dataset_specs(count, ratio_distribution, seed, **spec_overrides)
    return Dataset([generate_character(s) for s in specs], splits)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(dataset.samples):
        d = out / f"{i:04d}"
        d.mkdir(exist_ok=True)
        save_obj(s.mesh, d / "mesh.obj")
        save_rig(s.gt_rig, d / "rig.txt")
        save_camera(s.camera, d / "camera.txt")
        save_joints2d(s.joints2d, d / "joints2d.txt")
        (d / "meta.txt").write_text(json.dumps(asdict(s.spec)) + "\n")
    lines = [f"{name} " + " ".join(f"{i:04d}" for i in ids) for name, ids in dataset.splits.items()]
    (out / "split.txt").write_text("\n".join(lines) + "\n")


def load_sample(sample_dir: str | Path) -> RiggedSample:
    d = Path(sample_dir)
    meta = d / "meta.txt"
    spec = CharacterSpec(**json.loads(meta.read_text())) if meta.exists() else None
    return RiggedSample(load_obj(d / "mesh.obj"), load_camera(d / "camera.txt"),
                        load_joints2d(d / "joints2d.txt"), load_rig(d / "rig.txt"), spec)


def load_splits(root: str | Path) -> dict[str, list[str]]:
    splits = {}
    for line in (Path(root) / "split.txt").read_text().splitlines():
        parts = line.split()
        if parts:
            splits[parts[0]] = parts[1:]
    return splits


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    splits = load_splits(root)
    ids = sorted({i for v in splits.values() for i in v})
    pos = {sid: n for n, sid in enumerate(ids)}
    samples = [load_sample(root / sid) for sid in ids]
    return Dataset(samples, {k: [pos[i] for i in v] for k, v in splits.items()})
