"""Triangle meshes, pinhole cameras and ray casting.

Everything here works in float64 and treats its value types as immutable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Hits closer than this along a ray are considered the same hit.
HIT_MERGE_TOL = 1e-9


class MeshError(ValueError):
    pass


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (m, 3) float64
    faces: np.ndarray  # (f, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("mesh has non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range [0, {len(v)})")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps original coordinates into the normalized box: ``p' = scale * (p + offset)``."""

    scale: float
    offset: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) + self.offset)

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.offset


def load_obj(path: str | Path) -> TriMesh:
    """Read ``v`` and ``f`` records from an OBJ file.

    Polygons are fan-triangulated; texture/normal indices after slashes and
    negative (relative) indices are accepted.
    """
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(vertices) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    for a, b in zip(idx[1:-1], idx[2:]):
                        faces.append((idx[0], a, b))
            except ValueError as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from None
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path: str | Path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize_mesh(mesh: TriMesh) -> tuple[TriMesh, NormalizationTransform]:
    """Center the mesh bounding box at the origin and scale its longest side to 1."""
    lo, hi = mesh.bounds()
    extent = float((hi - lo).max())
    if not extent > 0:
        raise MeshError("degenerate mesh: zero extent on all axes")
    transform = NormalizationTransform(scale=1.0 / extent, offset=-(lo + hi) / 2.0)
    return TriMesh(transform.apply(mesh.vertices), mesh.faces), transform


def _rotation_is_valid(r: np.ndarray) -> bool:
    return np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0) and np.linalg.det(r) > 0


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera, (3, 3)
    translation: np.ndarray  # (3,)
    projection: np.ndarray = field(init=False, repr=False)  # M, (3, 4)
    pseudo_inverse: np.ndarray = field(init=False, repr=False)  # P_c, (4, 3)
    center: np.ndarray = field(init=False, repr=False)  # X_c, (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not _rotation_is_valid(r):
            raise CameraError("camera rotation is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        k = np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
        m = k @ np.hstack([r, t[:, None]])
        # M has full row rank, so M^T (M M^T)^-1 is a right inverse.
        p = m.T @ np.linalg.inv(m @ m.T)
        for name, arr in (("rotation", r), ("translation", t), ("projection", m),
                          ("pseudo_inverse", p), ("center", -r.T @ t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.rotation[2]

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, cx, cy) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        return cls(fx, fy, cx, cy, r, -r @ eye)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            rot = np.asarray(d["rotation"], dtype=np.float64)
            trans = np.asarray(d["translation"], dtype=np.float64)
            if rot.size != 9 or trans.size != 3:
                raise CameraError("rotation needs 9 numbers and translation 3")
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), rot, trans)
        except KeyError as exc:
            raise CameraError(f"camera is missing field {exc}") from None


def save_camera(camera: CameraModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=1) + "\n")


def load_camera(path: str | Path) -> CameraModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CameraError(f"{path}: {exc}") from None
    return CameraModel.from_dict(data)


def project_points(camera: CameraModel, points) -> np.ndarray:
    """Pinhole projection ``dehomogenize(M @ [p, 1])`` of an (n, 3) array."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = pts @ camera.projection[:, :3].T + camera.projection[:, 3]
    w = h[:, 2]
    if np.any(np.abs(w) < 1e-12):
        bad = int(np.flatnonzero(np.abs(w) < 1e-12)[0])
        raise CameraError(f"point {bad} lies on the camera plane and cannot be projected")
    return h[:, :2] / w[:, None]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def point(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=np.float64)
        return self.origin + mu[..., None] * self.direction

    def distance_to(self, p) -> float:
        """Perpendicular distance from ``p`` to the infinite line carrying the ray."""
        v = np.asarray(p, dtype=np.float64) - self.origin
        return float(np.linalg.norm(v - (v @ self.direction) * self.direction))


def back_project_ray(camera: CameraModel, j2d) -> Ray:
    """Ray from the camera center through image point ``j2d``.

    The homogeneous line ``P_c @ [u, v, 1] + mu * [X_c, 1]`` is converted to
    Euclidean form and oriented towards the scene.
    """
    a = camera.pseudo_inverse @ np.array([j2d[0], j2d[1], 1.0])
    direction = a[:3] - a[3] * camera.center
    if direction @ camera.forward < 0:
        direction = -direction
    return Ray(camera.center, direction)


def ray_mesh_intersections(mesh: TriMesh, ray: Ray, eps: float = 1e-12) -> list[tuple[float, np.ndarray]]:
    """All hits of ``ray`` with the mesh in front of its origin, sorted by distance.

    Vectorized Moller-Trumbore over every face; barycentric bounds are
    inclusive, and hits on shared edges/vertices are merged by distance.
    """
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        return []
    p0 = v[f[:, 0]]
    e1 = v[f[:, 1]] - p0
    e2 = v[f[:, 2]] - p0
    d = ray.direction
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    tvec = ray.origin - p0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    w = (qvec @ d) * inv
    mu = np.einsum("ij,ij->i", e2, qvec) * inv
    tol = 1e-12
    hit = ok & (u >= -tol) & (w >= -tol) & (u + w <= 1.0 + tol) & (mu > eps)
    mus = np.sort(mu[hit])
    if mus.size == 0:
        return []
    keep = np.concatenate([[True], np.diff(mus) >= HIT_MERGE_TOL])
    mus = mus[keep]
    return [(float(m), ray.point(m)) for m in mus]


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each of ``points`` (n, 3) to each segment a[k]-b[k], shape (n, K)."""
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=1), 1e-30)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(axis=-1) / denom[None], 0.0, 1.0)
    # endpoint-exact interpolation: t=0 gives a, t=1 gives b bit for bit
    closest = (1.0 - t[..., None]) * a[None] + t[..., None] * b[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)
