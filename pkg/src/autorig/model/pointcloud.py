"""Non-differentiable point-set indexing: farthest point sampling, kNN, interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


def farthest_point_sample(points: np.ndarray, n_samples: int) -> np.ndarray:
    """Greedy FPS; starts at the point farthest from the centroid.

    The start point depends only on the geometry, so permuting the input
    permutes the selection the same way (up to exact distance ties, which
    go to the lowest index).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    n_samples = min(n_samples, n)
    centroid = pts.mean(axis=0)
    first = int(np.argmax(((pts - centroid) ** 2).sum(axis=1)))
    chosen = np.empty(n_samples, dtype=np.int64)
    chosen[0] = first
    dist = ((pts - pts[first]) ** 2).sum(axis=1)
    for i in range(1, n_samples):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn(reference: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Indices into ``reference`` of each query point's ``k`` nearest neighbours, (q, k)."""
    if k > len(reference):
        raise ValueError(f"need at least {k} reference points, got {len(reference)}")
    _, idx = cKDTree(reference).query(query, k=k)
    return np.asarray(idx, dtype=np.int64).reshape(len(query), k)


def interpolation_weights(coarse: np.ndarray, fine: np.ndarray, k: int = 3, eps: float = 1e-8):
    """Inverse-distance weights over the ``k`` nearest coarse points of each fine point."""
    k = min(k, len(coarse))
    dist, idx = cKDTree(coarse).query(fine, k=k)
    dist = np.asarray(dist).reshape(len(fine), k)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(fine), k)
    w = 1.0 / (dist + eps)
    return idx, w / w.sum(axis=1, keepdims=True)


@dataclass
class LevelContext:
    positions: np.ndarray  # (n, 3)
    neighbors: np.ndarray  # (n, k) kNN within this level (self included)
    down_index: np.ndarray | None = None  # (n, k) into the previous (finer) level
    down_offsets: np.ndarray | None = None  # (n, k, 3) finer minus kept positions
    up_index: np.ndarray | None = None  # (n_finer, 3) into this level
    up_weights: np.ndarray | None = None  # (n_finer, 3)
    rel: np.ndarray | None = None  # (n, k, 3) neighbor minus center positions


def build_levels(positions: np.ndarray, ratios, k: int) -> list[LevelContext]:
    """Precompute the sampling hierarchy the U-shaped encoder runs over."""
    pos = np.asarray(positions, dtype=np.float64)
    if len(pos) < k:
        raise ValueError(f"mesh has {len(pos)} vertices; the encoder needs at least k={k}")
    levels = []
    kk = min(k, len(pos))
    nb = knn(pos, pos, kk)
    levels.append(LevelContext(pos, nb, rel=pos[nb] - pos[:, None, :]))
    for r in ratios:
        prev = levels[-1].positions
        n_next = max(1, int(np.ceil(len(prev) * r)))
        keep = farthest_point_sample(prev, n_next)
        cur = prev[keep]
        kk = min(k, len(cur))
        nb = knn(cur, cur, kk)
        down = knn(prev, cur, min(k, len(prev)))
        up_idx, up_w = interpolation_weights(cur, prev)
        levels.append(LevelContext(cur, nb, down, prev[down] - cur[:, None, :], up_idx, up_w,
                                   rel=cur[nb] - cur[:, None, :]))
    return levels
