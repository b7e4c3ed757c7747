"""Mesh-skeleton mutual attention: two multi-head cross-attention streams."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, add, matmul, reshape, softmax, sqrt_scalar_divide, transpose
from .layers import LayerNorm, Linear, Module


class CrossAttention(Module):
    """``softmax(Q K^T / sqrt(d)) V`` with learned Q/K/V/output projections.

    Both streams are layer-normalized before projection (pre-norm), and the
    raw query stream is added back to the projected attention output.
    """

    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        if channels % heads:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.heads = heads
        self.norm_q = LayerNorm(channels)
        self.norm_kv = LayerNorm(channels)
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)
        self._last_attention: np.ndarray | None = None

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        nq, c = query.shape
        nk = context.shape[0]
        h = self.heads
        d = c // h
        qn = self.norm_q(query)
        cn = self.norm_kv(context)
        q = transpose(reshape(self.q(qn), (nq, h, d)), (1, 0, 2))  # (h, nq, d)
        k = transpose(reshape(self.k(cn), (nk, h, d)), (1, 2, 0))  # (h, d, nk)
        v = transpose(reshape(self.v(cn), (nk, h, d)), (1, 0, 2))  # (h, nk, d)
        attn = softmax(sqrt_scalar_divide(matmul(q, k), d), axis=-1)
        self._last_attention = attn.data
        o = reshape(transpose(matmul(attn, v), (1, 0, 2)), (nq, c))
        return add(query, self.out(o))


class MutualAttention(Module):
    """Skeleton features attend to the mesh and mesh features attend to the skeleton."""

    def __init__(self, rng: np.random.Generator, channels: int, heads: int):
        self.mesh_to_skeleton = CrossAttention(rng, channels, heads)
        self.skeleton_to_mesh = CrossAttention(rng, channels, heads)

    def __call__(self, f_s: Tensor, f_m: Tensor) -> tuple[Tensor, Tensor]:
        return self.mesh_to_skeleton(f_s, f_m), self.skeleton_to_mesh(f_m, f_s)
