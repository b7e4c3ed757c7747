"""Skeleton MLP encoder and the U-shaped point-transformer mesh encoder."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, add, concat, gather_rows, max_, mul, relu, reshape, softmax, sub, sum_
from .layers import MLP, LayerNorm, Linear, Module
from .pointcloud import LevelContext


class SkeletonEncoder(Module):
    """Per-joint 3 -> c -> c -> c MLP."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.mlp = MLP(rng, [3, channels, channels, channels])

    def __call__(self, joints: Tensor) -> Tensor:
        return self.mlp(joints)


class PointTransformerBlock(Module):
    """Vector self-attention over each point's kNN neighbourhood, with a residual.

    For point i and neighbour j the attention logits are
    ``gamma(q_i - k_j + delta_ij)``, normalized per channel over the
    neighbourhood, and they weight ``v_j + delta_ij``; ``delta`` encodes the
    relative position ``p_j - p_i``.
    """

    def __init__(self, rng: np.random.Generator, channels: int):
        c = channels
        self.norm = LayerNorm(c)
        self.proj_in = Linear(rng, c, c)
        self.query = Linear(rng, c, c)
        self.key = Linear(rng, c, c)
        self.value = Linear(rng, c, c)
        self.pos_enc = MLP(rng, [3, c, c])
        self.attn_mlp = MLP(rng, [c, c, c])
        self.proj_out = Linear(rng, c, c)
        self._last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, neighbors: np.ndarray, rel: np.ndarray) -> Tensor:
        n, k = neighbors.shape
        if x.shape[0] < k:
            raise ValueError(f"point transformer block needs at least k={k} points, got {x.shape[0]}")
        c = x.shape[1]
        h = relu(self.proj_in(self.norm(x)))
        q = reshape(self.query(h), (n, 1, c))
        kj = gather_rows(self.key(h), neighbors)
        vj = gather_rows(self.value(h), neighbors)
        delta = self.pos_enc(Tensor(rel))
        w = softmax(self.attn_mlp(add(sub(q, kj), delta)), axis=1)
        self._last_weights = w.data
        agg = sum_(mul(w, add(vj, delta)), axis=1)
        return add(x, self.proj_out(agg))


class TransitionDown(Module):
    """Max-pool finer-level features (with relative offsets) onto the kept points."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.lin = Linear(rng, channels + 3, channels)

    def __call__(self, x: Tensor, level: LevelContext) -> Tensor:
        gathered = gather_rows(x, level.down_index)
        feats = relu(self.lin(concat([gathered, Tensor(level.down_offsets)], axis=-1)))
        return max_(feats, axis=1)


class TransitionUp(Module):
    """Inverse-distance 3-NN interpolation to the finer level, plus a skip branch."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.coarse = Linear(rng, channels, channels)
        self.skip = Linear(rng, channels, channels)

    def __call__(self, coarse_x: Tensor, skip_x: Tensor, level: LevelContext) -> Tensor:
        up = relu(self.coarse(coarse_x))
        g = gather_rows(up, level.up_index)
        interp = sum_(mul(g, Tensor(level.up_weights[:, :, None])), axis=1)
        return add(interp, relu(self.skip(skip_x)))


class MeshEncoder(Module):
    def __init__(self, rng: np.random.Generator, in_features: int, channels: int, depth: int):
        self.embed = Linear(rng, in_features, channels)
        self.first = PointTransformerBlock(rng, channels)
        self.down = [TransitionDown(rng, channels) for _ in range(depth)]
        self.down_blocks = [PointTransformerBlock(rng, channels) for _ in range(depth)]
        self.up = [TransitionUp(rng, channels) for _ in range(depth)]
        self.up_blocks = [PointTransformerBlock(rng, channels) for _ in range(depth)]
        self.out_norm = LayerNorm(channels)

    def __call__(self, features: Tensor, levels: list[LevelContext]) -> Tensor:
        depth = len(self.down)
        if len(levels) != depth + 1:
            raise ValueError(f"encoder of depth {depth} needs {depth + 1} levels, got {len(levels)}")
        x = self.first(relu(self.embed(features)), levels[0].neighbors, levels[0].rel)
        skips = [x]
        for i in range(depth):
            lvl = levels[i + 1]
            x = self.down_blocks[i](self.down[i](x, lvl), lvl.neighbors, lvl.rel)
            skips.append(x)
        # up path: coarsest -> finest; output is the last up-stage result
        for i in reversed(range(depth)):
            lvl = levels[i + 1]
            fine = levels[i]
            x = self.up_blocks[i](self.up[i](x, skips[i], lvl), fine.neighbors, fine.rel)
        return self.out_norm(x)
