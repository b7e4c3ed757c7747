"""The full rigging network: encoders, mutual attention and the two heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import Tensor, add, exp, load_tensors, log_softmax, save_tensors
from ..geometry import segment_distances
from ..pgse import skeleton_aware_features
from ..skeleton import N_JOINTS, mixamo_topology
from .attention import MutualAttention
from .encoders import MeshEncoder, SkeletonEncoder
from .layers import MLP, LayerNorm, Module
from .pointcloud import LevelContext, build_levels


@dataclass
class NetworkConfig:
    channels: int = 64
    heads: int = 4
    depth: int = 2
    k: int = 16
    ratios: tuple[float, ...] = (0.25, 0.25)
    head_hidden: int | None = None
    n_joints: int = N_JOINTS
    seed: int = 0
    # False builds the ablation "expert": skinning straight from mesh features,
    # coarse skeleton passed through unchanged.
    use_msman: bool = True
    # skinning logits are residual on -(bone distance / falloff)^2 of the coarse
    # skeleton; 0 turns the prior off (plain learned logits)
    skin_prior_falloff: float = 0.05

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")
        if self.k < 3:
            raise ValueError("k must be at least 3")
        if self.skin_prior_falloff < 0:
            raise ValueError("skin_prior_falloff must be >= 0")
        if len(self.ratios) != self.depth or not all(0 < r < 1 for r in self.ratios):
            raise ValueError("need one downsampling ratio in (0, 1) per encoder stage")

    @property
    def head_width(self) -> int:
        return self.channels // self.heads

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NetworkInput:
    coarse: np.ndarray  # (s, 3)
    features: np.ndarray  # (m, 3 + s)
    levels: list[LevelContext] = field(repr=False)
    skin_prior: np.ndarray | None = None  # (m, s) logits, or None


PRIOR_FLOOR = -50.0


def bone_distance_prior(vertices: np.ndarray, coarse_joints: np.ndarray, falloff: float) -> np.ndarray:
    """Per-vertex logits -(distance to bone / falloff)^2, credited to each bone's child joint.

    Rows are shifted so their max is 0 and floored at PRIOR_FLOOR; the root
    column (no parent bone) sits at the floor.
    """
    bones = np.array(mixamo_topology().bones)
    d = segment_distances(vertices, coarse_joints[bones[:, 0]], coarse_joints[bones[:, 1]])
    logits = np.full((len(vertices), len(coarse_joints)), PRIOR_FLOOR)
    logits[:, bones[:, 1]] = -((d / falloff) ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    return np.maximum(logits, PRIOR_FLOOR)


def prepare_input(vertices: np.ndarray, coarse_joints: np.ndarray, config: NetworkConfig) -> NetworkInput:
    vertices = np.asarray(vertices, dtype=np.float64)
    coarse = np.asarray(coarse_joints, dtype=np.float64)
    prior = None
    if config.skin_prior_falloff > 0:
        prior = bone_distance_prior(vertices, coarse, config.skin_prior_falloff)
    return NetworkInput(
        coarse=coarse,
        features=skeleton_aware_features(vertices, coarse),
        levels=build_levels(vertices, config.ratios, config.k),
        skin_prior=prior,
    )


@dataclass
class RigPrediction:
    joints: Tensor  # (s, 3)
    skinning: Tensor  # (m, s), rows sum to 1
    log_skinning: Tensor


class RiggingNetwork(Module):
    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c, s = config.channels, config.n_joints
        self.skeleton_encoder = SkeletonEncoder(rng, c)
        self.mesh_encoder = MeshEncoder(rng, 3 + s, c, config.depth)
        self.msman = MutualAttention(rng, c, config.heads)
        self.skeleton_norm = LayerNorm(c)
        self.skeleton_head = MLP(rng, [c, config.hidden, 3], zero_last=True)
        self.skinning_norm = LayerNorm(c)
        self.skinning_head = MLP(rng, [c, config.hidden, s], zero_last=True)
        if not config.use_msman:
            # same init stream as the full model, minus the unused branches
            del self.skeleton_encoder, self.msman, self.skeleton_norm, self.skeleton_head

    def __call__(self, inp: NetworkInput) -> RigPrediction:
        coarse = Tensor(inp.coarse)
        f_m = self.mesh_encoder(Tensor(inp.features), inp.levels)
        if self.config.use_msman:
            f_s = self.skeleton_encoder(coarse)
            f_ms, f_sm = self.msman(f_s, f_m)
            joints = add(coarse, self.skeleton_head(self.skeleton_norm(f_ms)))
            logits = self.skinning_head(self.skinning_norm(f_sm))
        else:
            joints = coarse
            logits = self.skinning_head(self.skinning_norm(f_m))
        if inp.skin_prior is not None:
            logits = add(logits, Tensor(inp.skin_prior))
        log_p = log_softmax(logits, axis=-1)
        return RigPrediction(joints=joints, skinning=exp(log_p), log_skinning=log_p)


def save_model(model: RiggingNetwork, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write parameters (plus optional extra tensors) and a sidecar JSON config."""
    path = Path(path)
    tensors = model.state_dict()
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)
    path.with_suffix(".json").write_text(json.dumps(model.config.to_dict(), indent=1) + "\n")


def load_model(path: str | Path, config: NetworkConfig | None = None) -> tuple[RiggingNetwork, dict[str, np.ndarray]]:
    """Rebuild a network from a checkpoint; returns it with any non-parameter tensors."""
    path = Path(path)
    if config is None:
        config = NetworkConfig.from_dict(json.loads(path.with_suffix(".json").read_text()))
    model = RiggingNetwork(config)
    tensors = load_tensors(path)
    model.load_state_dict(tensors)
    own = {n for n, _ in model.named_parameters()}
    return model, {k: v for k, v in tensors.items() if k not in own}
