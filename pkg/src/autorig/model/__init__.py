"""Network parts: point-cloud indexing, encoders, mutual attention, heads and losses."""

from .losses import KL_EPS, loss_skeleton, loss_skinning, loss_skinning_forward, loss_total
from .network import (
    NetworkConfig,
    NetworkInput,
    RigPrediction,
    RiggingNetwork,
    load_model,
    prepare_input,
    save_model,
)
