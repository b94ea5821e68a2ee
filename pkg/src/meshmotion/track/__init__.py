"""Video tracking: motion parameterization, losses, deformation and the staged optimizer."""

from .deform import DeformedBatch, deform, deform_batch, deform_sequence
from .losses import (
    ArapGraph,
    LossError,
    arap_graph,
    cotangent_weights,
    geman_mcclure,
    loss_arap,
    loss_bending,
    loss_feature,
    loss_pose_prior,
    loss_reprojection,
    loss_silhouette,
    loss_temporal,
)
from .mapper import FeatureMapper
from .params import DirectParameterization, MotionParams, NeuralParameterization, TrackError, eval_params, positional_encoding
from .tracker import LossWeights, TrackConfig, TrackResult, track_sequence, write_track_outputs

__all__ = [
    "ArapGraph", "DeformedBatch", "DirectParameterization", "FeatureMapper", "LossError", "LossWeights", "MotionParams",
    "NeuralParameterization", "TrackConfig", "TrackError", "TrackResult", "arap_graph", "cotangent_weights", "deform",
    "deform_batch", "deform_sequence", "eval_params", "geman_mcclure", "loss_arap", "loss_bending", "loss_feature",
    "loss_pose_prior", "loss_reprojection", "loss_silhouette", "loss_temporal", "positional_encoding", "track_sequence",
    "write_track_outputs",
]  # fmt: skip
