"""Self-supervised dual-frame 3D fluid motion estimation.

Given two unordered particle sets, the pipeline extracts graph features,
links the frames through a relaxed entropic transport plan, reads off a
soft-correspondence flow with confidences, and refines it at test time by
optimizing a per-particle residual. Training is label-free: reconstruction,
smoothness, and a splat-based zero-divergence penalty.
"""

from .core import (
    FlowField,
    Grid,
    ParticleFrame,
    SpatialIndex,
    bounding_grid,
    build_spatial_index,
    knn,
)
from .autodiff import Tensor, backward, finite_diff_check
from .features import (
    ModelParams,
    extract_features,
    geometric_descriptor,
    init_model_params,
    load_params,
    save_params,
)
from .transport import OTConfig, TransportPlan, initial_flow, similarity_matrix, solve_transport
from .losses import (
    GridField,
    LossWeights,
    divergence_loss,
    reconstruction_loss,
    smooth_loss,
    splat,
    train_loss,
)
from .dve import DveConfig, RefinementTrace, refine
from .trainer import TrainConfig, TrainSample, forward_pipeline, sample_subset, train
from .metrics import MetricsReport, evaluate, nds
from .synth import FlowCase, beltrami_velocity, generate_pair
from .fileio import FramePairRecord, load_pair, save_pair

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "Grid",
    "ParticleFrame",
    "SpatialIndex",
    "bounding_grid",
    "build_spatial_index",
    "knn",
    "Tensor",
    "backward",
    "finite_diff_check",
    "ModelParams",
    "extract_features",
    "geometric_descriptor",
    "init_model_params",
    "load_params",
    "save_params",
    "OTConfig",
    "TransportPlan",
    "initial_flow",
    "similarity_matrix",
    "solve_transport",
    "GridField",
    "LossWeights",
    "divergence_loss",
    "reconstruction_loss",
    "smooth_loss",
    "splat",
    "train_loss",
    "DveConfig",
    "RefinementTrace",
    "refine",
    "TrainConfig",
    "TrainSample",
    "forward_pipeline",
    "sample_subset",
    "train",
    "MetricsReport",
    "evaluate",
    "nds",
    "FlowCase",
    "beltrami_velocity",
    "generate_pair",
    "FramePairRecord",
    "load_pair",
    "save_pair",
]
