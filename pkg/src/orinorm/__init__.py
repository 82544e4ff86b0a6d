"""Oriented normal estimation for point clouds.

A learned signed-surface model (local patch + global shape encoders with an
attention-weighted normal/sign head) next to the classical two-stage
baselines (PCA / jet fitting + MST orientation propagation), with angle
RMSE / PGP / AUC evaluation and a CLI.
"""

from .geometry import (KdIndex, Patch, PointCloud, add_noise, extract_patch,
                       generate_shape, load_xyz, save_xyz)
from .classical import JetCoefficients, jet_fit, jet_normal, mst_orient, pca_normal
from .model import (ModelConfig, ModelParams, OrientedNormal, init_params,
                    load_checkpoint, predict, save_checkpoint)
from .training import TrainConfig, train
from .metrics import EvalReport, angle_error, evaluate, majority_flip, pgp_auc, rmse

__version__ = "0.1.0"

__all__ = [
    "KdIndex", "Patch", "PointCloud", "add_noise", "extract_patch",
    "generate_shape", "load_xyz", "save_xyz",
    "JetCoefficients", "jet_fit", "jet_normal", "mst_orient", "pca_normal",
    "ModelConfig", "ModelParams", "OrientedNormal", "init_params",
    "load_checkpoint", "predict", "save_checkpoint",
    "TrainConfig", "train",
    "EvalReport", "angle_error", "evaluate", "majority_flip", "pgp_auc", "rmse",
]
