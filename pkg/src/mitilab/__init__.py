"""Desk-scale transformer lab: rank collapse probes and a toy set-prediction detector.

Everything runs in float64 numpy on one core. The main entry points are
re-exported here; the command-line front end lives in :mod:`mitilab.cli`.
"""

from .attention import AttentionConfig, WiringMode, layer_forward, multi_head
from .checkpoint import load_tensors, save_tensors
from .config import ConfigError, load_config, parse_config
from .data import SceneObject, SceneSpec, generate_dataset, load_annotations, save_annotations
from .detr import ModelConfig, count_parameters, init_model, model_forward
from .gradcheck import run_gradchecks
from .kernels import BACKEND
from .matching import CostWeights, GroundTruth, giou, hungarian, match_cost, set_loss
from .metrics import Detections, coco_summary, evaluate_ap
from .optim import AdamWState, Schedule, adamw_step, lr_at, xavier_init
from .rank_probe import composite_norm, min_residual_norm, residual
from .study import CollapseSettings, run_trial
from .tensor import GradTape, NumericError, ShapeError, Tensor
from .train import TrainConfig, TrainingDiverged, train

__version__ = "0.1.0"

__all__ = [
    "AdamWState", "AttentionConfig", "BACKEND", "CollapseSettings", "ConfigError", "CostWeights",
    "Detections", "GradTape", "GroundTruth", "ModelConfig", "NumericError", "Schedule", "SceneObject",
    "SceneSpec", "ShapeError", "Tensor", "TrainConfig", "TrainingDiverged", "WiringMode", "adamw_step",
    "coco_summary", "composite_norm", "count_parameters", "evaluate_ap", "generate_dataset", "giou",
    "hungarian", "init_model", "layer_forward", "load_annotations", "load_config", "load_tensors",
    "lr_at", "match_cost", "min_residual_norm", "model_forward", "multi_head", "parse_config",
    "residual", "run_gradchecks", "run_trial", "save_annotations", "save_tensors", "set_loss",
    "train", "xavier_init",
]
