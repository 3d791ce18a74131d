"""Structure inference detector on synthetic contextual scenes.

A toy two-stage detector whose second stage is a detection graph: one node per
proposal plus a whole-scene node, scalar edges gated by spatial and appearance
cues, and GRU memory cells that fold scene context and neighbor messages into
every node state over a few inference steps. Trains end to end with
hand-derived gradients; ships with metrics, gradient checking, and a
four-arm ablation harness.
"""

from .geometry import Box, apply_deltas, clip_box, encode_deltas, iou, nms, spatial_relation
from .memory_cell import GruParams, create_gru_params, gru_backward, gru_forward
from .numerics import (CheckpointError, Param, ParamStore, ShapeError,
                       derive_seed, grad_check, init_param, load_checkpoint,
                       save_checkpoint, seed_for)
from .structure_inference import (SceneGraph, SinParams, compute_edges,
                                  create_sin_params, edge_weight,
                                  integrate_messages, relation_report,
                                  sin_backward, sin_infer, sin_step)
from .synth_data import (Category, CooccurRule, GtObject, SceneSample,
                         WorldSpec, default_world, generate, load_dataset,
                         sample_at, save_dataset, world_hash)
from .detector import (ARMS, Detection, DetectorParams, TrainConfig,
                       TrainingDiverged, assign_targets, create_detector_params,
                       detect, extract_node_feature, extract_scene_feature,
                       forward, multi_task_loss, propose, train)
from .evaluation import (EvalResult, average_precision, evaluate_detections,
                         fp_breakdown, map_at, pr_curve, run_ablation)
from .harness import EvalConfig, RunConfig, main, run_gradcheck

__version__ = "0.1.0"

__all__ = [
    "ARMS", "Box", "Category", "CheckpointError", "CooccurRule", "Detection",
    "DetectorParams", "EvalConfig", "EvalResult", "GruParams", "GtObject",
    "Param", "ParamStore", "RunConfig", "SceneGraph", "SceneSample",
    "ShapeError", "SinParams", "TrainConfig", "TrainingDiverged", "WorldSpec",
    "apply_deltas", "assign_targets", "average_precision", "clip_box",
    "compute_edges", "create_detector_params", "create_gru_params",
    "create_sin_params", "default_world", "derive_seed", "detect",
    "edge_weight", "encode_deltas", "evaluate_detections",
    "extract_node_feature", "extract_scene_feature", "forward", "fp_breakdown",
    "generate", "grad_check", "gru_backward", "gru_forward", "init_param",
    "integrate_messages", "iou", "load_checkpoint", "load_dataset", "main",
    "map_at", "multi_task_loss", "nms", "pr_curve", "propose",
    "relation_report", "run_ablation", "run_gradcheck", "sample_at",
    "save_checkpoint", "save_dataset", "seed_for", "sin_backward", "sin_infer",
    "sin_step", "spatial_relation", "train", "world_hash",
]
