"""Instance-level uncertainty estimation for single-scale multi-level
grid detectors: MC-dropout sampling, in-place aggregation of Monte Carlo
detection samples, and FROC/CPM evaluation with uncertainty filtering."""

from .core import (
    DECOY,
    OBJECT,
    Box,
    CellOutput,
    Detection,
    GridSpec,
    LevelOutput,
    LevelSpec,
    PassGrid,
    assign_anchor_cells,
    best_anchor_cell,
    decode_deltas,
    encode_deltas,
    iou,
)
from .aggregate import (
    AggregationConfig,
    aggregate_in_place,
    filter_by_uncertainty,
    mc_variance,
    nms,
    pred_variance,
)
from .metrics import (
    DEFAULT_FP_RATES,
    EvalConfig,
    MatchResult,
    SweepResult,
    cpm,
    f1_at,
    froc,
    match_detections,
    search_uncertainty_percentile,
    select_uncertainty_threshold,
    sweep,
)
from .micronet import (
    MicroNet,
    NoiseSampler,
    TrainConfig,
    TrainingError,
    attenuated_cls_loss,
    ce_loss,
    infer_deterministic,
    match_anchors,
    mc_infer,
    smooth_l1,
    train,
)
from .synthdata import (
    generate_scenes,
    Scene,
    SceneCapacityError,
    SimulatorConfig,
    generate_scene,
    simulate_mc_passes,
)

__version__ = "0.1.0"

__all__ = [
    "AggregationConfig",
    "Box",
    "CellOutput",
    "DECOY",
    "DEFAULT_FP_RATES",
    "Detection",
    "EvalConfig",
    "GridSpec",
    "LevelOutput",
    "LevelSpec",
    "MatchResult",
    "MicroNet",
    "NoiseSampler",
    "OBJECT",
    "PassGrid",
    "Scene",
    "SceneCapacityError",
    "SimulatorConfig",
    "SweepResult",
    "TrainConfig",
    "TrainingError",
    "aggregate_in_place",
    "assign_anchor_cells",
    "attenuated_cls_loss",
    "best_anchor_cell",
    "ce_loss",
    "cpm",
    "decode_deltas",
    "encode_deltas",
    "f1_at",
    "filter_by_uncertainty",
    "froc",
    "generate_scene",
    "infer_deterministic",
    "iou",
    "match_anchors",
    "match_detections",
    "mc_infer",
    "mc_variance",
    "nms",
    "pred_variance",
    "search_uncertainty_percentile",
    "select_uncertainty_threshold",
    "simulate_mc_passes",
    "smooth_l1",
    "sweep",
    "train",
]
