"""A fixed, seeded synthetic benchmark for the detector ladder.

The benchmark holds one frozen scene corpus (100 train / 20 validation /
30 test scenes) and compares three detector conditions that share
everything except the property under study:

* M1 -- cross-entropy model, single dropout-free pass at test time;
* M2 -- the same trained model, T-pass MC-dropout inference;
* M3 -- variance-attenuated model, T-pass MC-dropout inference.

Each trained model is checkpoint-selected on validation CPM over a small
epoch grid, so the two loss regimes are compared at their own best
convergence points rather than at an arbitrary shared epoch.

A second harness drives the simulated stochastic detector over the same
test scenes; it provides detections whose uncertainty channels carry
designed, known ground truth, which is what the threshold-search,
filtering, and channel-complementarity analyses consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregate import AggregationConfig, aggregate_in_place, nms
from .core import Detection, GridSpec, LevelSpec
from .metrics import DEFAULT_FP_RATES, cpm, froc, match_detections
from .micronet import MicroNet, TrainConfig, infer_deterministic, mc_infer, train
from .synthdata import Scene, SimulatorConfig, generate_scenes, simulate_mc_passes

BENCHMARK_GRID = GridSpec(
    dims=2,
    image_size=(64, 64),
    levels=(LevelSpec(4, (8.0, 8.0)), LevelSpec(8, (16.0, 16.0))),
    num_classes=2,
)

N_TRAIN, N_VAL, N_TEST = 100, 20, 30
OBJECTS_PER_SCENE = 4
DECOYS_PER_SCENE = 4
TRAIN_CORPUS_SEED = 1000
VAL_CORPUS_SEED = 3000
TEST_CORPUS_SEED = 5000

MC_PASSES = 10
LEARNING_RATE = 2e-3
EPOCH_GRID = (20, 30, 40)
CHANNELS = 8
DROPOUT = 0.1


@dataclass
class BenchmarkData:
    train_scenes: list[Scene]
    val_scenes: list[Scene]
    test_scenes: list[Scene]

    def targets(self, split: str) -> dict:
        scenes = getattr(self, f"{split}_scenes")
        return {s.scan_id: s.object_boxes() for s in scenes}


def load_benchmark_data() -> BenchmarkData:
    return BenchmarkData(
        train_scenes=generate_scenes(
            BENCHMARK_GRID, N_TRAIN, OBJECTS_PER_SCENE, DECOYS_PER_SCENE,
            TRAIN_CORPUS_SEED, prefix="train",
        ),
        val_scenes=generate_scenes(
            BENCHMARK_GRID, N_VAL, OBJECTS_PER_SCENE, DECOYS_PER_SCENE,
            VAL_CORPUS_SEED, prefix="val",
        ),
        test_scenes=generate_scenes(
            BENCHMARK_GRID, N_TEST, OBJECTS_PER_SCENE, DECOYS_PER_SCENE,
            TEST_CORPUS_SEED, prefix="test",
        ),
    )


def detect(
    net: MicroNet,
    scenes: list[Scene],
    seed: int,
    mc: bool = True,
    passes: int = MC_PASSES,
    agg: AggregationConfig | None = None,
) -> list[Detection]:
    """Run (MC or single-pass) inference plus aggregation and NMS."""
    agg = agg or AggregationConfig()
    rng = np.random.default_rng(seed)
    dets: list[Detection] = []
    for scene in scenes:
        if mc:
            grids = mc_infer(
                net, scene.image, passes, int(rng.integers(2**63)), scan_id=scene.scan_id
            )
        else:
            grids = [infer_deterministic(net, scene.image, scan_id=scene.scan_id)]
        dets.extend(nms(aggregate_in_place(grids, net.grid, agg), agg.nms_iou))
    return dets


def _cpm_of(dets, targets, fp_rates=DEFAULT_FP_RATES) -> float:
    n_gts = sum(len(b) for b in targets.values())
    return cpm(froc(match_detections(dets, targets).labeled, len(targets), n_gts), fp_rates)


def _train_with_selection(
    data: BenchmarkData, loss_kind: str, seed: int, select_mc: bool
) -> MicroNet:
    """Train to max(EPOCH_GRID), snapshot at each grid point, and return the
    snapshot with the best validation CPM (ties to the later epoch)."""
    net = MicroNet.create(BENCHMARK_GRID, CHANNELS, DROPOUT, seed)
    cfg = TrainConfig(
        loss_kind=loss_kind,
        learning_rate=LEARNING_RATE,
        epochs=max(EPOCH_GRID),
        seed=seed,
    )
    snapshots: dict[int, dict] = {}

    def snapshot(epoch: int, model: MicroNet) -> None:
        if epoch + 1 in EPOCH_GRID:
            snapshots[epoch + 1] = {k: v.copy() for k, v in model.params.items()}

    train(net, data.train_scenes, cfg, on_epoch=snapshot)
    val_targets = data.targets("val")
    best = None
    for epoch in EPOCH_GRID:
        candidate = MicroNet(BENCHMARK_GRID, CHANNELS, DROPOUT, snapshots[epoch])
        dets = detect(candidate, data.val_scenes, seed=seed + 17, mc=select_mc)
        score = _cpm_of(dets, val_targets)
        if best is None or score >= best[0]:
            best = (score, candidate)
    assert best is not None
    return best[1]


@dataclass
class LadderResult:
    """Test CPMs of the three conditions for one pipeline seed."""

    cpm_m1: float
    cpm_m2: float
    cpm_m3: float
    dets_m3: list[Detection] = field(repr=False, default_factory=list)


def run_ladder(data: BenchmarkData, seed: int) -> LadderResult:
    """Train and evaluate M1/M2/M3 for one pipeline seed."""
    test_targets = data.targets("test")
    ce_net = _train_with_selection(data, "ce", seed, select_mc=True)
    att_net = _train_with_selection(data, "attenuated", seed, select_mc=True)

    dets_m1 = detect(ce_net, data.test_scenes, seed=seed + 900, mc=False)
    dets_m2 = detect(ce_net, data.test_scenes, seed=seed + 900, mc=True)
    dets_m3 = detect(att_net, data.test_scenes, seed=seed + 900, mc=True)
    return LadderResult(
        cpm_m1=_cpm_of(dets_m1, test_targets),
        cpm_m2=_cpm_of(dets_m2, test_targets),
        cpm_m3=_cpm_of(dets_m3, test_targets),
        dets_m3=dets_m3,
    )


def simulate_detections(
    data: BenchmarkData, seed: int, split: str = "test",
    sim: SimulatorConfig | None = None,
) -> list[Detection]:
    """Detections from the simulated stochastic detector over a split."""
    sim = sim or SimulatorConfig(rng_seed=seed)
    agg = AggregationConfig(passes_expected=sim.passes)
    dets: list[Detection] = []
    for scene in getattr(data, f"{split}_scenes"):
        grids = simulate_mc_passes(scene, BENCHMARK_GRID, sim)
        dets.extend(nms(aggregate_in_place(grids, BENCHMARK_GRID, agg), agg.nms_iou))
    return dets
