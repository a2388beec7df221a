"""Synthetic scenes and a simulated stochastic detector.

Scenes hold bright Gaussian blobs of two kinds: true objects and decoys.
Decoys are rendered to look like objects (overlapping intensity ranges,
a subtle central dimple) so a detector genuinely struggles to tell them
apart, which is exactly the ambiguity the uncertainty machinery is meant
to expose.

``simulate_mc_passes`` stands in for a dropout network at test time: it
emits per-cell probabilities, predictive variances, and deltas for each
stochastic pass, with decoys carrying extra across-pass probability jitter
(raising their MC variance) and a larger foreground variance output
(raising their predictive variance). This gives aggregation and evaluation
a fully controlled harness with known ground truth for both uncertainty
channels.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DECOY,
    OBJECT,
    Box,
    GridSpec,
    LevelOutput,
    PassGrid,
    assign_anchor_cells,
    encode_deltas,
)


class SceneCapacityError(RuntimeError):
    """Raised when blob placement cannot satisfy the no-overlap rule."""


@dataclass
class Scene:
    scan_id: str
    image: np.ndarray                 # (H, W) float64 in [0, 1]
    gt: list[tuple[Box, str]]         # (box, kind) with kind OBJECT or DECOY

    def object_boxes(self) -> list[Box]:
        return [box for box, kind in self.gt if kind == OBJECT]


@dataclass(frozen=True)
class SimulatorConfig:
    passes: int = 10
    object_prob_mean: float = 0.9
    object_prob_std: float = 0.03
    decoy_prob_mean: float = 0.62
    decoy_prob_std: float = 0.05
    decoy_extra_noise: float = 0.18   # per-pass jitter added to decoy probabilities
    background_fp_rate: float = 6.0   # expected persistent false-positive cells per scan
    rng_seed: int = 0

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        for name in ("object_prob_std", "decoy_prob_std", "decoy_extra_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("object_prob_mean", "decoy_prob_mean"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.background_fp_rate < 0:
            raise ValueError("background_fp_rate must be >= 0")


MIN_BLOB_SIZE = 6.0
MAX_BLOB_FRACTION = 1.0  # of the largest anchor base
PLACEMENT_ATTEMPTS = 1000

# simulated variance head: per-class sigma^2 around a common background
# level, with the foreground component offset by a per-kind gap. Decoys
# split into two uncertainty modes so the MC and predictive channels carry
# complementary information: jitter-mode decoys fluctuate across passes but
# emit an object-like variance head, variance-mode decoys are steady across
# passes but emit a large foreground variance.
SIM_SIGMA_BG = 1.0
SIM_OBJECT_SIGMA_GAP = -0.9
SIM_DECOY_MC_SIGMA_GAP = (-0.8, -0.4)
SIM_DECOY_PRED_SIGMA_GAP = (0.8, 1.4)
SIM_BG_FP_SIGMA_GAP = (0.3, 0.9)
SIM_DECOY_PRED_MODE_FRACTION = 0.5
# per-instance difficulty: a fixed offset of the instance's base probability,
# constant across passes, so hard objects overlap the false-positive range
SIM_OBJECT_INSTANCE_STD = 0.12
SIM_DECOY_INSTANCE_STD = 0.08

# blob appearance: object peaks span bright-to-dim and are smooth. Half the
# decoys are exact twins of the dim object band (irreducibly ambiguous, so
# no amount of training can reject them without losing dim objects); the
# other half carry a learnable center dimple plus high-frequency speckle.
OBJECT_PEAK_RANGE = (0.55, 1.0)
DECOY_TWIN_FRACTION = 0.2
DECOY_TWIN_PEAK_RANGE = (0.55, 0.75)
DECOY_PEAK_RANGE = (0.55, 0.85)
DECOY_DIMPLE_RANGE = (0.25, 0.5)
DECOY_SPECKLE_STD = 0.1


def _boxes_too_close(a: Box, b: Box, margin: float) -> bool:
    # True when the margin-grown boxes still intersect in every dimension
    for alo, ahi, blo, bhi in zip(a.low, a.high, b.low, b.high):
        if min(ahi, bhi) + margin > max(alo, blo) - margin:
            continue
        return False
    return True


def _render_blob(
    image: np.ndarray,
    box: Box,
    peak: float,
    dimple: float,
    speckle: np.ndarray | None = None,
) -> None:
    h, w = image.shape
    cy, cx = box.center
    sy, sx = box.size[0] / 4.0, box.size[1] / 4.0
    yy = (np.arange(h)[:, None] - cy) / sy
    xx = (np.arange(w)[None, :] - cx) / sx
    r2 = yy**2 + xx**2
    envelope = np.exp(-r2 / 2.0)
    bump = peak * envelope
    if dimple > 0.0:
        bump *= 1.0 - dimple * np.exp(-r2 / (2.0 * 0.45**2))
    if speckle is not None:
        bump += speckle * envelope
    np.maximum(image, bump, out=image)


def generate_scene(
    grid: GridSpec,
    n_objects: int,
    n_decoys: int,
    seed: int,
    scan_id: str | None = None,
) -> Scene:
    """Render one deterministic scene with disjoint object and decoy blobs.

    Placement rejects any blob overlapping an earlier one (with margin), so
    object boxes have pairwise IoU exactly 0; a blob that cannot be placed
    within the attempt budget raises :class:`SceneCapacityError`.
    """
    if grid.dims != 2:
        raise ValueError("scene generation supports 2D grids only")
    rng = np.random.default_rng(seed)
    h, w = grid.image_size
    if scan_id is None:
        scan_id = f"scan-{seed}"

    # gentle background texture, clearly below blob intensities
    yy, xx = np.mgrid[0:h, 0:w]
    image = 0.06 + 0.02 * np.sin(xx / w * 2.6 + rng.uniform(0, 6.28)) * np.cos(
        yy / h * 2.2 + rng.uniform(0, 6.28)
    )
    image += rng.normal(0.0, 0.012, size=(h, w))

    max_side = MAX_BLOB_FRACTION * max(max(lv.base_size) for lv in grid.levels)
    kinds = [OBJECT] * n_objects + [DECOY] * n_decoys
    placed: list[Box] = []
    gt: list[tuple[Box, str]] = []
    for kind in kinds:
        for attempt in range(PLACEMENT_ATTEMPTS + 1):
            if attempt == PLACEMENT_ATTEMPTS:
                raise SceneCapacityError(
                    f"could not place {kind} blob after {PLACEMENT_ATTEMPTS} attempts"
                )
            side = rng.uniform(MIN_BLOB_SIZE, max_side)
            aspect = rng.uniform(0.9, 1.1)
            size = (side * aspect, side / aspect)
            margin = 3.0
            center = tuple(
                rng.uniform(s / 2 + margin, bound - s / 2 - margin)
                for s, bound in zip(size, (h, w))
            )
            box = Box(center, size)
            if all(not _boxes_too_close(box, other, margin=3.0) for other in placed):
                placed.append(box)
                break
        if kind == OBJECT:
            peak = rng.uniform(*OBJECT_PEAK_RANGE)
            dimple = 0.0
            speckle = None
        elif rng.uniform() < DECOY_TWIN_FRACTION:
            peak = rng.uniform(*DECOY_TWIN_PEAK_RANGE)
            dimple = 0.0
            speckle = None
        else:
            peak = rng.uniform(*DECOY_PEAK_RANGE)
            dimple = rng.uniform(*DECOY_DIMPLE_RANGE)
            speckle = rng.normal(0.0, DECOY_SPECKLE_STD, size=(h, w))
        _render_blob(image, box, peak, dimple, speckle)
        gt.append((box, kind))

    np.clip(image, 0.0, 1.0, out=image)
    return Scene(scan_id=scan_id, image=image, gt=gt)


def generate_scenes(
    grid: GridSpec,
    n_scenes: int,
    n_objects: int,
    n_decoys: int,
    seed: int,
    prefix: str = "scan",
) -> list[Scene]:
    """Deterministic scene corpus; rare placement failures skip to the next
    seed in the stream, so the corpus depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    scenes: list[Scene] = []
    consecutive_failures = 0
    while len(scenes) < n_scenes:
        scene_seed = int(rng.integers(2**63))
        try:
            scenes.append(
                generate_scene(
                    grid, n_objects, n_decoys, scene_seed,
                    scan_id=f"{prefix}-{len(scenes):04d}",
                )
            )
            consecutive_failures = 0
        except SceneCapacityError:
            consecutive_failures += 1
            if consecutive_failures > 50:
                raise
    return scenes


def _scan_stream(cfg: SimulatorConfig, scan_id: str) -> np.random.Generator:
    # stable across processes: fold the scan id into the seed via CRC32
    return np.random.default_rng(
        np.random.SeedSequence([cfg.rng_seed, zlib.crc32(scan_id.encode("utf-8"))])
    )


def simulate_mc_passes(
    scene: Scene, grid: GridSpec, cfg: SimulatorConfig
) -> list[PassGrid]:
    """Emit ``cfg.passes`` aligned pass grids for one scene.

    Each true-object or decoy instance lands on its best-matching anchor
    cell. Object cells draw per-pass foreground probability from
    N(object_prob_mean, object_prob_std) with a quiet variance head. Decoys
    split evenly into two uncertainty modes: jitter-mode decoys add
    N(0, decoy_extra_noise) per pass (high across-pass variance, object-like
    variance head), variance-mode decoys hold a steady probability but emit
    a large foreground variance. Background cells stay near zero probability
    except for a Poisson number of persistent false-positive cells, which
    carry moderate jitter and a moderately raised variance head.
    Deterministic given (scene, cfg).
    """
    rng = _scan_stream(cfg, scene.scan_id)
    t_passes = cfg.passes
    shapes = [grid.level_shape(li) for li in range(len(grid.levels))]

    # raw per-pass buffers, filled background-first then instances
    fg_prob = [np.abs(rng.normal(0.012, 0.01, size=(t_passes,) + s)) for s in shapes]
    s2_fg = [np.abs(rng.normal(SIM_SIGMA_BG - 0.1, 0.05, size=(t_passes,) + s)) for s in shapes]
    s2_bg = [np.abs(rng.normal(SIM_SIGMA_BG, 0.05, size=(t_passes,) + s)) for s in shapes]
    deltas = [
        rng.normal(0.0, 0.05, size=(t_passes,) + s + (2 * grid.dims,)) for s in shapes
    ]

    taken: set[tuple[int, tuple[int, ...]]] = set()
    boxes = [box for box, _ in scene.gt]
    cells = assign_anchor_cells(boxes, grid)
    for (box, kind), (level, cell) in zip(scene.gt, cells):
        taken.add((level, cell))
        if kind == OBJECT:
            base = rng.normal(cfg.object_prob_mean, SIM_OBJECT_INSTANCE_STD)
            draws = rng.normal(base, cfg.object_prob_std, t_passes)
            gap = SIM_OBJECT_SIGMA_GAP
        elif rng.uniform() < SIM_DECOY_PRED_MODE_FRACTION:
            # variance-mode decoy: steady probability, loud variance head
            base = rng.normal(cfg.decoy_prob_mean, SIM_DECOY_INSTANCE_STD)
            draws = rng.normal(base, cfg.object_prob_std, t_passes)
            gap = rng.uniform(*SIM_DECOY_PRED_SIGMA_GAP)
        else:
            # jitter-mode decoy: noisy probability, object-like variance head
            base = rng.normal(cfg.decoy_prob_mean, SIM_DECOY_INSTANCE_STD)
            draws = rng.normal(base, cfg.decoy_prob_std, t_passes)
            draws = draws + rng.normal(0.0, cfg.decoy_extra_noise, t_passes)
            gap = rng.uniform(*SIM_DECOY_MC_SIGMA_GAP)
        idx = (slice(None),) + cell
        fg_prob[level][idx] = np.clip(draws, 0.0, 1.0)
        s2_bg[level][idx] = np.abs(rng.normal(SIM_SIGMA_BG, 0.05, t_passes))
        s2_fg[level][idx] = np.abs(rng.normal(SIM_SIGMA_BG + gap, 0.05, t_passes))
        target = np.asarray(encode_deltas(box, grid.levels[level], cell, grid))
        deltas[level][idx] = target + rng.normal(0.0, 0.02, (t_passes, 2 * grid.dims))

    n_fp = int(rng.poisson(cfg.background_fp_rate))
    flat_cells = [
        (li, cell)
        for li, s in enumerate(shapes)
        for cell in np.ndindex(s)
        if (li, cell) not in taken
    ]
    if flat_cells and n_fp > 0:
        chosen = rng.choice(len(flat_cells), size=min(n_fp, len(flat_cells)), replace=False)
        for ci in chosen:
            li, cell = flat_cells[int(ci)]
            base = rng.uniform(0.15, 0.8)
            draws = base + rng.normal(0.0, 0.12, t_passes)
            idx = (slice(None),) + cell
            fg_prob[li][idx] = np.clip(draws, 0.0, 1.0)
            gap = rng.uniform(*SIM_BG_FP_SIGMA_GAP)
            s2_bg[li][idx] = np.abs(rng.normal(SIM_SIGMA_BG, 0.05, t_passes))
            s2_fg[li][idx] = np.abs(rng.normal(SIM_SIGMA_BG + gap, 0.05, t_passes))

    passes = []
    for t in range(t_passes):
        levels = []
        for li, s in enumerate(shapes):
            fg = np.clip(fg_prob[li][t], 0.0, 1.0)
            prob = np.stack([1.0 - fg, fg], axis=-1)
            pred_var = np.stack([s2_bg[li][t], s2_fg[li][t]], axis=-1)
            levels.append(
                LevelOutput(prob=prob, pred_var=pred_var, deltas=deltas[li][t].copy())
            )
        passes.append(PassGrid(scan_id=scene.scan_id, pass_index=t, levels=levels))
    return passes
