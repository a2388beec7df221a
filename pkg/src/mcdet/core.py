"""Shared domain types for grid-anchored detection.

A detector in this package predicts on a *single-scale multi-level* grid:
each pyramid level has one stride and exactly one anchor base size, and a
prediction cell at index ``i`` covers the pixel region around the cell
center ``(i + 0.5) * stride``. Boxes are parameterized relative to that
anchor by a delta vector ``w = [center offsets / base, log(size / base)]``.

Everything here is an immutable value; operations are pure functions and
are dimension-generic (2D or 3D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

OBJECT = "object"
DECOY = "decoy"


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: cells-to-pixels stride and anchor base size."""

    stride: int
    base_size: tuple[float, ...]

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not self.base_size or any(b <= 0 for b in self.base_size):
            raise ValueError(f"base_size components must be > 0, got {self.base_size}")
        object.__setattr__(self, "base_size", tuple(float(b) for b in self.base_size))


@dataclass(frozen=True)
class GridSpec:
    """Full grid geometry: image extent, pyramid levels, class count.

    Levels must be ordered by strictly increasing anchor volume, and the
    image size must be divisible by every stride so each level tiles the
    image exactly.
    """

    dims: int
    image_size: tuple[int, ...]
    levels: tuple[LevelSpec, ...]
    num_classes: int = 2

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        object.__setattr__(self, "levels", tuple(self.levels))
        if len(self.image_size) != self.dims:
            raise ValueError("image_size length must equal dims")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.levels:
            raise ValueError("at least one level required")
        for lv in self.levels:
            if len(lv.base_size) != self.dims:
                raise ValueError("level base_size length must equal dims")
            if any(s % lv.stride != 0 for s in self.image_size):
                raise ValueError(
                    f"image_size {self.image_size} not divisible by stride {lv.stride}"
                )
        volumes = [math.prod(lv.base_size) for lv in self.levels]
        if any(b <= a for a, b in zip(volumes, volumes[1:])):
            raise ValueError("levels must have strictly increasing anchor volumes")

    def level_shape(self, level: int) -> tuple[int, ...]:
        """Cell-array shape of one level (image_size / stride per dim)."""
        stride = self.levels[level].stride
        return tuple(s // stride for s in self.image_size)

    def cell_center(self, level: int, cell: Sequence[int]) -> tuple[float, ...]:
        stride = self.levels[level].stride
        return tuple((c + 0.5) * stride for c in cell)

    def check_cell(self, level: int, cell: Sequence[int]) -> None:
        if level < 0 or level >= len(self.levels):
            raise ValueError(f"level {level} out of range")
        shape = self.level_shape(level)
        if len(cell) != self.dims or any(c < 0 or c >= n for c, n in zip(cell, shape)):
            raise ValueError(f"cell {tuple(cell)} outside level-{level} grid {shape}")

    def anchor_box(self, level: int, cell: Sequence[int]) -> "Box":
        """The base-size box centered on a cell."""
        self.check_cell(level, cell)
        return Box(self.cell_center(level, cell), self.levels[level].base_size)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and per-dimension size, in pixels."""

    center: tuple[float, ...]
    size: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.center) != len(self.size):
            raise ValueError("center and size must have equal length")
        if any(s <= 0 for s in self.size):
            raise ValueError(f"size components must be > 0, got {self.size}")

    @property
    def low(self) -> tuple[float, ...]:
        return tuple(c - s / 2 for c, s in zip(self.center, self.size))

    @property
    def high(self) -> tuple[float, ...]:
        return tuple(c + s / 2 for c, s in zip(self.center, self.size))

    def volume(self) -> float:
        return math.prod(self.size)

    def clipped(self, image_size: Sequence[int], min_size: float = 1e-6) -> "Box":
        """Intersect with the image rectangle, keeping size positive."""
        center, size = [], []
        for lo, hi, bound in zip(self.low, self.high, image_size):
            lo = min(max(lo, 0.0), bound - min_size)
            hi = max(min(hi, float(bound)), lo + min_size)
            center.append((lo + hi) / 2)
            size.append(hi - lo)
        return Box(tuple(center), tuple(size))


@dataclass(frozen=True)
class CellOutput:
    """Raw per-cell prediction: class probabilities, predictive variances
    (one non-negative component per class), and box deltas."""

    prob: tuple[float, ...]
    pred_var: tuple[float, ...]
    deltas: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "prob", tuple(float(p) for p in self.prob))
        object.__setattr__(self, "pred_var", tuple(float(v) for v in self.pred_var))
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if abs(sum(self.prob) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {sum(self.prob)!r}")
        if any(p < 0 or p > 1 for p in self.prob):
            raise ValueError(f"probabilities must lie in [0, 1], got {self.prob}")
        if any(v < 0 for v in self.pred_var):
            raise ValueError(f"predictive variances must be >= 0, got {self.pred_var}")


@dataclass
class LevelOutput:
    """Dense per-cell outputs of one level for one forward pass.

    Shapes: ``prob`` and ``pred_var`` are ``cells + (num_classes,)``,
    ``deltas`` is ``cells + (2 * dims,)`` where ``cells`` is the level's
    cell-array shape.
    """

    prob: np.ndarray
    pred_var: np.ndarray
    deltas: np.ndarray


@dataclass
class PassGrid:
    """All raw outputs of a single stochastic forward pass over one scan."""

    scan_id: str
    pass_index: int
    levels: list[LevelOutput]

    def validate(self, grid: GridSpec) -> None:
        if len(self.levels) != len(grid.levels):
            raise ValueError(
                f"pass has {len(self.levels)} levels, grid expects {len(grid.levels)}"
            )
        for li, out in enumerate(self.levels):
            cells = grid.level_shape(li)
            if out.prob.shape != cells + (grid.num_classes,):
                raise ValueError(f"level {li} prob shape {out.prob.shape} invalid")
            if out.pred_var.shape != cells + (grid.num_classes,):
                raise ValueError(f"level {li} pred_var shape {out.pred_var.shape} invalid")
            if out.deltas.shape != cells + (2 * grid.dims,):
                raise ValueError(f"level {li} deltas shape {out.deltas.shape} invalid")

    def cell_output(self, level: int, cell: Sequence[int]) -> CellOutput:
        out = self.levels[level]
        idx = tuple(cell)
        return CellOutput(
            prob=tuple(out.prob[idx]),
            pred_var=tuple(out.pred_var[idx]),
            deltas=tuple(out.deltas[idx]),
        )


@dataclass(frozen=True)
class Detection:
    """A decoded box with its probability and fused uncertainty.

    ``v_avg`` is always recomputed as ``(v_mc + v_pred) / 2`` so the fused
    value is bit-identical to the definition no matter how the detection
    was constructed.
    """

    scan_id: str
    box: Box
    prob: float
    v_mc: float
    v_pred: float
    level: int
    cell: tuple[int, ...]
    v_avg: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "cell", tuple(int(c) for c in self.cell))
        for name in ("prob", "v_mc", "v_pred"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"prob must lie in [0, 1], got {self.prob!r}")
        if not 0.0 <= self.v_mc <= 0.25 + 1e-12:
            raise ValueError(f"v_mc must lie in [0, 0.25], got {self.v_mc!r}")
        if self.v_pred < 0.0:
            raise ValueError(f"v_pred must be >= 0, got {self.v_pred!r}")
        object.__setattr__(self, "v_avg", (self.v_mc + self.v_pred) / 2)


def encode_deltas(
    gt_box: Box, level: LevelSpec, cell: Sequence[int], grid: GridSpec
) -> tuple[float, ...]:
    """Encode a box relative to a cell's anchor.

    Returns ``[(gt_center - cell_center) / base, ...] + [log(gt_size / base), ...]``.
    """
    level_index = grid.levels.index(level)
    grid.check_cell(level_index, cell)
    center = grid.cell_center(level_index, cell)
    offs = tuple(
        (g - c) / b for g, c, b in zip(gt_box.center, center, level.base_size)
    )
    scales = tuple(math.log(g / b) for g, b in zip(gt_box.size, level.base_size))
    return offs + scales


def decode_deltas(
    deltas: Sequence[float], level: LevelSpec, cell: Sequence[int], grid: GridSpec
) -> Box:
    """Exact inverse of :func:`encode_deltas`, clipped to the image."""
    if not all(math.isfinite(d) for d in deltas):
        raise ValueError(f"deltas must be finite, got {tuple(deltas)}")
    d = grid.dims
    if len(deltas) != 2 * d:
        raise ValueError(f"expected {2 * d} delta components, got {len(deltas)}")
    level_index = grid.levels.index(level)
    grid.check_cell(level_index, cell)
    cc = grid.cell_center(level_index, cell)
    center = tuple(c + w * b for c, w, b in zip(cc, deltas[:d], level.base_size))
    size = tuple(b * math.exp(w) for w, b in zip(deltas[d:], level.base_size))
    return Box(center, size).clipped(grid.image_size)


def iou(a: Box, b: Box) -> float:
    """Intersection volume over union volume; 0 for disjoint boxes."""
    inter = 1.0
    for alo, ahi, blo, bhi in zip(a.low, a.high, b.low, b.high):
        overlap = min(ahi, bhi) - max(alo, blo)
        if overlap <= 0.0:
            return 0.0
        inter *= overlap
    return inter / (a.volume() + b.volume() - inter)


def _ranked_anchor_cells(box: Box, grid: GridSpec) -> list[tuple[float, int, tuple[int, ...]]]:
    ranked = []
    for li in range(len(grid.levels)):
        for cell in product(*(range(n) for n in grid.level_shape(li))):
            ranked.append((-iou(grid.anchor_box(li, cell), box), li, cell))
    ranked.sort()
    return ranked


def best_anchor_cell(box: Box, grid: GridSpec) -> tuple[int, tuple[int, ...], float]:
    """The (level, cell) whose anchor box has maximal IoU with ``box``.

    Scans every cell of every level; ties resolve to the lexicographically
    first (level, cell).
    """
    neg_score, li, cell = _ranked_anchor_cells(box, grid)[0]
    return li, cell, -neg_score


def assign_anchor_cells(
    boxes: Sequence[Box], grid: GridSpec
) -> list[tuple[int, tuple[int, ...]]]:
    """One anchor cell per box, each box taking its best-IoU cell.

    When two boxes want the same cell the higher IoU wins and the loser
    falls back to its next-best free cell.
    """
    ranked = [_ranked_anchor_cells(box, grid) for box in boxes]
    assigned: list[tuple[int, tuple[int, ...]] | None] = [None] * len(boxes)
    owner: dict[tuple[int, tuple[int, ...]], int] = {}
    pending = list(range(len(boxes)))
    cursor = [0] * len(boxes)
    while pending:
        bi = pending.pop()
        while cursor[bi] < len(ranked[bi]):
            neg_score, li, cell = ranked[bi][cursor[bi]]
            key = (li, cell)
            holder = owner.get(key)
            if holder is None:
                owner[key] = bi
                assigned[bi] = key
                break
            holder_score = -ranked[holder][cursor[holder]][0]
            if -neg_score > holder_score:
                # evict the weaker holder; it resumes from its next candidate
                owner[key] = bi
                assigned[bi] = key
                assigned[holder] = None
                cursor[holder] += 1
                pending.append(holder)
                break
            cursor[bi] += 1
        else:
            raise ValueError("more boxes than anchor cells; cannot assign")
    assert all(a is not None for a in assigned)
    return assigned  # type: ignore[return-value]
