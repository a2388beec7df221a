"""In-place aggregation of Monte Carlo detection samples.

Because every pass predicts on the same fixed grid, samples of the same
(level, cell) need no box association: probability and deltas are averaged
componentwise, the across-pass variance of the foreground probability gives
``v_mc``, and the averaged class-softmaxed variance head gives ``v_pred``.
Cells whose mean foreground probability clears a floor are decoded into
detections, merged across levels with greedy NMS, and can be filtered by
the fused uncertainty ``v_avg``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Box, Detection, GridSpec, PassGrid, decode_deltas, iou

FOREGROUND = 1  # class index of the (single) object class in binary grids


@dataclass(frozen=True)
class AggregationConfig:
    prob_floor: float = 0.1
    nms_iou: float = 0.1
    passes_expected: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.prob_floor < 1.0:
            raise ValueError(f"prob_floor must lie in [0, 1), got {self.prob_floor}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")


def mc_variance(probs: Sequence[float]) -> float:
    """Population variance of foreground probabilities across passes.

    Computed with the two-pass mean-then-squared-deviation method for
    stability; the one-pass form ``E[p^2] - E[p]^2`` is asserted to agree
    within 1e-12.
    """
    n = len(probs)
    if n == 0:
        raise ValueError("mc_variance needs at least one probability")
    mean = sum(probs) / n
    var = sum((p - mean) ** 2 for p in probs) / n
    one_pass = sum(p * p for p in probs) / n - mean * mean
    assert abs(var - one_pass) <= 1e-12, (var, one_pass)
    return var


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pred_variance(pred_vars: Sequence[Sequence[float]], fg_index: int = FOREGROUND) -> float:
    """Mean over passes of the foreground component of the class-softmaxed
    variance vector. Always lies in (0, 1)."""
    if len(pred_vars) == 0:
        raise ValueError("pred_variance needs at least one pass")
    arr = np.asarray(pred_vars, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("predictive variances must be >= 0")
    return float(_softmax(arr)[:, fg_index].mean())


def aggregate_in_place(
    passes: Sequence[PassGrid], grid: GridSpec, cfg: AggregationConfig
) -> list[Detection]:
    """Merge aligned MC passes into pre-NMS detections.

    Per cell and level: probability and deltas are averaged over passes,
    ``v_mc``/``v_pred`` come from :func:`mc_variance` and
    :func:`pred_variance`, and cells with mean foreground probability >=
    ``prob_floor`` are decoded from the *mean* deltas. Passes are reduced
    in pass-index order, so the result is bit-identical under any input
    permutation.
    """
    if not passes:
        raise ValueError("no passes to aggregate")
    scan_ids = {p.scan_id for p in passes}
    if len(scan_ids) != 1:
        raise ValueError(f"passes mix scan ids {sorted(scan_ids)}")
    indices = [p.pass_index for p in passes]
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate pass_index in aggregation input")
    if cfg.passes_expected is not None and len(passes) != cfg.passes_expected:
        raise ValueError(
            f"expected {cfg.passes_expected} passes, got {len(passes)}"
        )
    ordered = sorted(passes, key=lambda p: p.pass_index)
    for p in ordered:
        p.validate(grid)

    scan_id = ordered[0].scan_id
    detections: list[Detection] = []
    for li, level in enumerate(grid.levels):
        probs = np.stack([p.levels[li].prob for p in ordered])        # (T, *cells, C)
        pvars = np.stack([p.levels[li].pred_var for p in ordered])
        deltas = np.stack([p.levels[li].deltas for p in ordered])

        mean_fg = probs[..., FOREGROUND].mean(axis=0)
        mean_deltas = deltas.mean(axis=0)
        for cell in np.argwhere(mean_fg >= cfg.prob_floor):
            idx = tuple(int(c) for c in cell)
            sel = (slice(None),) + idx
            v_mc = mc_variance(list(probs[sel + (FOREGROUND,)]))
            v_pred = pred_variance(pvars[sel])
            box = decode_deltas(tuple(mean_deltas[idx]), level, idx, grid)
            detections.append(
                Detection(
                    scan_id=scan_id,
                    box=box,
                    prob=float(mean_fg[idx]),
                    v_mc=v_mc,
                    v_pred=v_pred,
                    level=li,
                    cell=idx,
                )
            )
    return detections


def _nms_order(det: Detection) -> tuple:
    # Highest prob first; ties by lower uncertainty, then grid position.
    return (-det.prob, det.v_avg, det.level, det.cell)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy cross-level NMS: repeatedly keep the best-ranked detection
    and drop everything overlapping it above ``iou_thresh``. Output is
    sorted by descending probability."""
    ordered = sorted(dets, key=_nms_order)
    kept: list[Detection] = []
    suppressed = [False] * len(ordered)
    for i, det in enumerate(ordered):
        if suppressed[i]:
            continue
        kept.append(det)
        for j in range(i + 1, len(ordered)):
            if not suppressed[j] and iou(det.box, ordered[j].box) > iou_thresh:
                suppressed[j] = True
    return kept


def filter_by_uncertainty(dets: Sequence[Detection], eta: float) -> list[Detection]:
    """Keep detections with fused uncertainty ``v_avg <= eta``; order preserved."""
    if eta < 0:
        raise ValueError(f"uncertainty threshold must be >= 0, got {eta}")
    return [d for d in dets if d.v_avg <= eta]
