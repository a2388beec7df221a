"""Detection evaluation: FROC/CPM, F1, and uncertainty-threshold search.

A detection counts as a hit when its box center falls within ``r`` of an
unclaimed ground-truth center, with ``r`` = half the ground truth's mean
size component. Each ground truth is claimable once, by the highest-ranked
detection that reaches it. CPM is the mean FROC sensitivity at a fixed set
of false-positives-per-scan operating points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Box, Detection

DEFAULT_FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

LabeledDetection = tuple[Detection, bool]


@dataclass(frozen=True)
class EvalConfig:
    fp_rates: tuple[float, ...] = DEFAULT_FP_RATES
    hit_rule: str = "center-in-radius"

    def __post_init__(self):
        object.__setattr__(self, "fp_rates", tuple(float(r) for r in self.fp_rates))
        if any(r <= 0 for r in self.fp_rates):
            raise ValueError("fp_rates must be positive")
        if any(b <= a for a, b in zip(self.fp_rates, self.fp_rates[1:])):
            raise ValueError("fp_rates must be strictly increasing")
        if self.hit_rule != "center-in-radius":
            raise ValueError(f"unknown hit rule {self.hit_rule!r}")


@dataclass
class MatchResult:
    labeled: list[LabeledDetection]
    gt_hits: dict[str, list[bool]]

    @property
    def n_tp(self) -> int:
        return sum(1 for _, is_tp in self.labeled if is_tp)

    @property
    def n_fp(self) -> int:
        return len(self.labeled) - self.n_tp


def _rank(det: Detection) -> tuple:
    return (-det.prob, det.v_avg, det.level, det.cell)


def _center_hit(det: Detection, gt: Box) -> bool:
    radius = sum(gt.size) / len(gt.size) / 2
    dist = math.dist(det.box.center, gt.center)
    return dist <= radius


def match_detections(
    dets: Sequence[Detection], gts: Mapping[str, Sequence[Box]]
) -> MatchResult:
    """Label every detection TP/FP against per-scan ground truths.

    Detections are processed in descending probability per scan; a ground
    truth can be claimed by at most one detection. Detections on scans
    absent from ``gts`` are an input error (pass an empty list for scans
    with no objects).
    """
    by_scan: dict[str, list[Detection]] = {scan: [] for scan in gts}
    for det in dets:
        if det.scan_id not in by_scan:
            raise ValueError(f"detection references unknown scan {det.scan_id!r}")
        by_scan[det.scan_id].append(det)

    labeled: list[LabeledDetection] = []
    gt_hits = {scan: [False] * len(boxes) for scan, boxes in gts.items()}
    for scan, scan_dets in by_scan.items():
        boxes = list(gts[scan])
        for det in sorted(scan_dets, key=_rank):
            tp = False
            for gi, gt in enumerate(boxes):
                if not gt_hits[scan][gi] and _center_hit(det, gt):
                    gt_hits[scan][gi] = True
                    tp = True
                    break
            labeled.append((det, tp))
    return MatchResult(labeled=labeled, gt_hits=gt_hits)


def froc(
    labeled: Sequence[LabeledDetection], n_scans: int, n_gts: int
) -> list[tuple[float, float]]:
    """FROC points (fp_per_scan, sensitivity), one per distinct probability
    threshold, sorted by ascending fp_per_scan."""
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    if n_gts < 1:
        raise ValueError("n_gts must be >= 1")
    if not labeled:
        return [(0.0, 0.0)]
    ordered = sorted(labeled, key=lambda pair: -pair[0].prob)
    points: dict[float, float] = {}
    tp = fp = 0
    for i, (det, is_tp) in enumerate(ordered):
        if is_tp:
            tp += 1
        else:
            fp += 1
        last_of_threshold = i + 1 == len(ordered) or ordered[i + 1][0].prob != det.prob
        if last_of_threshold:
            fps = fp / n_scans
            sens = tp / n_gts
            points[fps] = max(points.get(fps, 0.0), sens)
    return sorted(points.items())


def cpm(
    points: Sequence[tuple[float, float]],
    fp_rates: Sequence[float] = DEFAULT_FP_RATES,
) -> float:
    """Mean sensitivity at the target FP rates, linearly interpolating
    between FROC points (0 below the first point, flat above the last)."""
    if not points:
        raise ValueError("empty FROC curve")
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    sens = np.interp(np.asarray(fp_rates, dtype=np.float64), xs, ys, left=0.0)
    return float(sens.mean())


def f1_at(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Box]],
    prob_threshold: float,
    unc_threshold: float,
) -> tuple[float, float, float]:
    """(precision, recall, F1) at a joint probability/uncertainty operating
    point: keep prob >= prob_threshold and v_avg <= unc_threshold."""
    if prob_threshold < 0 or unc_threshold < 0:
        raise ValueError("thresholds must be >= 0")
    kept = [d for d in dets if d.prob >= prob_threshold and d.v_avg <= unc_threshold]
    n_gts = sum(len(boxes) for boxes in gts.values())
    result = match_detections(kept, gts)
    tp = result.n_tp
    precision = tp / len(kept) if kept else 0.0
    recall = tp / n_gts if n_gts else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def select_uncertainty_threshold(dets: Sequence[Detection], percentile: float) -> float:
    """Linear-interpolated percentile of v_avg over the given detections."""
    if not dets:
        raise ValueError("cannot select a threshold from an empty detection list")
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must lie in (0, 100], got {percentile}")
    return float(np.percentile([d.v_avg for d in dets], percentile))


@dataclass
class PercentileSearch:
    percentile: float
    eta: float
    cpm: float
    curve: list[tuple[float, float, float]]  # (percentile, eta, cpm)


def search_uncertainty_percentile(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Box]],
    percentiles: Sequence[float],
    fp_rates: Sequence[float] = DEFAULT_FP_RATES,
    uncertainty: str = "v_avg",
) -> PercentileSearch:
    """Scan a percentile grid and keep the filter maximizing CPM.

    ``uncertainty`` selects the channel used both for the percentile and
    the filter: ``v_avg``, ``v_mc``, or ``v_pred``. Ties prefer the larger
    percentile (the least aggressive filter).
    """
    if not percentiles:
        raise ValueError("empty percentile grid")
    key = {"v_avg": lambda d: d.v_avg,
           "v_mc": lambda d: d.v_mc,
           "v_pred": lambda d: d.v_pred}[uncertainty]
    values = [key(d) for d in dets]
    if not values:
        raise ValueError("cannot search thresholds on an empty detection list")
    n_scans = len(gts)
    n_gts = sum(len(boxes) for boxes in gts.values())
    curve = []
    best = None
    for pct in percentiles:
        eta = float(np.percentile(values, pct))
        kept = [d for d in dets if key(d) <= eta]
        score = cpm(froc(match_detections(kept, gts).labeled, n_scans, n_gts), fp_rates)
        curve.append((float(pct), eta, score))
        if best is None or score > best.cpm or (score == best.cpm and pct > best.percentile):
            best = PercentileSearch(float(pct), eta, score, curve)
    assert best is not None
    best.curve = curve
    return best


@dataclass
class SweepCell:
    prob_threshold: float
    unc_threshold: float
    precision: float
    recall: float
    f1: float
    cpm: float


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)
    froc_by_unc: dict[float, list[tuple[float, float]]] = field(default_factory=dict)

    def best_f1(self) -> SweepCell:
        return max(self.cells, key=lambda c: (c.f1, -c.unc_threshold))


def sweep(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Box]],
    prob_grid: Sequence[float],
    unc_grid: Sequence[float],
    fp_rates: Sequence[float] = DEFAULT_FP_RATES,
) -> SweepResult:
    """Cartesian evaluation over probability and uncertainty thresholds."""
    if not prob_grid or not unc_grid:
        raise ValueError("threshold grids must be non-empty")
    n_scans = len(gts)
    n_gts = sum(len(boxes) for boxes in gts.values())
    result = SweepResult()
    for u in unc_grid:
        unc_kept = [d for d in dets if d.v_avg <= u]
        result.froc_by_unc[float(u)] = froc(
            match_detections(unc_kept, gts).labeled, n_scans, max(n_gts, 1)
        )
        for p in prob_grid:
            kept = [d for d in unc_kept if d.prob >= p]
            score = cpm(
                froc(match_detections(kept, gts).labeled, n_scans, max(n_gts, 1)),
                fp_rates,
            )
            precision, recall, f1 = f1_at(dets, gts, p, u)
            result.cells.append(
                SweepCell(float(p), float(u), precision, recall, f1, score)
            )
    return result
