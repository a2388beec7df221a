"""Bit-exact NDJSON file formats for every pipeline stage.

Each file starts with a one-line JSON header carrying a format tag (and,
for pass dumps, the full grid shape), followed by one JSON record per
line. Floats are written with Python's shortest round-trip representation,
so write -> read reproduces every 64-bit value exactly. Readers are strict:
unknown tags, unknown keys, shape violations, duplicates, and incomplete
grids are rejected with the offending line number.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    DECOY,
    OBJECT,
    Box,
    Detection,
    GridSpec,
    LevelOutput,
    LevelSpec,
    PassGrid,
)
from .synthdata import Scene

DUMP_FORMAT = "mcdet/1"
DET_FORMAT = "mcdet-det/1"
GT_FORMAT = "mcdet-gt/1"
SCENE_FORMAT = "mcdet-scene/1"


class ParseError(ValueError):
    """A malformed file, annotated with the 1-based offending line."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


def _dump_line(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def _load_line(path, line_no: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ParseError(path, line_no, "record must be a JSON object")
    return obj


def _check_keys(path, line_no: int, obj: dict, required: set[str]) -> None:
    keys = set(obj)
    if keys != required:
        extra = keys - required
        missing = required - keys
        parts = []
        if extra:
            parts.append(f"unknown keys {sorted(extra)}")
        if missing:
            parts.append(f"missing keys {sorted(missing)}")
        raise ParseError(path, line_no, "; ".join(parts))


def _read_header(path, lines: Iterable[str], expected_format: str, required: set[str]) -> dict:
    try:
        first = next(iter(lines))
    except StopIteration:
        raise ParseError(path, 1, "missing header line") from None
    header = _load_line(path, 1, first)
    if header.get("format") != expected_format:
        raise ParseError(path, 1, f"expected format {expected_format!r}, got {header.get('format')!r}")
    _check_keys(path, 1, header, required)
    return header


def _float_list(path, line_no, value, length: int, name: str) -> list[float]:
    if not isinstance(value, list) or len(value) != length:
        raise ParseError(path, line_no, f"{name} must be a list of {length} numbers")
    out = []
    for v in value:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ParseError(path, line_no, f"{name} must contain numbers only")
        f = float(v)
        if not np.isfinite(f):
            raise ParseError(path, line_no, f"{name} contains a non-finite value")
        out.append(f)
    return out


# ---------------------------------------------------------------------------
# pass dumps
# ---------------------------------------------------------------------------

def grid_to_header(grid: GridSpec, passes: int) -> dict:
    return {
        "format": DUMP_FORMAT,
        "dims": grid.dims,
        "image_size": list(grid.image_size),
        "levels": [
            {"stride": lv.stride, "base_size": list(lv.base_size)} for lv in grid.levels
        ],
        "passes": passes,
        "num_classes": grid.num_classes,
    }


def grid_from_header(path, header: dict) -> tuple[GridSpec, int]:
    try:
        levels = tuple(
            LevelSpec(int(lv["stride"]), tuple(float(b) for b in lv["base_size"]))
            for lv in header["levels"]
        )
        grid = GridSpec(
            dims=int(header["dims"]),
            image_size=tuple(int(s) for s in header["image_size"]),
            levels=levels,
            num_classes=int(header["num_classes"]),
        )
        passes = int(header["passes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, 1, f"invalid header: {exc}") from exc
    if passes < 1:
        raise ParseError(path, 1, "passes must be >= 1")
    return grid, passes


def write_pass_dump(path, grid: GridSpec, passes: Sequence[PassGrid]) -> None:
    """Write all passes (any number of scans) as one dense dump."""
    by_scan: dict[str, list[PassGrid]] = {}
    for p in passes:
        by_scan.setdefault(p.scan_id, []).append(p)
    counts = {len(ps) for ps in by_scan.values()}
    if len(counts) > 1:
        raise ValueError(f"scans disagree on pass count: {sorted(counts)}")
    t_passes = counts.pop() if counts else 1

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line(grid_to_header(grid, t_passes)) + "\n")
        for scan_id in sorted(by_scan):
            for p in sorted(by_scan[scan_id], key=lambda g: g.pass_index):
                p.validate(grid)
                for li, out in enumerate(p.levels):
                    for cell in np.ndindex(out.prob.shape[:-1]):
                        record = {
                            "scan": scan_id,
                            "pass": p.pass_index,
                            "level": li,
                            "cell": list(cell),
                            "p": out.prob[cell].tolist(),
                            "s2": out.pred_var[cell].tolist(),
                            "w": out.deltas[cell].tolist(),
                        }
                        fh.write(_dump_line(record) + "\n")


def read_pass_dump(path) -> tuple[GridSpec, int, dict[str, list[PassGrid]]]:
    """Parse a dump into per-scan pass lists, validating shape and coverage."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = _read_header(
        path, lines, DUMP_FORMAT,
        {"format", "dims", "image_size", "levels", "passes", "num_classes"},
    )
    grid, t_passes = grid_from_header(path, header)
    shapes = [grid.level_shape(li) for li in range(len(grid.levels))]
    nc, nd = grid.num_classes, 2 * grid.dims

    grids: dict[tuple[str, int], list[LevelOutput]] = {}
    filled: dict[tuple[str, int, int], int] = {}
    seen: set[tuple[str, int, int, tuple[int, ...]]] = set()
    record_keys = {"scan", "pass", "level", "cell", "p", "s2", "w"}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _load_line(path, line_no, line)
        _check_keys(path, line_no, obj, record_keys)
        scan = obj["scan"]
        if not isinstance(scan, str):
            raise ParseError(path, line_no, "scan must be a string")
        t = obj["pass"]
        if not isinstance(t, int) or not 0 <= t < t_passes:
            raise ParseError(path, line_no, f"pass must be an integer in [0, {t_passes})")
        li = obj["level"]
        if not isinstance(li, int) or not 0 <= li < len(shapes):
            raise ParseError(path, line_no, f"level must be an integer in [0, {len(shapes)})")
        cell = obj["cell"]
        if (
            not isinstance(cell, list)
            or len(cell) != grid.dims
            or any(not isinstance(c, int) for c in cell)
            or any(c < 0 or c >= n for c, n in zip(cell, shapes[li]))
        ):
            raise ParseError(path, line_no, f"cell must index level-{li} grid {shapes[li]}")
        cell = tuple(cell)
        key = (scan, t, li, cell)
        if key in seen:
            raise ParseError(
                path, line_no,
                f"duplicate record for scan={scan!r} pass={t} level={li} cell={list(cell)}",
            )
        seen.add(key)
        p = _float_list(path, line_no, obj["p"], nc, "p")
        if any(v < 0.0 or v > 1.0 for v in p) or abs(sum(p) - 1.0) > 1e-9:
            raise ParseError(path, line_no, "p must be probabilities summing to 1")
        s2 = _float_list(path, line_no, obj["s2"], nc, "s2")
        if any(v < 0.0 for v in s2):
            raise ParseError(path, line_no, "s2 components must be >= 0")
        w = _float_list(path, line_no, obj["w"], nd, "w")

        gkey = (scan, t)
        if gkey not in grids:
            grids[gkey] = [
                LevelOutput(
                    prob=np.full(shape + (nc,), np.nan),
                    pred_var=np.full(shape + (nc,), np.nan),
                    deltas=np.full(shape + (nd,), np.nan),
                )
                for shape in shapes
            ]
        out = grids[gkey][li]
        out.prob[cell] = p
        out.pred_var[cell] = s2
        out.deltas[cell] = w
        filled[(scan, t, li)] = filled.get((scan, t, li), 0) + 1

    cells_per_level = [int(np.prod(shape)) for shape in shapes]
    by_scan: dict[str, list[PassGrid]] = {}
    for (scan, t), levels in sorted(grids.items()):
        for li, expected in enumerate(cells_per_level):
            got = filled.get((scan, t, li), 0)
            if got != expected:
                raise ParseError(
                    path, len(lines),
                    f"scan={scan!r} pass={t} level={li} has {got}/{expected} cells",
                )
        by_scan.setdefault(scan, []).append(PassGrid(scan, t, levels))
    for scan, plist in by_scan.items():
        indices = sorted(p.pass_index for p in plist)
        if indices != list(range(t_passes)):
            raise ParseError(
                path, len(lines),
                f"scan={scan!r} has passes {indices}, expected 0..{t_passes - 1}",
            )
        plist.sort(key=lambda p: p.pass_index)
    return grid, t_passes, by_scan


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

def write_detections(path, dets: Sequence[Detection], dims: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump_line({"format": DET_FORMAT, "dims": dims}) + "\n")
        for d in dets:
            record = {
                "scan": d.scan_id,
                "center": list(d.box.center),
                "size": list(d.box.size),
                "prob": d.prob,
                "v_mc": d.v_mc,
                "v_pred": d.v_pred,
                "v_avg": d.v_avg,
                "level": d.level,
                "cell": list(d.cell),
            }
            fh.write(_dump_line(record) + "\n")


def read_detections(path) -> list[Detection]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = _read_header(path, lines, DET_FORMAT, {"format", "dims"})
    dims = int(header["dims"])
    keys = {"scan", "center", "size", "prob", "v_mc", "v_pred", "v_avg", "level", "cell"}
    dets = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _load_line(path, line_no, line)
        _check_keys(path, line_no, obj, keys)
        center = _float_list(path, line_no, obj["center"], dims, "center")
        size = _float_list(path, line_no, obj["size"], dims, "size")
        try:
            det = Detection(
                scan_id=obj["scan"],
                box=Box(tuple(center), tuple(size)),
                prob=float(obj["prob"]),
                v_mc=float(obj["v_mc"]),
                v_pred=float(obj["v_pred"]),
                level=int(obj["level"]),
                cell=tuple(obj["cell"]),
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(path, line_no, str(exc)) from exc
        if det.v_avg != float(obj["v_avg"]):
            raise ParseError(path, line_no, "v_avg does not equal (v_mc + v_pred) / 2")
        dets.append(det)
    return dets


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def write_ground_truth(path, gt_by_scan: Mapping[str, Sequence[tuple[Box, str]]], dims: int) -> None:
    """The header carries the scan roster so scans with no findings still count."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            _dump_line({"format": GT_FORMAT, "dims": dims, "scans": sorted(gt_by_scan)}) + "\n"
        )
        for scan in sorted(gt_by_scan):
            for box, kind in gt_by_scan[scan]:
                record = {
                    "scan": scan,
                    "center": list(box.center),
                    "size": list(box.size),
                    "kind": kind,
                }
                fh.write(_dump_line(record) + "\n")


def read_ground_truth(path) -> dict[str, list[tuple[Box, str]]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = _read_header(path, lines, GT_FORMAT, {"format", "dims", "scans"})
    dims = int(header["dims"])
    roster = header["scans"]
    if not isinstance(roster, list) or any(not isinstance(s, str) for s in roster):
        raise ParseError(path, 1, "scans must be a list of scan ids")
    gt: dict[str, list[tuple[Box, str]]] = {scan: [] for scan in roster}
    keys = {"scan", "center", "size", "kind"}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _load_line(path, line_no, line)
        _check_keys(path, line_no, obj, keys)
        if obj["scan"] not in gt:
            raise ParseError(path, line_no, f"scan {obj['scan']!r} not in header roster")
        if obj["kind"] not in (OBJECT, DECOY):
            raise ParseError(path, line_no, f"kind must be {OBJECT!r} or {DECOY!r}")
        center = _float_list(path, line_no, obj["center"], dims, "center")
        size = _float_list(path, line_no, obj["size"], dims, "size")
        try:
            box = Box(tuple(center), tuple(size))
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from exc
        gt[obj["scan"]].append((box, obj["kind"]))
    return gt


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def write_scenes(path, scenes: Sequence[Scene], grid: GridSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": SCENE_FORMAT,
            "dims": grid.dims,
            "image_size": list(grid.image_size),
        }
        fh.write(_dump_line(header) + "\n")
        for scene in scenes:
            if scene.image.shape != grid.image_size:
                raise ValueError(f"scene {scene.scan_id!r} image shape mismatch")
            record = {
                "scan": scene.scan_id,
                "image": scene.image.reshape(-1).tolist(),
                "gt": [
                    {"center": list(b.center), "size": list(b.size), "kind": kind}
                    for b, kind in scene.gt
                ],
            }
            fh.write(_dump_line(record) + "\n")


def read_scenes(path) -> tuple[tuple[int, ...], list[Scene]]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = _read_header(path, lines, SCENE_FORMAT, {"format", "dims", "image_size"})
    dims = int(header["dims"])
    image_size = tuple(int(s) for s in header["image_size"])
    n_pixels = int(np.prod(image_size))
    scenes = []
    keys = {"scan", "image", "gt"}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        obj = _load_line(path, line_no, line)
        _check_keys(path, line_no, obj, keys)
        pixels = _float_list(path, line_no, obj["image"], n_pixels, "image")
        gt = []
        for item in obj["gt"]:
            if set(item) != {"center", "size", "kind"}:
                raise ParseError(path, line_no, "gt items need center/size/kind")
            if item["kind"] not in (OBJECT, DECOY):
                raise ParseError(path, line_no, f"unknown gt kind {item['kind']!r}")
            center = _float_list(path, line_no, item["center"], dims, "gt center")
            size = _float_list(path, line_no, item["size"], dims, "gt size")
            gt.append((Box(tuple(center), tuple(size)), item["kind"]))
        scenes.append(
            Scene(
                scan_id=obj["scan"],
                image=np.array(pixels, dtype=np.float64).reshape(image_size),
                gt=gt,
            )
        )
    return image_size, scenes
