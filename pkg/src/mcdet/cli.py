"""Command-line pipeline: synth -> train -> infer -> aggregate -> eval -> sweep.

Each stage reads and writes only the NDJSON/CSV formats in
:mod:`mcdet.formats`, exits 0 on success, and prints a one-line diagnostic
to stderr otherwise. Stochastic stages require an explicit seed (flag or
config file); reruns with identical inputs and seeds are byte-identical on
every CSV output.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import formats, plots
from .aggregate import AggregationConfig, aggregate_in_place, filter_by_uncertainty, nms
from .config import RunConfig, load_config
from .core import OBJECT, Box, Detection
from .metrics import cpm, f1_at, froc, match_detections, sweep as run_sweep
from .micronet import MicroNet, TrainConfig, infer_deterministic, mc_infer, train
from .synthdata import Scene, SimulatorConfig, generate_scenes


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _require_seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise ValueError("this stage is stochastic: pass --seed or set seed in the config")
    return int(seed)


def _override(section, args, names: dict[str, str]) -> None:
    for flag, field in names.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(section, field, value)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    _override(cfg.synth, args, {"scans": "scans", "objects": "objects", "decoys": "decoys"})
    seed = _require_seed(args, cfg)
    grid = cfg.grid.to_grid()
    scenes = generate_scenes(
        grid, cfg.synth.scans, cfg.synth.objects, cfg.synth.decoys, seed, prefix="scan"
    )
    formats.write_scenes(args.out, scenes, grid)
    if args.gt_out:
        formats.write_ground_truth(
            args.gt_out, {s.scan_id: s.gt for s in scenes}, grid.dims
        )
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _override(
        cfg.train,
        args,
        {
            "loss": "loss", "epochs": "epochs", "learning_rate": "learning_rate",
            "neg_pos_ratio": "neg_pos_ratio", "dropout": "dropout", "channels": "channels",
            "mc_integration_samples": "mc_integration_samples",
            "smooth_l1_weight": "smooth_l1_weight",
        },
    )
    seed = _require_seed(args, cfg)
    grid = cfg.grid.to_grid()
    image_size, scenes = formats.read_scenes(args.scenes)
    if image_size != grid.image_size:
        raise ValueError(f"scenes were generated for image size {image_size}, grid has {grid.image_size}")
    net = MicroNet.create(grid, channels=cfg.train.channels, dropout=cfg.train.dropout, seed=seed)
    tc = TrainConfig(
        loss_kind=cfg.train.loss,
        mc_integration_samples=cfg.train.mc_integration_samples,
        learning_rate=cfg.train.learning_rate,
        epochs=cfg.train.epochs,
        neg_pos_ratio=cfg.train.neg_pos_ratio,
        smooth_l1_weight=cfg.train.smooth_l1_weight,
        seed=seed,
    )
    history = train(net, scenes, tc)
    net.save(args.out)
    if args.history_out:
        write_csv(args.history_out, ["epoch", "mean_loss"], list(enumerate(history)))
    print(f"trained {cfg.train.loss} model for {tc.epochs} epochs "
          f"(loss {history[0]:.4f} -> {history[-1]:.4f}), saved to {args.out}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    _override(cfg.infer, args, {"passes": "passes"})
    if args.no_mc:
        cfg.infer.mc = False
    net = MicroNet.load(args.model)
    image_size, scenes = formats.read_scenes(args.scenes)
    if image_size != net.grid.image_size:
        raise ValueError("scenes do not match the model's grid")
    all_passes = []
    if cfg.infer.mc:
        seed = _require_seed(args, cfg)
        rng = np.random.default_rng(seed)
        for scene in scenes:
            scan_seed = int(rng.integers(2**63))
            all_passes.extend(
                mc_infer(net, scene.image, cfg.infer.passes, scan_seed, scan_id=scene.scan_id)
            )
    else:
        for scene in scenes:
            all_passes.append(infer_deterministic(net, scene.image, scan_id=scene.scan_id))
    formats.write_pass_dump(args.out, net.grid, all_passes)
    mode = f"mc x{cfg.infer.passes}" if cfg.infer.mc else "deterministic"
    print(f"wrote {mode} pass dump for {len(scenes)} scans to {args.out}")
    return 0


def cmd_aggregate(args) -> int:
    cfg = load_config(args.config)
    _override(cfg.aggregate, args, {"prob_floor": "prob_floor", "nms_iou": "nms_iou"})
    grid, t_passes, by_scan = formats.read_pass_dump(args.passes)
    agg_cfg = AggregationConfig(
        prob_floor=cfg.aggregate.prob_floor,
        nms_iou=cfg.aggregate.nms_iou,
        passes_expected=t_passes,
    )
    dets: list[Detection] = []
    for scan_id in sorted(by_scan):
        raw = aggregate_in_place(by_scan[scan_id], grid, agg_cfg)
        dets.extend(nms(raw, agg_cfg.nms_iou))
    formats.write_detections(args.out, dets, grid.dims)
    print(f"aggregated {len(by_scan)} scans x {t_passes} passes -> {len(dets)} detections")
    return 0


def _load_eval_inputs(args):
    dets = formats.read_detections(args.dets)
    gt = formats.read_ground_truth(args.gt)
    # only true objects are targets; decoys must be found out, not rewarded
    targets = {scan: [b for b, kind in items if kind == OBJECT] for scan, items in gt.items()}
    return dets, targets


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.unc_threshold is not None:
        cfg.eval.unc_threshold = args.unc_threshold
    dets, targets = _load_eval_inputs(args)
    if cfg.eval.unc_threshold is not None:
        dets = filter_by_uncertainty(dets, cfg.eval.unc_threshold)
    n_scans = len(targets)
    n_gts = sum(len(b) for b in targets.values())
    result = match_detections(dets, targets)
    points = froc(result.labeled, n_scans, max(n_gts, 1))
    score = cpm(points, cfg.eval.fp_rates)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "froc.csv", ["fp_per_scan", "sensitivity"], points)
    tp_vals = [d.v_avg for d, is_tp in result.labeled if is_tp]
    fp_vals = [d.v_avg for d, is_tp in result.labeled if not is_tp]
    hist_rows = [("tp", v) for v in tp_vals] + [("fp", v) for v in fp_vals]
    write_csv(out_dir / "hist.csv", ["label", "v_avg"], hist_rows)
    if not args.no_figures:
        plots.save_froc_figure(points, out_dir / "froc.png")
        plots.save_uncertainty_hist_figure(tp_vals, fp_vals, out_dir / "hist.png")
    print(f"scans={n_scans} gts={n_gts} tp={result.n_tp} fp={result.n_fp}")
    if args.metric == "cpm":
        print(repr(score))
    else:
        print(f"cpm={score!r}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.prob_grid:
        cfg.sweep.prob_grid = [float(v) for v in args.prob_grid.split(",")]
    if args.unc_grid:
        cfg.sweep.unc_grid = [float(v) for v in args.unc_grid.split(",")]
    dets, targets = _load_eval_inputs(args)
    result = run_sweep(
        dets, targets, cfg.sweep.prob_grid, cfg.sweep.unc_grid, cfg.eval.fp_rates
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(
        out_dir / "sweep.csv",
        ["prob_threshold", "unc_threshold", "precision", "recall", "f1", "cpm"],
        [
            (c.prob_threshold, c.unc_threshold, c.precision, c.recall, c.f1, c.cpm)
            for c in result.cells
        ],
    )
    unc_cpm = [
        (u, cpm(points, cfg.eval.fp_rates)) for u, points in result.froc_by_unc.items()
    ]
    write_csv(out_dir / "unc_cpm.csv", ["unc_threshold", "cpm"], unc_cpm)
    if not args.no_figures:
        f1_by_cell = {(c.prob_threshold, c.unc_threshold): c.f1 for c in result.cells}
        plots.save_f1_heatmap(cfg.sweep.prob_grid, cfg.sweep.unc_grid, f1_by_cell, out_dir / "f1_heatmap.png")
        plots.save_cpm_vs_unc_figure(unc_cpm, out_dir / "cpm_vs_unc.png")
    best = result.best_f1()
    print(
        f"best f1={best.f1!r} at prob>={best.prob_threshold:g} unc<={best.unc_threshold:g}"
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdet",
        description="Instance-level uncertainty for grid detectors: "
        "synthesize, train, run MC inference, aggregate, and evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="seed for stochastic stages")

    p = sub.add_parser("synth", help="generate synthetic scenes and ground truth")
    add_common(p)
    p.add_argument("--out", required=True, help="scene NDJSON output")
    p.add_argument("--gt-out", help="ground-truth NDJSON output")
    p.add_argument("--scans", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--decoys", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the micro detector on scenes")
    add_common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="model checkpoint output")
    p.add_argument("--history-out", help="per-epoch loss CSV")
    p.add_argument("--loss", choices=["ce", "attenuated"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--neg-pos-ratio", dest="neg_pos_ratio", type=int)
    p.add_argument("--smooth-l1-weight", dest="smooth_l1_weight", type=float)
    p.add_argument("--mc-integration-samples", dest="mc_integration_samples", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run (MC) inference, writing a pass dump")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="pass-dump NDJSON output")
    p.add_argument("--passes", type=int)
    p.add_argument("--no-mc", action="store_true", help="single dropout-free pass")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("aggregate", help="aggregate a pass dump into detections")
    add_common(p)
    p.add_argument("--passes", required=True, help="pass-dump NDJSON input")
    p.add_argument("--out", required=True, help="detections NDJSON output")
    p.add_argument("--prob-floor", dest="prob_floor", type=float)
    p.add_argument("--nms-iou", dest="nms_iou", type=float)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("eval", help="FROC/CPM evaluation with optional uncertainty filter")
    add_common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metric", choices=["cpm"], help="print only this metric as the final line")
    p.add_argument("--unc-threshold", dest="unc_threshold", type=float)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="joint probability/uncertainty threshold sweep")
    add_common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prob-grid", help="comma-separated probability thresholds")
    p.add_argument("--unc-grid", help="comma-separated uncertainty thresholds")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
