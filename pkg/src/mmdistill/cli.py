"""Command-line entry point: ``mmdistill {simulate,run,eval,homography}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``MMDISTILL_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .distill import box_records, read_box_stream, write_detections, write_training_log
from .evaluation import AnnotatedFrame, EvalConfig, average_precision, counting_series, restrict_to_region, \
    rolling_window_ap, tiou_sweep
from .geometry import GeometryError, estimate_homography, read_correspondences
from .pipeline import eval_config, run_recording
from .recording import StreamError, read_recording, write_recording
from .sim import TeacherNoise

log = logging.getLogger("mmdistill")


def _load_config(path) -> RunConfig:
    return RunConfig() if path is None else RunConfig.load(path)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    if args.duration is not None:
        cfg = cfg.with_overrides(sim__duration=args.duration)
    t = cfg.teacher
    rec = write_recording(cfg.sim, args.out, cfg.distill.fps, TeacherNoise(t.center_sigma, t.size_sigma, t.drop_prob),
                          cfg.distill.teacher_period, cfg.seed, frames=not args.no_frames)
    cfg.save(Path(args.out) / "config.json")
    log.info("wrote %d frames to %s", rec.n_frames, args.out)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.clock is not None:
        cfg = cfg.with_overrides(distill__clock=args.clock)
    rec = read_recording(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump = out / "supervision" if args.dump_supervision else None
    result, detector = run_recording(cfg, rec, args.mode, dump)
    write_detections(result.outputs, out / "detections.jsonl")
    with open(out / "raw_detections.jsonl", "w") as fh:
        for o in result.outputs:
            if o.raw is not None:
                fh.write(json.dumps({"t": round(o.t, 6), "boxes": box_records(o.raw)}) + "\n")
    write_training_log(result.swaps, out / "training_log.csv")
    if hasattr(detector, "save"):
        detector.save(out / "weights.bin")
    lat = np.array(result.latencies) if result.latencies else np.zeros(1)
    log.info("%d frames, %d weight swaps, mean latency %.1f ms, max %.1f ms",
             len(result.outputs), len(result.swaps), 1e3 * lat.mean(), 1e3 * lat.max())
    for err in result.errors:
        log.warning("trainer error: %s", err)
    return 0


def _write_series(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def evaluate_streams(detections, gt, partition, ecfg: EvalConfig, out: Path) -> dict:
    """Score a detection stream against ground truth and write plot-ready CSVs."""
    det = {round(t, 6): b for t, b in detections}
    gt = sorted(gt, key=lambda r: r[0])
    if not det or not gt:
        raise StreamError("detections or ground truth are empty")
    common = [(t, g) for t, g in gt if round(t, 6) in det]
    if not common:
        raise StreamError("detections and ground truth share no timestamps")
    t0 = common[0][0]
    annotated = [AnnotatedFrame(t, det[round(t, 6)], g) for t, g in common
                 if abs(((t - t0) / ecfg.annotation_period) - round((t - t0) / ecfg.annotation_period)) < 1e-6]
    duration = common[-1][0] - t0 + (common[1][0] - common[0][0] if len(common) > 1 else ecfg.annotation_period)
    regions = {"overall": None, "overlap": partition.overlap, "outside": partition.outside}
    summary = {"frames": len(common), "annotated_frames": len(annotated), "tiou": ecfg.tiou}
    final_from = t0 + max(duration - ecfg.window, 0.0)
    final = [f for f in annotated if f.t >= final_from - 1e-9]
    for name, mask in regions.items():
        series = rolling_window_ap(annotated, ecfg, mask, duration)
        _write_series(out / f"ap_{name}.csv", ["window_start", "ap"], series)
        frames = [(f.preds, f.gts) if mask is None else (restrict_to_region(f.preds, mask), restrict_to_region(f.gts, mask))
                  for f in final]
        ap = average_precision(frames, ecfg.tiou)
        summary[f"ap_{name}"] = None if math.isnan(ap) else ap
    sweeps = {}
    for name, mask in regions.items():
        frames = [(f.preds, f.gts) if mask is None else (restrict_to_region(f.preds, mask), restrict_to_region(f.gts, mask))
                  for f in final]
        sweeps[name] = tiou_sweep(frames)
    rows = [(t, *(sweeps[n][i][1] for n in regions)) for i, (t, _) in enumerate(sweeps["overall"])]
    _write_series(out / "tiou_sweep.csv", ["tiou", "ap_overall", "ap_overlap", "ap_outside"], rows)
    counts = counting_series([(t, len(det[round(t, 6)])) for t, _ in common], ecfg,
                             [(f.t, len(f.gts)) for f in annotated], (final_from, math.inf))
    _write_series(out / "counting.csv", ["t", "window_mean", "window_std"], counts.series)
    summary["counting_rmse"] = counts.rmse
    summary["mean_count"] = float(np.mean([len(det[round(t, 6)]) for t, _ in common]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    rec = read_recording(args.recording)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detections = read_box_stream(args.detections)
    gt = read_box_stream(args.gt) if args.gt else rec.ground_truth()
    summary = evaluate_streams(detections, gt, rec.partition(), eval_config(cfg), out)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_homography(args) -> int:
    corrs = read_correspondences(args.correspondences)
    h, err = estimate_homography(corrs)
    if args.out:
        h.save(args.out)
    print(f"mean reprojection error: {err:.6g} px")
    print(h.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmdistill", description="Online teacher-student distillation for a fisheye camera.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic two-camera recording")
    s.add_argument("--config", help="run configuration (JSON); defaults when omitted")
    s.add_argument("--out", required=True, help="recording directory to create")
    s.add_argument("--duration", type=float, help="override sim.duration (seconds)")
    s.add_argument("--no-frames", action="store_true", help="skip PNG frames; runs re-render them from the world settings")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="train and run the student over a recording")
    r.add_argument("--config")
    r.add_argument("--in", dest="input", required=True, help="recording directory")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("online", "offline"), default="online")
    r.add_argument("--clock", choices=("wall", "replay"))
    r.add_argument("--dump-supervision", action="store_true", help="write every assembled target as JSON + PGM")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("--config")
    e.add_argument("--detections", required=True)
    e.add_argument("--recording", required=True, help="recording directory (geometry and default gt)")
    e.add_argument("--gt", help="ground-truth JSON Lines; defaults to the recording's gt.jsonl")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("homography", help="estimate a homography from `tx ty sx sy` correspondences")
    h.add_argument("--correspondences", required=True)
    h.add_argument("--out")
    h.set_defaults(func=cmd_homography)
    return p


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("MMDISTILL_LOG", "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StreamError, GeometryError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
