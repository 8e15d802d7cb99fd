"""Time the inference path (motion masks, grid predict, post-process) at full resolution.

    python scripts/bench_realtime.py --size 1280 --frames 120
"""
import argparse
import time

import numpy as np

from mmdistill.config import RunConfig
from mmdistill.distill import OnlineConfig, infer_frame
from mmdistill.pipeline import motion_detector
from mmdistill.sim import simulate
from mmdistill.student import GridDetector


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=1280)
    p.add_argument("--frames", type=int, default=120)
    args = p.parse_args()

    cfg = RunConfig().with_overrides(sim__student_size=args.size)
    sim = simulate(cfg.sim, args.frames / cfg.distill.fps + 1, cfg.distill.fps)
    frames = [sim.world.student_frame(k) for k in range(args.frames)]
    motion = motion_detector(cfg)
    det = GridDetector((args.size, args.size), cfg.student.grid)
    ocfg = OnlineConfig()
    for f in frames[:5]:
        infer_frame(det, f, motion(f), ocfg, f.timestamp, None)
    lat = []
    for f in frames[5:]:
        t0 = time.perf_counter()
        infer_frame(det, f, motion(f), ocfg, f.timestamp, None)
        lat.append(time.perf_counter() - t0)
    lat = np.array(lat)
    print(f"{args.size}x{args.size}: {1 / lat.mean():.1f} fps, mean {1e3 * lat.mean():.1f} ms, max {1e3 * lat.max():.1f} ms")


if __name__ == "__main__":
    main()
