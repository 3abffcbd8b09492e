#!/usr/bin/env python3
"""End-to-end demo: synthesize the default fixture, run every stage, print
the metric report. Pass --fast for a reduced configuration."""

import argparse
import json
from pathlib import Path

from hogs.config import RunConfig
from hogs.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/demo"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--fast", action="store_true", help="small fixture, few iterations")
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.apply_overrides(seed=args.seed)
    if args.fast:
        cfg.synth.n_frames = 20
        cfg.contact.train_frames = 12
        cfg.contact.epochs = 100
        cfg.optimize.iterations = 200
        cfg.benchmark.gaussians = 2000

    report_path = run_pipeline(cfg, args.out)
    report = json.loads(report_path.read_text())
    timing = json.loads((args.out / "timing.json").read_text())
    print(f"report: {report_path}")
    print(f"  train PSNR  {report['mean_train_psnr']:.2f} dB")
    print(f"  heldout PSNR {report['mean_heldout_psnr']:.2f} dB")
    print(f"  contact F1  {report['contact_f1']:.3f}")
    print(f"  penetration {report['mean_penetration_depth']:.5f} m")
    print(f"  render FPS  {timing['fps_benchmark']:.1f} "
          f"({timing['benchmark_gaussians']} Gaussians @ {timing['benchmark_image_size']}px)")


if __name__ == "__main__":
    main()
