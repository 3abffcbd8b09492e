#!/usr/bin/env python3
"""Rendering throughput sweep over Gaussian counts and image sizes."""

import argparse

from hogs.pipeline import FPS_BASELINE, render_fps
from hogs.splat import Camera
from hogs.synth import benchmark_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'gaussians':>10} {'size':>6} {'fps':>8}")
    for n in (1000, 5000, 10000, 20000):
        for size in (128, 256):
            scene = benchmark_scene(n, args.seed)
            cam = Camera.look_at(
                (0, -2.5, 0.6), (0, 0, 0), up=(0, 0, 1), fx=300.0, width=size, height=size
            )
            fps, _ = render_fps(scene, cam, args.frames)
            mark = ""
            if n == 10000 and size == 256:
                mark = f"   (pinned baseline {FPS_BASELINE}, alarm below {0.7 * FPS_BASELINE:.1f})"
            print(f"{n:>10} {size:>6} {fps:>8.2f}{mark}")


if __name__ == "__main__":
    main()
