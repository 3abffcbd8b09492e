#!/usr/bin/env python3
"""Paired runs isolating the physics terms: seeded penetration with repulsion
on/off, and a seeded gap with attraction on/off."""

import argparse
import json

from hogs.experiments import attraction_ab, build_contact_bench, repulsion_ab


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=240)
    args = ap.parse_args()

    bench = build_contact_bench(seed=args.seed)
    rep = repulsion_ab(seed=args.seed, iterations=args.iterations, bench=bench)
    attr = attraction_ab(seed=args.seed, iterations=args.iterations, bench=bench)
    print(json.dumps({"repulsion": rep, "attraction": attr}, indent=2))
    h = rep["voxel"]
    print(f"\npenetration: {rep['penetration_off'] / h:.2f}h without repulsion -> "
          f"{rep['penetration_on'] / h:.2f}h with it "
          f"(seeded {rep['initial_penetration'] / h:.1f}h)")
    print(f"gap:         {attr['distance_off'] / h:.2f}h without attraction -> "
          f"{attr['distance_on'] / h:.2f}h with it")


if __name__ == "__main__":
    main()
