"""Print annotation mIoU of a config over seeds and corruption settings.

Usage: python3 scripts/calibrate_noise.py [--config configs/reference.json]
           [--levels 2,3,4,5] [--p-dilate 0.5,0.8,0.95] [--seeds 0,1,2,3,4]

Used to pick the noise setting that lands annotation quality near 0.6.
Generation only; no training.
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

from adele import io
from adele.synthgen import generate_dataset
from adele.trainer import annotation_quality


def floats(s):
    return [float(v) for v in s.split(",")]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/reference.json")
    ap.add_argument("--levels", default="2,3,4,5")
    ap.add_argument("--p-dilate", default="0.5,0.8,0.95")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args(argv)
    cfg = io.load_config(args.config)
    seeds = [int(v) for v in args.seeds.split(",")]
    print("level  p_dilate  mean    min     max")
    for level in (int(v) for v in args.levels.split(",")):
        for p in floats(args.p_dilate):
            noise = replace(cfg.noise, max_iterations=level, p_dilate=p)
            q = [annotation_quality(generate_dataset(replace(cfg.synth, seed=s), noise)) for s in seeds]
            print(f"{level:5d}  {p:8.2f}  {np.mean(q):.4f}  {min(q):.4f}  {max(q):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
