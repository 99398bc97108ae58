"""Baseline vs ADELE over corruption levels, written as CSV and SVG.

Usage: python3 scripts/noise_sweep.py --out results/sweep [--config configs/sweep.json]
           [--levels 0,1,2,3,4,6,8] [--seed 0]

Runs go through the acceptance cache, so after the acceptance suite has run
this only renders.
"""

import argparse
import sys
from pathlib import Path

from adele import experiments as X
from adele import io


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(X.CONFIG_DIR / "sweep.json"))
    ap.add_argument("--levels", default=",".join(map(str, X.SWEEP_LEVELS)))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    cfg = io.load_config(args.config)
    levels = [int(v) for v in args.levels.split(",")]
    points, wall = X.sweep_runs(cfg, levels, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "sweep.csv", "w") as fh:
        fh.write("level,annotation_miou,baseline,adele,gap\n")
        for p in points:
            fh.write(f"{p['level']},{p['annotation_miou']:.6g},{p['baseline']:.6g},{p['adele']:.6g},"
                     f"{p['adele'] - p['baseline']:.6g}\n")
    chart = io.LineChart("test mIoU vs corruption level", "max dilation/erosion iterations", "test mIoU")
    chart.add("baseline", levels, [p["baseline"] for p in points])
    chart.add("adele", levels, [p["adele"] for p in points])
    chart.add("annotation", levels, [p["annotation_miou"] for p in points], dashed=True)
    (args.out / "sweep.svg").write_text(chart.render())
    print(X.sweep_shape(points, wall=wall).detail)
    return 0


if __name__ == "__main__":
    sys.exit(main())
