"""Fill the run cache used by the seeded acceptance criteria (8-12).

Usage: python3 scripts/run_acceptance_runs.py [--only reference|ablation|imbalance|sweep] [--cache DIR]

Each run is stored as JSON under the cache directory; reruns are skipped, so
the script can be interrupted and resumed.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

from adele import experiments as X

GROUPS = ("reference", "ablation", "imbalance", "sweep")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", choices=GROUPS, action="append")
    ap.add_argument("--cache", type=Path, default=X.DEFAULT_CACHE)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)
    groups = args.only or GROUPS
    ref = X.load_reference("reference")
    start = time.perf_counter()
    if "reference" in groups:
        base = X.arm_runs(ref, "baseline", cache_dir=args.cache)
        full = X.arm_runs(ref, "adele", cache_dir=args.cache)
        print(X.early_learning_signature(base[0]).detail)
        print(X.improvement(base, full).detail)
    if "ablation" in groups:
        runs = {m: X.arm_runs(ref, m, cache_dir=args.cache)
                for m in ("baseline", "correction_only", "consistency_only", "adele")}
        print(X.ablation_ordering(runs["baseline"], runs["correction_only"],
                                  runs["consistency_only"], runs["adele"]).detail)
    if "imbalance" in groups:
        var = X.load_reference("imbalanced")
        pc = X.arm_runs(var, "adele", cache_dir=args.cache, trigger_mode="per_class")
        gl = X.arm_runs(var, "adele", cache_dir=args.cache, trigger_mode="global")
        print(X.adaptive_vs_global(pc, gl).detail)
    if "sweep" in groups:
        points, wall = X.sweep_runs(X.load_reference("sweep"), cache_dir=args.cache)
        print(X.sweep_shape(points, wall=wall).detail)
    print(f"done in {time.perf_counter() - start:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
