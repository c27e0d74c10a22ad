"""Train the full model and its single ablations on the synthetic rooms and compare F-scores.

    python scripts/run_ablations.py --out runs/ablations
    python scripts/run_ablations.py --out runs/repeat --compare runs/ablations

``--compare`` checks that every file of an earlier run (logs, checkpoints,
meshes, TSDFs) is byte-identical to the new one.
"""

import argparse
import filecmp
import json
import logging
import sys
import time
from pathlib import Path

from geofuse import train as tr
from geofuse.config import TrainConfig, acceptance_config
from geofuse.evalmetrics import MeshMetrics, format_table


def same_tree(a: Path, b: Path) -> list:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    diff = sorted(set(fa) ^ set(fb))
    diff += [f for f in fa if f in set(fb) and not filecmp.cmp(a / f, b / f, shallow=False)]
    return diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--config", type=Path, help="TrainConfig JSON; defaults to the acceptance setting")
    ap.add_argument("--names", default=",".join(tr.ABLATIONS))
    ap.add_argument("--compare", type=Path, help="earlier run directory to compare byte for byte")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig.load(args.config) if args.config else acceptance_config()
    t0 = time.perf_counter()
    res = tr.run_experiment(cfg, args.out, args.names.split(","), tr.SceneCache(cfg))
    minutes = (time.perf_counter() - t0) / 60
    print(format_table({k: MeshMetrics(**v["mean"]) for k, v in res.items()}))
    print(json.dumps({k: v["train_seconds"] for k, v in res.items()}), f"total {minutes:.1f} min")
    full = res.get("full", {}).get("mean", {}).get("fscore")
    if full is not None:
        for k, v in res.items():
            if k != "full":
                print(f"{k}: {'below' if v['mean']['fscore'] < full else 'NOT below'} full")
    if args.compare:
        diff = same_tree(args.compare, args.out)
        print("byte-identical" if not diff else f"{len(diff)} differing files, e.g. {diff[:3]}")
        return 1 if diff else 0
    return 0


if __name__ == "__main__":
    sys.exit(main())
