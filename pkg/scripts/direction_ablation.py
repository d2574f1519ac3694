"""Students with and without direction descriptions on the drawer_open + drawer_close mixture.

    python scripts/direction_ablation.py --out runs/ablation
"""
import argparse
import json
import logging
import time

from vlad import pipeline as pl


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=[0, 1, 2])
    p.add_argument("--episodes", type=int, default=100, help="teacher episodes per drawer task")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--workers", type=int, default=pl.default_workers())
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    t0 = time.time()
    res = pl.direction_ablation(args.out, args.seeds, args.episodes, args.epochs, args.eval_episodes, args.workers)
    print(json.dumps({"on": res["on"], "off": res["off"], "gap": res["gap"], "wall_s": round(time.time() - t0, 1)},
                     indent=2))


if __name__ == "__main__":
    main()
