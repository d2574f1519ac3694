"""Full desk-scale demo: collect, annotate, train, evaluate and write every report.

    python scripts/run_demo.py --out runs/demo --seed 0
"""
import argparse
import json
import logging
import resource
import time

from vlad import pipeline as pl


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--episodes", type=int, default=50, help="teacher episodes per task")
    p.add_argument("--eval-episodes", type=int, default=25, help="evaluation episodes per task")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg = pl.DemoConfig(episodes_per_task=args.episodes, eval_episodes_per_task=args.eval_episodes,
                        epochs=args.epochs, seed=args.seed, workers=args.workers)
    t0 = time.time()
    with pl.run_lock(args.out):
        summary = pl.run_demo(args.out, cfg)
    peak_mb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024
    print(json.dumps({"success": summary["success"], "flips": summary["flips"],
                      "wall_s": round(time.time() - t0, 1), "peak_mb": round(peak_mb, 1)}, indent=2))


if __name__ == "__main__":
    main()
