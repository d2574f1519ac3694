"""Alpha x descriptions sweep over an existing collection; re-running resumes.

    vlad collect --out runs/sweep && python scripts/alpha_sweep.py --out runs/sweep
"""
import argparse
import json
import logging

from vlad import evaluation as ev
from vlad import pipeline as pl
from vlad import student as st


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--eval-episodes", type=int, default=25)
    p.add_argument("--alphas", type=lambda s: [float(x) for x in s.split(",")], default=list(pl.ALPHA_GRID))
    p.add_argument("--taxonomies", type=lambda s: [int(x) for x in s.split(",")], default=[9])
    p.add_argument("--workers", type=int, default=pl.default_workers())
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    with pl.run_lock(args.out):
        res = pl.sweep_stage(args.out, st.StudentConfig(epochs=args.epochs, seed=args.seed),
                             ev.EvalConfig(episodes=args.eval_episodes, seed=args.seed), args.alphas,
                             taxonomies=args.taxonomies, workers=args.workers)
    print(json.dumps({"computed": res.computed, "skipped": res.skipped, "csv": str(res.csv)}, indent=2))


if __name__ == "__main__":
    main()
