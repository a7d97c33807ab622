"""Training-data scaling: align on growing prompt sets, report the gains.

Every run shares one cached base model, so only the pair corpus changes.

    python scripts/data_scaling_sweep.py --prompts 4 8 16 32 --dpo-steps 1000
"""

import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from halo.experiments import AlignmentExperiment, run_alignment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--prompts", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--dpo-steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/data-scaling")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = AlignmentExperiment(seed=args.seed, dpo_steps=args.dpo_steps, base_cache=str(out / "base.ckpt"))
    rows = []
    for n in args.prompts:
        res = run_alignment(replace(base, n_prompts=n))
        gain = res.video_after - res.video_before
        rows.append([n, res.n_pairs, gain, float(np.min(res.levels_after - res.levels_before)), float(res.winner[-1] - res.loser[-1])])
        print(f"prompts {n:4d}  pairs {res.n_pairs:5d}  video gain {gain:+.4f}  worst level shift {rows[-1][3]:+.4f}")

    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prompts", "pairs", "video_gain", "min_level_shift", "final_reward_gap"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
