"""Oracle-reward alignment run: trend CSV, before/after sorted levels, summary.

    python scripts/alignment_experiment.py --out runs/align --dpo-steps 2000
"""

import argparse
import csv
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path

from halo.experiments import AlignmentExperiment, final_half_trends, run_alignment
from halo.grandpo import write_trend


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/alignment-experiment")
    defaults = AlignmentExperiment()
    for f in fields(AlignmentExperiment):
        value = getattr(defaults, f.name)
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(value), default=value)
    return ap.parse_args()


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args = parse_args()
    exp = AlignmentExperiment(**{f.name: getattr(args, f.name) for f in fields(AlignmentExperiment)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    res = run_alignment(exp)
    write_trend(out / "trend.csv", res.trend)
    with open(out / "levels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "before", "after"])
        for k, (b, a) in enumerate(zip(res.levels_before, res.levels_after)):
            w.writerow([f"L{k}", repr(float(b)), repr(float(a))])
    winner_up, loser_down = final_half_trends(res)
    summary = {
        "experiment": asdict(exp),
        "pairs": res.n_pairs,
        "final_winner": float(res.winner[-1]),
        "final_loser": float(res.loser[-1]),
        "winner_non_decreasing_final_half": winner_up,
        "loser_non_increasing_final_half": loser_down,
        "video_reward_before": res.video_before,
        "video_reward_after": res.video_after,
        "timings": res.timings,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "experiment"}, indent=2))


if __name__ == "__main__":
    main()
