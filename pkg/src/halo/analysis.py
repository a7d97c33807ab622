"""Reward-distribution analyses and report emission."""

from __future__ import annotations

import csv
import io
import shutil
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .rewards import scalarize

HIST_BINS = 30
HIST_EDGES = np.linspace(1.0, 4.0, HIST_BINS + 1)


class ConsistencyLabel(str, Enum):
    CONSISTENT = "Consistent"
    NONE = "None"
    INVERSE = "Inverse"


def patch_mean_scalar(grid) -> float:
    """Mean of the scalarized patch rewards of one (h_n, w_n, 5) grid."""
    return float(np.mean(scalarize(grid)))


def classify_consistency(v_a: float, v_b: float, pmean_a: float, pmean_b: float) -> ConsistencyLabel:
    if v_a == v_b or pmean_a == pmean_b:
        return ConsistencyLabel.NONE
    if (v_a > v_b) == (pmean_a > pmean_b):
        return ConsistencyLabel.CONSISTENT
    return ConsistencyLabel.INVERSE


def consistency_counts(corpus: Sequence[Sequence[tuple[float, float]]]) -> dict[ConsistencyLabel, int]:
    """Label counts over all within-prompt video pairs.

    ``corpus`` holds one group per prompt; each entry is ``(video_reward,
    patch_mean)`` for one video.
    """
    counts = {label: 0 for label in ConsistencyLabel}
    for group in corpus:
        for (va, pa), (vb, pb) in combinations(group, 2):
            counts[classify_consistency(va, vb, pa, pb)] += 1
    return counts


def consistency_distribution(corpus) -> dict[ConsistencyLabel, float]:
    counts = consistency_counts(corpus)
    n = sum(counts.values())
    if n == 0:
        raise ValueError("corpus has no within-prompt video pairs")
    return {label: c / n for label, c in counts.items()}


def inner_variance(grid) -> float:
    """Population variance of the scalarized patch rewards within one video."""
    return float(np.var(scalarize(grid)))


@dataclass
class LevelStats:
    count: np.ndarray  # (9,)
    mean: np.ndarray
    std: np.ndarray
    hist: np.ndarray  # (9, HIST_BINS)
    levels: np.ndarray = field(repr=False)  # (n_videos, 9), each row ascending


def sorted_levels(grids: Sequence) -> LevelStats:
    """Sort each video's nine scalarized patch rewards into levels L0..L8."""
    rows = []
    for g in grids:
        s = np.asarray(scalarize(g)).reshape(-1)
        if s.size != 9:
            raise ValueError(f"sorted levels need a 3x3 grid, got {s.size} patches")
        rows.append(np.sort(s))
    if not rows:
        raise ValueError("no videos to analyse")
    levels = np.stack(rows)
    hist = np.stack([np.histogram(levels[:, k], bins=HIST_EDGES)[0] for k in range(9)])
    return LevelStats(
        count=np.full(9, len(rows)),
        mean=levels.mean(axis=0),
        std=levels.std(axis=0),
        hist=hist,
        levels=levels,
    )


def spearman(a, b) -> float:
    """Rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two observations")
    ra, rb = rankdata(a), rankdata(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denom == 0:
        raise ValueError("Spearman correlation is undefined for a constant list")
    return float(np.clip(np.sum(da * db) / denom, -1.0, 1.0))


@dataclass
class ReportData:
    consistency: dict[ConsistencyLabel, int]
    variances: list[tuple[str, int, float]]  # (prompt_id, video_id, variance)
    levels_before: LevelStats
    levels_after: LevelStats
    trend: list  # TrendPoint
    spearman_rows: list[tuple[str, int, float]]  # (comparison, n, rho)
    summary: dict[str, object] = field(default_factory=dict)


def _csv(rows: list[list]) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode("utf-8")


def _num(x) -> str:
    return repr(float(x))


def _levels_rows(ls: LevelStats) -> list[list]:
    header = ["level", "count", "mean", "std"] + [f"bin_{k}" for k in range(HIST_BINS)]
    rows = [header]
    for k in range(9):
        rows.append([f"L{k}", int(ls.count[k]), _num(ls.mean[k]), _num(ls.std[k])] + [int(v) for v in ls.hist[k]])
    return rows


def render_csvs(data: ReportData) -> dict[str, bytes]:
    total = sum(data.consistency.values())
    if total == 0 or not data.variances:
        raise ValueError("empty corpus: nothing to report")
    files = {
        "consistency.csv": _csv(
            [["label", "count", "proportion"]]
            + [[lab.value, data.consistency[lab], _num(data.consistency[lab] / total)] for lab in ConsistencyLabel]
        ),
        "variance.csv": _csv([["prompt_id", "video_id", "variance"]] + [[p, v, _num(x)] for p, v, x in data.variances]),
        "levels_before.csv": _csv(_levels_rows(data.levels_before)),
        "levels_after.csv": _csv(_levels_rows(data.levels_after)),
        "trend.csv": _csv(
            [["step", "winner_reward", "loser_reward"]]
            + [[p.step, _num(p.winner_reward), _num(p.loser_reward)] for p in data.trend]
        ),
        "spearman.csv": _csv([["comparison", "n", "rho"]] + [[name, n, _num(r)] for name, n, r in data.spearman_rows]),
    }
    return files


def render_svg(data: ReportData) -> bytes:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "halo-report", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(2, 2, figsize=(11, 8))
        labels = [lab.value for lab in ConsistencyLabel]
        total = sum(data.consistency.values())
        axes[0, 0].bar(labels, [data.consistency[lab] / total for lab in ConsistencyLabel], color=["tab:green", "tab:gray", "tab:red"])
        axes[0, 0].set_title("Preference consistency")
        axes[0, 0].set_ylabel("proportion")

        axes[0, 1].hist([v for _, _, v in data.variances], bins=HIST_BINS, color="tab:blue")
        axes[0, 1].set_title("Inner-video patch reward variance")

        lv = np.arange(9)
        for ls, name, color in ((data.levels_before, "before", "tab:orange"), (data.levels_after, "after", "tab:purple")):
            axes[1, 0].errorbar(lv, ls.mean, yerr=ls.std, label=name, color=color, marker="o", capsize=3)
        axes[1, 0].set_xticks(lv, [f"L{k}" for k in lv])
        axes[1, 0].set_title("Sorted patch reward levels")
        axes[1, 0].legend()

        steps = [p.step for p in data.trend]
        axes[1, 1].plot(steps, [p.winner_reward for p in data.trend], label="winner")
        axes[1, 1].plot(steps, [p.loser_reward for p in data.trend], label="loser")
        axes[1, 1].set_title("Implicit reward trend")
        axes[1, 1].set_xlabel("step")
        axes[1, 1].legend()
        fig.tight_layout()
        buf = io.BytesIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


def render_summary(data: ReportData) -> bytes:
    total = sum(data.consistency.values())
    lines = ["HALO desk-scale analysis", ""]
    for lab in ConsistencyLabel:
        lines.append(f"consistency {lab.value}: {data.consistency[lab]} ({data.consistency[lab] / total:.4f})")
    var = np.array([v for _, _, v in data.variances])
    lines.append(f"inner variance: mean {var.mean():.6f} max {var.max():.6f} over {var.size} videos")
    for k in range(9):
        lines.append(f"L{k}: before {data.levels_before.mean[k]:.6f} after {data.levels_after.mean[k]:.6f}")
    for name, n, rho in data.spearman_rows:
        lines.append(f"spearman {name} (n={n}): {rho:.6f}")
    if data.trend:
        last = data.trend[-1]
        lines.append(f"final implicit reward: winner {last.winner_reward:.6f} loser {last.loser_reward:.6f}")
    for key in sorted(data.summary):
        lines.append(f"{key}: {data.summary[key]}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def emit_report(data: ReportData, out_dir) -> list[Path]:
    """Write every report file, or none of them if anything fails."""
    files = render_csvs(data)
    files["report.svg"] = render_svg(data)
    files["summary.txt"] = render_summary(data)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".report-", dir=out_dir))
    try:
        for name, blob in files.items():
            (staging / name).write_bytes(blob)
        written = []
        for name in files:
            dest = out_dir / name
            (staging / name).replace(dest)
            written.append(dest)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return written
