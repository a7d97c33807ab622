"""Oracle-reward alignment experiment shared by the acceptance suite and scripts/.

Trains (or loads) a base model on the flawed synthetic corpus, samples
candidates, scores them with the oracle, builds pairs, runs Gran-DPO and
measures the before/after sorted patch levels and video reward.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grandpo as gd
from .analysis import sorted_levels
from .data import Candidate, CandidateSet, build_pairs
from .diffusion import Denoiser, DenoiserArch, ancestral_sample, load_checkpoint, make_schedule, save_checkpoint, train_base
from .patches import make_grid
from .rewards import OracleReward, scalarize
from .rng import SeededRng
from .synthetic import flawed_samples, make_targets

log = logging.getLogger(__name__)


@dataclass
class AlignmentExperiment:
    seed: int = 0
    n_classes: int = 4
    # base model
    base_videos: int = 4096
    base_steps: int = 1500
    base_lr: float = 3e-3
    base_batch: int = 32
    defect_prob: float = 0.3
    flawed_fraction: float = 0.5
    data_noise: float = 0.1
    # candidates
    n_prompts: int = 16
    samples_per_prompt: int = 5
    oracle_lambda: float = 0.5
    # alignment
    dpo_beta: float = 0.1
    dpo_lr: float = 1e-5
    dpo_steps: int = 2000
    dpo_batch: int = 8
    eval_pairs: int = 256  # at least the pair count: trends cover every pair
    eval_draws: int = 8
    trend_points: int = 40
    # evaluation
    n_videos: int = 50
    base_cache: str = ""


@dataclass
class AlignmentResult:
    n_pairs: int
    trend: list[gd.TrendPoint]
    levels_before: np.ndarray
    levels_after: np.ndarray
    video_before: float
    video_after: float
    timings: dict = field(default_factory=dict)
    # kept so callers can reuse the trained models and the teacher
    base: Denoiser | None = None
    aligned: Denoiser | None = None
    oracle: OracleReward | None = None

    @property
    def winner(self) -> np.ndarray:
        return np.array([p.winner_reward for p in self.trend])

    @property
    def loser(self) -> np.ndarray:
        return np.array([p.loser_reward for p in self.trend])


def smooth(x, width: int = 5) -> np.ndarray:
    """Moving average over complete windows only."""
    return np.convolve(np.asarray(x, dtype=float), np.ones(width) / width, mode="valid")


def final_half_trends(result: AlignmentResult, width: int = 5) -> tuple[bool, bool]:
    """Smoothed winner non-decreasing and loser non-increasing over the final half."""
    h = len(result.trend) // 2
    w, l = smooth(result.winner[h:], width), smooth(result.loser[h:], width)
    return bool(np.all(np.diff(w) >= 0)), bool(np.all(np.diff(l) <= 0))


def base_model(exp: AlignmentExperiment, targets, grid, sched, root: SeededRng) -> Denoiser:
    if exp.base_cache and Path(exp.base_cache).exists():
        d, _, _ = load_checkpoint(exp.base_cache)
        return d
    classes = root.derive("base-classes").integers(0, exp.n_classes - 1, size=exp.base_videos)
    data = flawed_samples(targets, classes, grid, root.derive("base-data"), exp.defect_prob,
                          noise=exp.data_noise, flawed_fraction=exp.flawed_fraction)
    d = Denoiser.init(DenoiserArch(n_classes=exp.n_classes), root.derive("init"))
    d, _ = train_base(d, data, classes, sched, root.derive("train"), steps=exp.base_steps, batch=exp.base_batch, lr=exp.base_lr)
    if exp.base_cache:
        save_checkpoint(exp.base_cache, d, sched, exp.base_steps)
    return d


def run_alignment(exp: AlignmentExperiment) -> AlignmentResult:
    root = SeededRng(exp.seed, "alignment-experiment")
    arch = DenoiserArch(n_classes=exp.n_classes)
    grid = make_grid(arch.height, arch.width, 3, 3)
    sched = make_schedule()
    targets = make_targets(root.derive("targets"), exp.n_classes, arch.latent_shape)
    oracle = OracleReward(targets, lam=exp.oracle_lambda)
    timings = {}

    t0 = time.perf_counter()
    base = base_model(exp, targets, grid, sched, root)
    timings["base"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sets = []
    for p in range(exp.n_prompts):
        cls = p % exp.n_classes
        cands = []
        for k in range(exp.samples_per_prompt):
            x = ancestral_sample(base, cls, root.derive(f"candidate/{p}/{k}"), sched)
            cands.append(Candidate(k, scalarize(oracle.score_video(cls, x)), scalarize(oracle.score_patches(cls, x, grid)), x))
        sets.append(CandidateSet(f"p{p:03d}", cls, cands))
    pairs, stats = build_pairs(sets)
    timings["candidates"] = time.perf_counter() - t0
    log.info("%d pairs, m_V=%.4f m_P=%.4f", len(pairs), stats.m_v, stats.m_p)

    t0 = time.perf_counter()
    cfg = gd.DpoConfig.from_stats(
        stats, beta=exp.dpo_beta, lr=exp.dpo_lr, steps=exp.dpo_steps, batch=exp.dpo_batch, grid=grid,
        trend_every=max(1, exp.dpo_steps // exp.trend_points), eval_pairs=exp.eval_pairs, eval_draws=exp.eval_draws, seed=exp.seed,
    )
    aligned, trend = gd.train(pairs, base, sched, cfg)
    timings["align"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    classes = [k % exp.n_classes for k in range(exp.n_videos)]

    def evaluate(model):
        # the same noise labels for both models, so differences come from the weights alone
        videos = [ancestral_sample(model, c, root.derive(f"eval/{k}"), sched) for k, c in enumerate(classes)]
        video = float(np.mean([scalarize(oracle.score_video(c, v)) for c, v in zip(classes, videos)]))
        levels = sorted_levels([oracle.score_patches(c, v, grid) for c, v in zip(classes, videos)]).mean
        return video, levels

    vb, lb = evaluate(base)
    va, la = evaluate(aligned)
    timings["evaluate"] = time.perf_counter() - t0
    return AlignmentResult(len(pairs), trend, lb, la, vb, va, timings, base, aligned, oracle)
