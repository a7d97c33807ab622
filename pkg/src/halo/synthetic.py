"""Synthetic desk-scale world: class target latents, a flawed training
distribution for the base model, and template prompts."""

from __future__ import annotations

import numpy as np

from .data import Prompt, filter_prompts
from .patches import GridSpec
from .rng import SeededRng

SUBJECTS = [
    ["a red kite", "a paper kite", "a striped kite"],
    ["a golden retriever", "a small puppy", "a sleepy dog"],
    ["a sailboat", "a fishing boat", "a wooden canoe"],
    ["a steam train", "a city tram", "a freight train"],
    ["a hot air balloon", "a weather balloon", "a bunch of balloons"],
    ["a grey cat", "a tabby kitten", "a black cat"],
    ["a bicycle", "a racing bike", "a vintage scooter"],
    ["a waterfall", "a mountain stream", "a rushing river"],
]
ACTIONS = [
    "drifting slowly", "moving left to right", "spinning in circles", "rising gently",
    "shaking in the wind", "turning around", "gliding forward", "bouncing playfully",
]
SETTINGS = [
    "under a clear blue sky", "at sunset", "in heavy rain", "on a foggy morning",
    "in a snowy landscape", "beside a quiet lake", "in a crowded street", "at night with city lights",
    "over rolling hills", "in a desert", "through a pine forest", "near the ocean",
]
STYLES = ["", ", cinematic lighting", ", in watercolor style", ", shot on film", ", slow motion", ", aerial view"]


def make_targets(rng: SeededRng, n_classes: int, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Smooth travelling-wave patterns, one per class, values within [-1, 1]."""
    f, h, w, c = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.zeros((n_classes,) + shape)
    for k in range(n_classes):
        params = rng.uniform((c, 2, 5))
        for ch in range(c):
            for frame in range(f):
                wave = np.zeros((h, w))
                for a, fy, fx, phase, speed in params[ch]:
                    wave += (0.5 + a) * np.cos(2 * np.pi * (1 + 2 * fy * xx + 2 * fx * yy) * 0.5 + 2 * np.pi * phase + speed * frame)
                out[k, frame, :, :, ch] = wave / np.max(np.abs(wave))
    return out


def flawed_samples(
    targets: np.ndarray,
    classes: np.ndarray,
    grid: GridSpec,
    rng: SeededRng,
    defect_prob: float = 0.3,
    defect_scale: float = 1.0,
    noise: float = 0.1,
    flawed_fraction: float = 0.5,
) -> np.ndarray:
    """Class targets with i.i.d. noise and local patch defects in some videos.

    A ``flawed_fraction`` of the videos has each patch shifted with
    probability ``defect_prob``. The shift magnitude varies per defect but its
    direction is fixed per (class, patch), a systematic local artifact the
    base model learns as part of its prior. The shifted patches are what the
    patch-level reward is meant to catch.
    """
    n = len(classes)
    shape = targets.shape[1:]
    x = targets[classes] + noise * rng.normal((n,) + shape)
    flawed = rng.uniform(n) < flawed_fraction
    hit = (rng.uniform((n, grid.h_n, grid.w_n)) < defect_prob) & flawed[:, None, None]
    amp = defect_scale * (0.5 + rng.uniform((n, grid.h_n, grid.w_n)))
    direction = np.where(rng.uniform((len(targets), grid.h_n, grid.w_n)) < 0.5, -1.0, 1.0)
    sign = direction[classes]
    for i, j in grid.indices():
        rows, cols = grid.bounds(i, j)
        off = np.where(hit[:, i, j], amp[:, i, j] * sign[:, i, j], 0.0)
        x[:, :, rows, cols, :] += off[:, None, None, None, None]
    return x


def template_prompts(rng: SeededRng, n: int, n_classes: int, provenance: str, prefix: str) -> list[Prompt]:
    """Distinct template prompts; the subject group fixes the prompt class."""
    seen = set()
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * (n + 10):
            raise RuntimeError(f"could not build {n} distinct prompts")
        cls = rng.integers(0, n_classes - 1)
        group = SUBJECTS[cls % len(SUBJECTS)]
        text = (
            f"{group[rng.integers(0, len(group) - 1)]} {ACTIONS[rng.integers(0, len(ACTIONS) - 1)]} "
            f"{SETTINGS[rng.integers(0, len(SETTINGS) - 1)]}{STYLES[rng.integers(0, len(STYLES) - 1)]}"
        )
        if text in seen:
            continue
        seen.add(text)
        out.append(Prompt(f"{prefix}{len(out):04d}", text, cls, provenance))
    return out


def generate_prompt_sets(
    rng: SeededRng, n_generated: int, n_eval: int, n_classes: int, tau: float
) -> tuple[list[Prompt], list[Prompt]]:
    """Evaluation prompts plus generated prompts that survive the similarity filter.

    Keeps drawing candidates until ``n_generated`` survivors exist, so the
    returned set passes the filter by construction.
    """
    evaluation = template_prompts(rng.derive("evaluation"), n_eval, n_classes, "evaluation", "e")
    capacity = sum(len(SUBJECTS[k % len(SUBJECTS)]) for k in range(n_classes)) * len(ACTIONS) * len(SETTINGS) * len(STYLES)
    pool = template_prompts(rng.derive("generated"), min(3 * n_generated + 64, capacity), n_classes, "generated", "g")
    kept = filter_prompts(pool, evaluation, tau)
    if len(kept) < n_generated:
        raise RuntimeError(f"only {len(kept)} generated prompts survive tau={tau}")
    return kept[:n_generated], evaluation
