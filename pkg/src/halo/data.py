"""Prompt filtering and preference-pair construction."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from .io import canonical_json, read_jsonl, write_jsonl

PROVENANCES = ("training", "generated", "evaluation")


class EmptyDatasetError(ValueError):
    """No trainable preference pair survived the admission criteria."""


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    text: str
    prompt_class: int
    provenance: str = "generated"


def check_unique(prompts: Sequence[Prompt]) -> None:
    seen = set()
    for p in prompts:
        if p.prompt_id in seen:
            raise ValueError(f"duplicate prompt_id {p.prompt_id!r}")
        seen.add(p.prompt_id)


def write_prompts(path, prompts: Sequence[Prompt]) -> None:
    check_unique(prompts)
    write_jsonl(
        path,
        [{"prompt_id": p.prompt_id, "text": p.text, "class": p.prompt_class, "provenance": p.provenance} for p in prompts],
    )


def read_prompts(path) -> list[Prompt]:
    prompts = [Prompt(r["prompt_id"], r["text"], int(r["class"]), r["provenance"]) for r in read_jsonl(path)]
    check_unique(prompts)
    return prompts


def _trigrams(text: str) -> Counter:
    s = text.lower()
    return Counter(s[i : i + 3] for i in range(len(s) - 2))


def _profile(text: str) -> tuple[str, Counter, float]:
    c = _trigrams(text)
    return text.lower(), c, math.sqrt(sum(n * n for n in c.values()))


def _profile_similarity(pa, pb) -> float:
    (la, ca, na), (lb, cb, nb) = pa, pb
    if la == lb:
        return 1.0
    if not ca or not cb:
        return 0.0
    if len(cb) < len(ca):
        ca, cb = cb, ca
    dot = sum(n * cb[g] for g, n in ca.items() if g in cb)
    return min(1.0, dot / (na * nb))


def prompt_similarity(a: str, b: str) -> float:
    """Cosine similarity of lowercased character-trigram count vectors."""
    return _profile_similarity(_profile(a), _profile(b))


def filter_prompts(generated: Sequence[Prompt], existing: Sequence[Prompt], tau: float = 0.85) -> list[Prompt]:
    """Keep generated prompts whose max similarity to the evaluation set and to
    earlier kept prompts stays below ``tau``; input order decides precedence."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    pool = [_profile(p.text) for p in existing]
    kept = []
    for p in generated:
        prof = _profile(p.text)
        if all(_profile_similarity(prof, q) < tau for q in pool):
            kept.append(p)
            pool.append(prof)
    return kept


@dataclass
class Candidate:
    video_id: int
    video_reward: float
    patch_rewards: np.ndarray  # (h_n, w_n) scalarized
    latent: np.ndarray | None = None


@dataclass
class CandidateSet:
    prompt_id: str
    prompt_class: int
    candidates: list[Candidate]


@dataclass
class PreferencePair:
    prompt_id: str
    winner_id: int
    loser_id: int
    v_w: float
    v_l: float
    p_w: np.ndarray
    p_l: np.ndarray
    prompt_class: int = 0
    x_w: np.ndarray | None = field(default=None, repr=False)
    x_l: np.ndarray | None = field(default=None, repr=False)

    def swapped(self) -> "PreferencePair":
        return PreferencePair(
            self.prompt_id, self.loser_id, self.winner_id, self.v_l, self.v_w,
            self.p_l, self.p_w, self.prompt_class, self.x_l, self.x_w,
        )


@dataclass(frozen=True)
class MarginStats:
    m_v: float
    m_p: float


@dataclass(frozen=True)
class Margin:
    a: int
    b: int
    video: float
    patches: np.ndarray  # flattened row-major absolute patch margins


def pairwise_margins(cs: CandidateSet) -> list[Margin]:
    """Absolute reward margins for every unordered candidate pair."""
    if len(cs.candidates) < 2:
        raise ValueError(f"prompt {cs.prompt_id} has fewer than 2 candidates")
    ordered = sorted(cs.candidates, key=lambda c: c.video_id)
    out = []
    for ca, cb in combinations(ordered, 2):
        out.append(
            Margin(
                ca.video_id,
                cb.video_id,
                abs(ca.video_reward - cb.video_reward),
                np.abs(np.asarray(ca.patch_rewards) - np.asarray(cb.patch_rewards)).reshape(-1),
            )
        )
    return out


def median(values: Iterable[float]) -> float:
    """Median; even counts average the two middle order statistics."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("median of an empty list")
    return float(np.median(arr))


def _admit(m: Margin, m_v: float, m_p: float, strict: bool) -> bool:
    if strict:
        return m.video > m_v or bool(np.any(m.patches > m_p))
    return m.video >= m_v or bool(np.any(m.patches >= m_p))


def _orient(cs: CandidateSet, m: Margin) -> PreferencePair:
    by_id = {c.video_id: c for c in cs.candidates}
    a, b = by_id[m.a], by_id[m.b]
    # m.a < m.b, so equal rewards fall to the lower id
    win, lose = (b, a) if b.video_reward > a.video_reward else (a, b)
    return PreferencePair(
        cs.prompt_id,
        win.video_id,
        lose.video_id,
        float(win.video_reward),
        float(lose.video_reward),
        np.asarray(win.patch_rewards, dtype=np.float64),
        np.asarray(lose.patch_rewards, dtype=np.float64),
        cs.prompt_class,
        win.latent,
        lose.latent,
    )


def build_pairs(
    candidates: Sequence[CandidateSet], median_scope: str = "global", strict: bool = True
) -> tuple[list[PreferencePair], MarginStats]:
    """Retain pairs whose video margin exceeds the median video margin or whose
    patch margin at any grid cell exceeds the median patch margin.

    Medians are taken over every pair of every prompt (``median_scope="global"``).
    With ``"per_prompt"`` each prompt is gated by its own medians while the
    returned stats, which set the pair weights, stay global.
    """
    if median_scope not in ("global", "per_prompt"):
        raise ValueError(f"unknown median scope {median_scope!r}")
    usable = [cs for cs in candidates if len(cs.candidates) >= 2]
    if not usable:
        raise EmptyDatasetError("no prompt has at least two scored candidates")
    margins = [(cs, pairwise_margins(cs)) for cs in usable]
    all_v = [m.video for _, ms in margins for m in ms]
    all_p = np.concatenate([m.patches for _, ms in margins for m in ms])
    stats = MarginStats(median(all_v), median(all_p))

    pairs = []
    for cs, ms in margins:
        if median_scope == "global":
            m_v, m_p = stats.m_v, stats.m_p
        else:
            m_v = median(m.video for m in ms)
            m_p = median(np.concatenate([m.patches for m in ms]))
        pairs += [_orient(cs, m) for m in ms if _admit(m, m_v, m_p, strict)]
    if not pairs:
        raise EmptyDatasetError("every candidate pair failed both admission criteria")
    return pairs, stats


def write_pairs(path, pairs: Sequence[PreferencePair], stats: MarginStats, config_digest: str) -> None:
    header = {"header": True, "m_V": stats.m_v, "m_P": stats.m_p, "config_digest": config_digest, "n_pairs": len(pairs)}
    rows = [header] + [
        {
            "prompt_id": p.prompt_id,
            "winner_id": p.winner_id,
            "loser_id": p.loser_id,
            "v_w": p.v_w,
            "v_l": p.v_l,
            "p_w": [float(v) for v in np.asarray(p.p_w).reshape(-1)],
            "p_l": [float(v) for v in np.asarray(p.p_l).reshape(-1)],
        }
        for p in pairs
    ]
    write_jsonl(path, rows)


def read_pairs(path, grid_shape: tuple[int, int] = (3, 3)) -> tuple[list[PreferencePair], MarginStats, dict]:
    rows = read_jsonl(path)
    if not rows or not rows[0].get("header"):
        raise ValueError(f"{path} lacks a header line")
    header = rows[0]
    pairs = [
        PreferencePair(
            r["prompt_id"], int(r["winner_id"]), int(r["loser_id"]), float(r["v_w"]), float(r["v_l"]),
            np.array(r["p_w"]).reshape(grid_shape), np.array(r["p_l"]).reshape(grid_shape),
        )
        for r in rows[1:]
    ]
    return pairs, MarginStats(float(header["m_V"]), float(header["m_P"])), header


def pairs_digest(pairs: Sequence[PreferencePair]) -> str:
    import hashlib

    rows = [[p.prompt_id, p.winner_id, p.loser_id, p.v_w, p.v_l, list(map(float, np.ravel(p.p_w))), list(map(float, np.ravel(p.p_l)))] for p in pairs]
    return hashlib.sha256(canonical_json(rows).encode()).hexdigest()
