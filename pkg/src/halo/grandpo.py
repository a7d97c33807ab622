"""Gran-DPO: video-level plus patch-level preference optimization of a denoiser
against a frozen reference copy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import MarginStats, PreferencePair
from .diffusion import Denoiser, DiffusionSchedule, forward_noise
from .io import write_bytes_atomic
from .patches import GridSpec, make_grid, slice_like
from .rng import SeededRng

LN2 = math.log(2.0)


@dataclass
class DpoConfig:
    beta: float = 10.0
    T: int = 50
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    batch: int = 1
    grid: GridSpec = field(default_factory=lambda: make_grid(12, 12, 3, 3))
    m_v: float = 1.0
    m_p: float = 1.0
    # "m_V" weighs video pairs by the video-margin median; "m_P" reproduces
    # the formula as printed, which divides video margins by m_P too
    video_denominator: str = "m_V"
    use_video: bool = True
    use_patch: bool = True
    use_weights: bool = True
    trend_every: int = 50
    eval_pairs: int = 16
    # fixed (t, noise) draws per evaluation pair; the trend averages over all of them
    eval_draws: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.m_v < 0 or self.m_p < 0:
            raise ValueError("margin medians must be non-negative")
        if self.eval_draws < 1:
            raise ValueError("eval_draws must be positive")
        if self.video_denominator not in ("m_V", "m_P"):
            raise ValueError(f"unknown video denominator {self.video_denominator!r}")

    @property
    def beta_t(self) -> float:
        return self.beta * self.T

    @classmethod
    def from_stats(cls, stats: MarginStats, **kw) -> "DpoConfig":
        return cls(m_v=stats.m_v, m_p=stats.m_p, **kw)


@dataclass
class PairDraw:
    t: int
    eps_w: np.ndarray
    eps_l: np.ndarray
    x_w_t: np.ndarray
    x_l_t: np.ndarray


@dataclass(frozen=True)
class TrendPoint:
    step: int
    winner_reward: float
    loser_reward: float


def draw_for_pair(pair: PreferencePair, sched: DiffusionSchedule, t_rng: SeededRng, w_rng: SeededRng, l_rng: SeededRng) -> PairDraw:
    """Shared timestep, independent noise per side."""
    t = t_rng.integers(1, sched.T)
    eps_w = w_rng.normal(pair.x_w.shape)
    eps_l = l_rng.normal(pair.x_l.shape)
    return PairDraw(t, eps_w, eps_l, forward_noise(pair.x_w, t, eps_w, sched), forward_noise(pair.x_l, t, eps_l, sched))


def side_advantage(d: Denoiser, ref: Denoiser, x_t, cls, t, eps, theta=None):
    """``||eps - eps_theta||^2 - ||eps - eps_ref||^2``; only the policy term is differentiable."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != np.shape(x_t):
        raise ValueError(f"noise shape {eps.shape} does not match latent {np.shape(x_t)}")
    ref_err = float(np.sum((eps - ref.predict(x_t, cls, t)) ** 2))
    return tn.sub(tn.sq_norm(tn.sub(eps, d.apply(x_t, cls, t, theta))), ref_err)


def indicator_F(p_w: float, p_l: float) -> int:
    if p_w > p_l:
        return 1
    if p_w < p_l:
        return -1
    return 0


def pair_weight(r_w: float, r_l: float, m: float) -> float:
    """Reward margin over ``m``, clamped to [0, 1]."""
    if m <= 0:
        raise ValueError(f"margin normalizer must be positive, got {m}")
    return max(min(abs(r_w - r_l) / m, 1.0), 0.0)


def _dpo_term(adv_w, adv_l, beta_t: float, sign: float = 1.0):
    return tn.scale(tn.log_sigmoid(tn.scale(tn.sub(adv_w, adv_l), -beta_t * sign)), -1.0)


def video_dpo_loss(d: Denoiser, ref: Denoiser, pair: PreferencePair, draw: PairDraw, cfg: DpoConfig, theta=None):
    adv_w = side_advantage(d, ref, draw.x_w_t, pair.prompt_class, draw.t, draw.eps_w, theta)
    adv_l = side_advantage(d, ref, draw.x_l_t, pair.prompt_class, draw.t, draw.eps_l, theta)
    return _dpo_term(adv_w, adv_l, cfg.beta_t)


def patch_dpo_loss(d: Denoiser, ref: Denoiser, pair: PreferencePair, draw: PairDraw, idx, cfg: DpoConfig, theta=None):
    """Patch term at ``idx``. The denoisers see the full noised latents; their
    outputs and the noise are then restricted to the patch."""
    g = cfg.grid
    g.bounds(*idx)
    sign = indicator_F(pair.p_w[idx], pair.p_l[idx])
    if sign == 0:
        return LN2
    c, t = pair.prompt_class, draw.t

    def adv(x_t, eps):
        pol = slice_like(tn.sub(eps, d.apply(x_t, c, t, theta)), idx, g)
        ref_err = float(np.sum(slice_like(eps - ref.predict(x_t, c, t), idx, g) ** 2))
        return tn.sub(tn.sq_norm(pol), ref_err)

    return _dpo_term(adv(draw.x_w_t, draw.eps_w), adv(draw.x_l_t, draw.eps_l), cfg.beta_t, sign)


def loss_weights(pair: PreferencePair, cfg: DpoConfig) -> tuple[float, np.ndarray]:
    g = cfg.grid
    if not cfg.use_weights:
        return 1.0, np.ones((g.h_n, g.w_n))
    m_video = cfg.m_v if cfg.video_denominator == "m_V" else cfg.m_p
    w_video = pair_weight(pair.v_w, pair.v_l, m_video)
    w_patch = np.array([[pair_weight(pair.p_w[i, j], pair.p_l[i, j], cfg.m_p) for j in range(g.w_n)] for i in range(g.h_n)])
    return w_video, w_patch


def gran_dpo_loss(d: Denoiser, ref: Denoiser, pair: PreferencePair, draw: PairDraw, cfg: DpoConfig, theta=None):
    """Weighted video DPO term plus the weighted sum of all patch DPO terms.

    One policy pass covers both sides (a batch of two) and feeds every term.
    """
    g = cfg.grid
    c, t = pair.prompt_class, draw.t
    x_t = np.stack([draw.x_w_t, draw.x_l_t])
    eps = np.stack([draw.eps_w, draw.eps_l])
    resid = tn.sub(eps, d.apply(x_t, c, t, theta))
    ref_resid = eps - ref.predict(x_t, c, t)
    w_video, w_patch = loss_weights(pair, cfg)

    terms = []
    const = 0.0
    if cfg.use_video and w_video > 0:
        adv_w = tn.sub(tn.sq_norm(tn.getitem(resid, 0)), float(np.sum(ref_resid[0] ** 2)))
        adv_l = tn.sub(tn.sq_norm(tn.getitem(resid, 1)), float(np.sum(ref_resid[1] ** 2)))
        terms.append(tn.scale(_dpo_term(adv_w, adv_l, cfg.beta_t), w_video))
    if cfg.use_patch:
        for i, j in g.indices():
            w = w_patch[i, j]
            if w == 0:
                continue
            sign = indicator_F(pair.p_w[i, j], pair.p_l[i, j])
            if sign == 0:
                const += w * LN2
                continue
            rows, cols = g.bounds(i, j)
            sel = (slice(None), slice(None), rows, cols, slice(None))
            pol = tn.sum_sq_rows(tn.getitem(resid, sel))
            ref_sq = np.sum(ref_resid[sel].reshape(2, -1) ** 2, axis=1)
            adv = tn.sub(pol, ref_sq)
            terms.append(tn.scale(_dpo_term(tn.getitem(adv, 0), tn.getitem(adv, 1), cfg.beta_t, sign), w))
    loss = const
    for term in terms:
        loss = tn.add(loss, term)
    return loss if terms else float(const)


def implicit_rewards(d: Denoiser, ref: Denoiser, pairs: Sequence[PreferencePair], draws: Sequence[PairDraw], cfg: DpoConfig) -> tuple[float, float]:
    """Mean of ``-beta*T * side_advantage`` for winners and for losers."""
    win, lose = [], []
    for pair, draw in zip(pairs, draws):
        win.append(-cfg.beta_t * side_advantage(d, ref, draw.x_w_t, pair.prompt_class, draw.t, draw.eps_w))
        lose.append(-cfg.beta_t * side_advantage(d, ref, draw.x_l_t, pair.prompt_class, draw.t, draw.eps_l))
    return float(np.mean(win)), float(np.mean(lose))


def train(
    pairs: Sequence[PreferencePair], base: Denoiser, sched: DiffusionSchedule, cfg: DpoConfig
) -> tuple[Denoiser, list[TrendPoint]]:
    """Fine-tune a copy of ``base`` on fixed preference pairs; ``base`` is the frozen reference."""
    if not pairs:
        raise ValueError("no preference pairs to train on")
    if any(p.x_w is None or p.x_l is None for p in pairs):
        raise ValueError("pairs must carry their latents")
    ref = base.copy()
    model = base.copy()
    opt = tn.Adam(model.n_params, lr=cfg.lr)
    root = SeededRng(cfg.seed, "gran-dpo")
    shuffle, t_rng = root.derive("shuffle"), root.derive("timestep")
    w_rng, l_rng = root.derive("noise-winner"), root.derive("noise-loser")

    ev = root.derive("eval")
    eval_idx = ev.permutation(len(pairs))[: min(cfg.eval_pairs, len(pairs))]
    eval_pairs, eval_draws = [], []
    for k, p in enumerate(pairs[i] for i in sorted(eval_idx)):
        for j in range(cfg.eval_draws):
            tag = f"{k}" if j == 0 else f"{k}/{j}"
            eval_pairs.append(p)
            eval_draws.append(draw_for_pair(p, sched, ev.derive(f"t{tag}"), ev.derive(f"w{tag}"), ev.derive(f"l{tag}")))

    trend = [TrendPoint(0, *implicit_rewards(model, ref, eval_pairs, eval_draws, cfg))]
    order: list[int] = []
    for step in range(1, cfg.steps + 1):
        grads = np.zeros(model.n_params)
        for _ in range(cfg.batch):
            if not order:
                order = list(shuffle.permutation(len(pairs)))
            pair = pairs[order.pop(0)]
            draw = draw_for_pair(pair, sched, t_rng, w_rng, l_rng)
            _, g = tn.value_and_grad(lambda th: gran_dpo_loss(model, ref, pair, draw, cfg, th), model.params.data)
            grads += g
        model.params.data = opt.step(model.params.data, grads / cfg.batch)
        if step % cfg.trend_every == 0 or step == cfg.steps:
            trend.append(TrendPoint(step, *implicit_rewards(model, ref, eval_pairs, eval_draws, cfg)))
    return model, trend


def trend_csv(trend: Sequence[TrendPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "winner_reward", "loser_reward"])
    for p in trend:
        w.writerow([p.step, repr(p.winner_reward), repr(p.loser_reward)])
    return buf.getvalue()


def write_trend(path, trend: Sequence[TrendPoint]) -> None:
    write_bytes_atomic(path, trend_csv(trend).encode("utf-8"))


def read_trend(path) -> list[TrendPoint]:
    with open(path, newline="") as fh:
        return [TrendPoint(int(r["step"]), float(r["winner_reward"]), float(r["loser_reward"])) for r in csv.DictReader(fh)]
