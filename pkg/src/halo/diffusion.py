"""Toy conditional latent-video diffusion model.

Latents are (frames, height, width, channels) arrays; a batch adds a leading
axis. The denoiser predicts the injected noise (epsilon parametrization).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .io import load_container, save_container
from .rng import SeededRng


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step coefficients, 1-indexed; index 0 holds the clean-data limit."""

    T: int
    beta_start: float
    beta_end: float
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> DiffusionSchedule:
    """Linear beta schedule; ``sigma_t**2 = beta_t``."""
    if T < 1:
        raise ValueError("T must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = beta_start + (beta_end - beta_start) * np.arange(T) / (T - 1)
    alpha = np.concatenate([[1.0], 1.0 - betas])
    alpha_bar = np.cumprod(alpha)
    sigma = np.concatenate([[0.0], np.sqrt(betas)])
    return DiffusionSchedule(T, float(beta_start), float(beta_end), alpha, alpha_bar, sigma)


def _check_t(t, sched: DiffusionSchedule) -> None:
    ts = np.asarray(t)
    if np.any(ts < 1) or np.any(ts > sched.T):
        raise ValueError(f"timestep {t} outside 1..{sched.T}")


def forward_noise(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be per-batch-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent {x0.shape}")
    _check_t(t, sched)
    ab = sched.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of the timestep; ``(dim,)`` or ``(batch, dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


@dataclass(frozen=True)
class DenoiserArch:
    frames: int = 4
    height: int = 12
    width: int = 12
    channels: int = 1
    hidden: int = 64
    time_dim: int = 16
    cond_dim: int = 8
    n_classes: int = 4
    n_steps: int = 50

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.height, self.width, self.channels)

    @property
    def latent_size(self) -> int:
        return self.frames * self.height * self.width * self.channels

    def param_shapes(self):
        d_in = self.latent_size + self.time_dim + self.cond_dim
        return [
            ("cond_table", (self.n_classes, self.cond_dim)),
            ("w1", (self.hidden, d_in)),
            ("b1", (self.hidden,)),
            ("w2", (self.hidden, self.hidden)),
            ("b2", (self.hidden,)),
            ("w3", (self.latent_size, self.hidden)),
            ("b3", (self.latent_size,)),
            ("skip", (self.n_steps + 1,)),
        ]


class Denoiser:
    """MLP noise predictor: [flat latent | time emb | class emb] -> 2 hidden SiLU layers -> latent.

    A learned per-timestep gain ``skip[t] * x_t`` is added to the output. The
    hidden width is far below the latent size, so without it the network could
    not carry the high-dimensional noise component of ``x_t`` to its output.
    """

    def __init__(self, arch: DenoiserArch, params: tn.ParamVector):
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: DenoiserArch, rng: SeededRng) -> "Denoiser":
        pv = tn.ParamVector.from_shapes(arch.param_shapes())
        pv.set_block("cond_table", rng.normal((arch.n_classes, arch.cond_dim)))
        for name in ("w1", "w2"):
            shape = pv.layout[name][2]
            pv.set_block(name, rng.normal(shape) / math.sqrt(shape[1]))
        # w3, b3 and skip stay zero: the untrained model predicts zero noise
        return cls(arch, pv)

    @property
    def n_params(self) -> int:
        return len(self.params)

    def copy(self) -> "Denoiser":
        return Denoiser(self.arch, self.params.copy())

    def apply(self, x_t, cls, t, theta=None):
        """Predicted noise, same shape as ``x_t``.

        ``theta`` overrides the stored flat parameters; pass a tape ``Var`` to
        record the evaluation.
        """
        a = self.arch
        theta = self.params.data if theta is None else theta
        layout = self.params.layout
        x_t = np.asarray(x_t, dtype=np.float64)
        batched = x_t.ndim == 5
        if x_t.shape[-4:] != a.latent_shape or x_t.ndim not in (4, 5):
            raise ValueError(f"latent shape {x_t.shape} does not match {a.latent_shape}")
        n = x_t.shape[0] if batched else None
        flat = x_t.reshape((n, -1) if batched else (-1,))
        t_arr = np.asarray(t)
        if batched and t_arr.ndim == 0:
            t_arr = np.full(n, int(t_arr))
        temb = time_embedding(t_arr, a.time_dim)
        cls_arr = np.asarray(cls, dtype=np.int64)
        if batched and cls_arr.ndim == 0:
            cls_arr = np.full(n, int(cls_arr))
        if np.any(cls_arr < 0) or np.any(cls_arr >= a.n_classes):
            raise ValueError(f"prompt class {cls} outside 0..{a.n_classes - 1}")
        table = tn.param_block(theta, layout, "cond_table")
        cemb = tn.getitem(table, cls_arr) if isinstance(table, tn.Var) else table[cls_arr]
        h = tn.concat([flat, temb, cemb], axis=-1)
        h = tn.nonlinearity(tn.affine(h, tn.param_block(theta, layout, "w1"), tn.param_block(theta, layout, "b1")))
        h = tn.nonlinearity(tn.affine(h, tn.param_block(theta, layout, "w2"), tn.param_block(theta, layout, "b2")))
        out = tn.reshape(tn.affine(h, tn.param_block(theta, layout, "w3"), tn.param_block(theta, layout, "b3")), x_t.shape)
        if np.any(t_arr < 0) or np.any(t_arr > a.n_steps):
            raise ValueError(f"timestep {t} outside 0..{a.n_steps}")
        gain = tn.getitem(tn.param_block(theta, layout, "skip"), t_arr.astype(np.int64))
        gain = tn.reshape(gain, np.shape(t_arr) + (1,) * 4)
        return tn.add(out, tn.mul(gain, x_t))

    def predict(self, x_t, cls, t) -> np.ndarray:
        return self.apply(x_t, cls, t)


def base_loss(d: Denoiser, x0, cls: int, rng: SeededRng, sched: DiffusionSchedule, theta=None):
    """``||eps - eps_theta(x_t, c, t)||^2`` with ``t`` and ``eps`` drawn from ``rng``."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = rng.integers(1, sched.T)
    eps = rng.normal(x0.shape)
    x_t = forward_noise(x0, t, eps, sched)
    return tn.sq_norm(tn.sub(eps, d.apply(x_t, cls, t, theta)))


def base_loss_batch(d: Denoiser, x0, cls, rng: SeededRng, sched: DiffusionSchedule, theta=None):
    """Mean of :func:`base_loss` over a batch, one (t, eps) draw per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    t = rng.integers(1, sched.T, size=n)
    eps = rng.normal(x0.shape)
    x_t = forward_noise(x0, t, eps, sched)
    return tn.scale(tn.sq_norm(tn.sub(eps, d.apply(x_t, cls, t, theta))), 1.0 / n)


def ancestral_sample(d, cls, rng: SeededRng, sched: DiffusionSchedule, shape=None) -> np.ndarray:
    """Reverse process from ``x_T ~ N(0, I)``; noise injection is skipped at t = 1."""
    shape = d.arch.latent_shape if shape is None else shape
    x = rng.normal(shape)
    for t in range(sched.T, 0, -1):
        eps = d.predict(x, cls, t)
        a, ab = sched.alpha[t], sched.alpha_bar[t]
        x = (x - (1.0 - a) / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
        if t > 1:
            x = x + sched.sigma[t] * rng.normal(shape)
    return x


def ddim_timesteps(T: int, steps: int) -> list[int]:
    if steps < 1:
        raise ValueError("steps must be positive")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    ts = np.round(np.linspace(1, T, steps)).astype(int)
    return [int(t) for t in ts[::-1]]


def ddim_sample(d, cls, rng: SeededRng, sched: DiffusionSchedule, steps: int, shape=None) -> np.ndarray:
    """Deterministic DDIM (eta = 0) over a uniformly spaced timestep subsequence."""
    ts = ddim_timesteps(sched.T, steps)
    shape = d.arch.latent_shape if shape is None else shape
    x = rng.normal(shape)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        eps = d.predict(x, cls, t)
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        x0_pred = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        x = math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps
    return x


def train_base(
    d: Denoiser,
    data: np.ndarray,
    classes: np.ndarray,
    sched: DiffusionSchedule,
    rng: SeededRng,
    steps: int,
    batch: int = 32,
    lr: float = 1e-3,
) -> tuple[Denoiser, list[float]]:
    """Fit the denoiser to ``data`` with the plain noise-regression loss."""
    model = d.copy()
    opt = tn.Adam(model.n_params, lr=lr)
    pick = rng.derive("batches")
    noise = rng.derive("noise")
    losses = []
    for _ in range(steps):
        idx = pick.integers(0, len(data) - 1, size=batch)
        x0, c = data[idx], classes[idx]
        loss, g = tn.value_and_grad(lambda th: base_loss_batch(model, x0, c, noise, sched, th), model.params.data)
        model.params.data = opt.step(model.params.data, g)
        losses.append(loss)
    return model, losses


def save_checkpoint(path, d: Denoiser, sched: DiffusionSchedule, step: int, extra: dict | None = None) -> None:
    header = {
        "kind": "denoiser",
        "arch": asdict(d.arch),
        "schedule": sched.params(),
        "step": int(step),
        "layout": [[name, list(shape)] for name, (_, _, shape) in d.params.layout.items()],
    }
    if extra:
        header.update(extra)
    blocks = {name: d.params.block(name) for name in d.params.layout}
    save_container(path, header, blocks)


def load_checkpoint(path) -> tuple[Denoiser, DiffusionSchedule, dict]:
    header, blocks = load_container(path)
    if header.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    arch = DenoiserArch(**header["arch"])
    pv = tn.ParamVector.from_shapes(arch.param_shapes())
    for name in pv.layout:
        pv.set_block(name, blocks[name])
    sched = make_schedule(**header["schedule"])
    return Denoiser(arch, pv), sched, header
