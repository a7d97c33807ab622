import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halo import tensor as tn
from halo.diffusion import (
    Denoiser,
    DenoiserArch,
    ancestral_sample,
    base_loss,
    ddim_sample,
    ddim_timesteps,
    forward_noise,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    time_embedding,
    train_base,
)
from halo.rng import SeededRng

from conftest import central_fd, perturbed, rel_err, tiny_arch


def test_single_step_schedule():
    s = make_schedule(1, 0.02, 0.02)
    assert s.alpha_bar[1] == s.alpha[1] == 1 - 0.02


def test_default_schedule_matches_loop_product():
    s = make_schedule()
    prod = 1.0
    for t in range(1, 51):
        prod *= 1.0 - (1e-4 + (0.2 - 1e-4) * (t - 1) / 49)
    assert abs(s.alpha_bar[50] - prod) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
def test_schedule_invariants(T, b0, extra):
    b1 = min(b0 + extra, 0.99)
    s = make_schedule(T, b0, b1)
    a, ab = s.alpha[1:], s.alpha_bar[1:]
    assert np.all((a > 0) & (a < 1))
    assert np.all(np.diff(ab) < 0)
    assert np.allclose(ab, np.cumprod(a), rtol=0, atol=1e-12)
    assert np.allclose(s.sigma[1:] ** 2, 1 - a, rtol=0, atol=1e-15)


def test_forward_noise_limits():
    s = make_schedule(50, 1e-8, 0.2)
    x0 = SeededRng(0).normal((2, 3, 3, 1))
    eps = SeededRng(1).normal(x0.shape)
    assert np.allclose(forward_noise(x0, 1, eps, s), x0, atol=1e-3)
    t = 17
    assert np.array_equal(forward_noise(np.zeros_like(x0), t, eps, s), math.sqrt(1 - s.alpha_bar[t]) * eps)


def test_forward_noise_inversion():
    s = make_schedule()
    rng = SeededRng(2)
    x0, eps = rng.normal((4, 6, 6, 1)), rng.normal((4, 6, 6, 1))
    for t in (1, 10, 50):
        xt = forward_noise(x0, t, eps, s)
        back = (xt - math.sqrt(1 - s.alpha_bar[t]) * eps) / math.sqrt(s.alpha_bar[t])
        assert np.max(np.abs(back - x0)) < 1e-10


def test_forward_noise_per_row_timesteps():
    s = make_schedule()
    rng = SeededRng(3)
    x0, eps = rng.normal((3, 1, 2, 2, 1)), rng.normal((3, 1, 2, 2, 1))
    ts = np.array([1, 20, 50])
    out = forward_noise(x0, ts, eps, s)
    for k, t in enumerate(ts):
        assert np.array_equal(out[k], forward_noise(x0[k], int(t), eps[k], s))
    with pytest.raises(ValueError):
        forward_noise(x0, 0, eps, s)


def test_zero_init_output_is_zero():
    arch = tiny_arch()
    d = Denoiser.init(arch, SeededRng(0))
    x = SeededRng(1).normal(arch.latent_shape)
    assert np.array_equal(d.predict(x, 1, 5), np.zeros(arch.latent_shape))


def test_default_arch_parameter_budget():
    d = Denoiser.init(DenoiserArch(), SeededRng(0))
    assert d.n_params <= 100_000


def test_denoiser_deterministic_and_batched():
    arch = tiny_arch()
    d = perturbed(Denoiser.init(arch, SeededRng(0)), SeededRng(1))
    x = SeededRng(2).normal((3,) + arch.latent_shape)
    one = d.predict(x[1], 0, 4)
    assert np.array_equal(one, d.predict(x[1], 0, 4))
    batch = d.predict(x, np.array([1, 0, 1]), np.array([2, 4, 9]))
    assert np.allclose(batch[1], one, rtol=0, atol=1e-14)
    assert batch.shape == x.shape


def test_denoiser_finite_difference_probe():
    arch = tiny_arch()
    d = perturbed(Denoiser.init(arch, SeededRng(0)), SeededRng(1))
    x = SeededRng(2).normal(arch.latent_shape)
    probe = SeededRng(3).normal(arch.latent_shape)
    k = d.params.layout["w1"][0] + 5
    h = 1e-6

    def f(theta):
        return float(np.sum(probe * d.apply(x, 1, 3, theta)))

    _, g = tn.value_and_grad(lambda th: tn.total(tn.mul(probe, d.apply(x, 1, 3, th))), d.params.data)
    tp, tm = d.params.data.copy(), d.params.data.copy()
    tp[k] += h
    tm[k] -= h
    assert rel_err(g[k], (f(tp) - f(tm)) / (2 * h)) < 1e-6


class _PlantedNoise:
    """Returns the exact noise that maps x0 to the current latent."""

    def __init__(self, x0, sched):
        self.x0 = x0
        self.s = sched

    def predict(self, x, cls, t):
        ab = self.s.alpha_bar[t]
        return (x - math.sqrt(ab) * self.x0) / math.sqrt(1 - ab)


class _Const:
    def __init__(self, out):
        self.out = out

    def predict(self, x, cls, t):
        return self.out


def test_zero_predictor_loss_is_latent_size_on_average():
    s = make_schedule()
    arch = DenoiserArch(frames=2, height=4, width=4, channels=1, hidden=4, time_dim=4, cond_dim=2, n_classes=1, n_steps=50)
    zero = Denoiser.init(arch, SeededRng(1))
    x0 = SeededRng(0).normal(arch.latent_shape)
    vals = [float(base_loss(zero, x0, 0, SeededRng(100 + k), s)) for k in range(4000)]
    assert all(v >= 0 for v in vals)
    # chi-square with 32 degrees of freedom
    assert abs(np.mean(vals) - x0.size) < 4 * math.sqrt(2 * x0.size / 4000)


def test_exact_noise_predictor_has_zero_loss():
    s = make_schedule()
    x0 = SeededRng(0).normal((2, 4, 4, 1))
    rng = SeededRng(5)
    t = rng.integers(1, s.T)
    eps = rng.normal(x0.shape)
    xt = forward_noise(x0, t, eps, s)
    assert np.sum((eps - _PlantedNoise(x0, s).predict(xt, 0, t)) ** 2) < 1e-20


def test_base_loss_gradient_matches_fd():
    s = make_schedule(10, 1e-3, 0.3)
    arch = tiny_arch()
    d = perturbed(Denoiser.init(arch, SeededRng(0)), SeededRng(1))
    x0 = SeededRng(2).normal(arch.latent_shape)
    _, g = tn.value_and_grad(lambda th: base_loss(d, x0, 1, SeededRng(9), s, th), d.params.data)
    num = central_fd(lambda th: float(base_loss(d, x0, 1, SeededRng(9), s, th)), d.params.data)
    assert np.max(rel_err(g, num)) < 1e-4


def test_ancestral_single_step_formula():
    s = make_schedule(1, 0.05, 0.05)
    out = np.full((1, 2, 2, 1), 0.3)
    got = ancestral_sample(_Const(out), 0, SeededRng(4), s, shape=(1, 2, 2, 1))
    x1 = SeededRng(4).normal((1, 2, 2, 1))
    expect = (x1 - (1 - s.alpha[1]) / math.sqrt(1 - s.alpha_bar[1]) * out) / math.sqrt(s.alpha[1])
    assert np.array_equal(got, expect)


def test_samplers_deterministic():
    arch = tiny_arch()
    d = perturbed(Denoiser.init(arch, SeededRng(0)), SeededRng(1))
    s = make_schedule(10, 1e-3, 0.3)
    assert ancestral_sample(d, 1, SeededRng(3), s).tobytes() == ancestral_sample(d, 1, SeededRng(3), s).tobytes()
    assert ddim_sample(d, 1, SeededRng(3), s, 4).tobytes() == ddim_sample(d, 1, SeededRng(3), s, 4).tobytes()


def test_plant_and_recover():
    x0 = SeededRng(6).normal((2, 3, 3, 1))
    s5 = make_schedule(5, 1e-3, 0.3)
    got = ancestral_sample(_PlantedNoise(x0, s5), 0, SeededRng(7), s5, shape=x0.shape)
    assert np.max(np.abs(got - x0)) < 1e-6
    s50 = make_schedule()
    got = ddim_sample(_PlantedNoise(x0, s50), 0, SeededRng(7), s50, 8, shape=x0.shape)
    assert np.max(np.abs(got - x0)) < 1e-4
    got = ancestral_sample(_PlantedNoise(x0, s50), 0, SeededRng(7), s50, shape=x0.shape)
    assert np.max(np.abs(got - x0)) < 1e-4


def test_ddim_timesteps_cover():
    assert ddim_timesteps(50, 50) == list(range(50, 0, -1))
    ts = ddim_timesteps(50, 8)
    assert ts[0] == 50 and ts[-1] == 1 and len(set(ts)) == 8
    with pytest.raises(ValueError):
        ddim_timesteps(5, 6)


def test_time_embedding_shapes():
    assert time_embedding(3, 16).shape == (16,)
    assert time_embedding(np.array([1, 2]), 5).shape == (2, 5)
    assert np.array_equal(time_embedding(7, 8), time_embedding(7, 8))


def test_checkpoint_round_trip(tmp_path):
    arch = tiny_arch()
    d = perturbed(Denoiser.init(arch, SeededRng(0)), SeededRng(1))
    s = make_schedule(10, 1e-3, 0.3)
    save_checkpoint(tmp_path / "m.ckpt", d, s, 12, {"note": "x"})
    back, s2, header = load_checkpoint(tmp_path / "m.ckpt")
    assert back.params.data.tobytes() == d.params.data.tobytes()
    assert back.arch == arch and header["step"] == 12 and header["note"] == "x"
    assert np.array_equal(s2.alpha_bar, s.alpha_bar)
    save_checkpoint(tmp_path / "n.ckpt", back, s2, 12, {"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_train_base_reduces_loss():
    arch = tiny_arch()
    s = make_schedule(10, 1e-3, 0.3)
    rng = SeededRng(0)
    data = np.stack([np.full(arch.latent_shape, 0.8), np.full(arch.latent_shape, -0.8)])[np.arange(64) % 2]
    cls = np.arange(64) % 2
    d = Denoiser.init(arch, rng.derive("init"))
    _, losses = train_base(d, data, cls, s, rng.derive("fit"), 400, batch=16, lr=1e-2)
    assert np.mean(losses[-50:]) < 0.7 * np.mean(losses[:50])
