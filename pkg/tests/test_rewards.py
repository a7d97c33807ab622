import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halo.patches import make_grid
from halo.rewards import (
    DIMENSIONS,
    DistillConfig,
    OracleReward,
    PatchRegressor,
    distill_patch_rm,
    normalize_label,
    oracle_score,
    read_reward_records,
    regression_loss,
    scalarize,
    write_reward_records,
)
from halo.rng import SeededRng
from halo.synthetic import make_targets

scores = arrays(np.float64, 5, elements=st.floats(1, 4, allow_nan=False))


def test_scalarize_examples():
    assert scalarize(np.full(5, 4.0)) == 4.0
    assert abs(scalarize([2, 3, 2, 3, 2]) - 2.4) < 1e-15
    r = SeededRng(0).uniform(5) * 3 + 1
    acc = 0.0
    for v in r:
        acc += v
    assert abs(scalarize(r) - acc / 5) < 1e-15


@given(scores, st.permutations(range(5)))
def test_scalarize_permutation_invariant(r, perm):
    assert abs(scalarize(r) - scalarize(r[list(perm)])) < 1e-14


def test_scalarize_rejects_out_of_range():
    with pytest.raises(ValueError):
        scalarize([0.5, 2, 2, 2, 2])
    with pytest.raises(ValueError):
        scalarize([2, 2, 2])


def test_normalize_label():
    assert normalize_label(0) == 1.0
    assert normalize_label(10) == 4.0
    assert normalize_label(5) == 2.5
    xs = np.linspace(0, 10, 101)
    assert np.all(np.diff([normalize_label(x) for x in xs]) > 0)
    with pytest.raises(ValueError):
        normalize_label(10.5)


def test_regression_loss_examples():
    rng = SeededRng(1)
    labels = 1 + 2 * rng.uniform((3, 3, 5))
    assert regression_loss(labels, labels) == 0.0
    assert abs(regression_loss(labels + 1, labels) - 1.0) < 1e-15
    pred = 1 + 3 * rng.uniform((3, 3, 5))
    acc = 0.0
    for i in range(3):
        for j in range(3):
            for d in range(5):
                acc += (pred[i, j, d] - labels[i, j, d]) ** 2
    assert abs(regression_loss(pred, labels) - acc / 45) < 1e-12


@settings(max_examples=30)
@given(arrays(np.float64, (2, 5), elements=st.floats(1, 4)), arrays(np.float64, (2, 5), elements=st.floats(1, 4)))
def test_regression_loss_nonnegative(a, b):
    v = regression_loss(a, b)
    assert v >= 0 and (v == 0) == np.array_equal(a, b)


def _oracle(lam=0.5):
    targets = make_targets(SeededRng(0), 3, (2, 6, 6, 1))
    return OracleReward(targets, lam=lam), targets


def test_oracle_extremes():
    oracle, targets = _oracle()
    g = make_grid(6, 6)
    assert np.all(oracle.score_video(1, targets[1]) == 4.0)
    assert np.all(oracle_score(oracle, 1, targets[1], g, (0, 2)) == 4.0)
    far = targets[1] + np.sqrt(oracle.saturation_distance) + 1e-9
    assert np.all(oracle.score_video(1, far) == 1.0)
    assert np.all(oracle.score_patches(1, far, g) == 1.0)


def test_oracle_monotone_per_patch():
    oracle, targets = _oracle()
    g = make_grid(6, 6)
    rng = SeededRng(3)
    for _ in range(50):
        noise = rng.normal(targets[0].shape)
        near = targets[0] + 0.3 * noise
        far = targets[0] + 0.6 * noise
        a, b = oracle.score_patches(0, near, g), oracle.score_patches(0, far, g)
        assert np.all(a > b)
        assert np.all(oracle.score_video(0, near) > oracle.score_video(0, far))


def test_oracle_scores_in_range_and_dimension_order():
    oracle, targets = _oracle()
    r = oracle.score_video(2, targets[2] + 0.4)
    assert r.shape == (len(DIMENSIONS),) and np.all((r >= 1) & (r <= 4))
    assert len(set(r.tolist())) == 5


def _dataset(oracle, targets, g, n, seed, noise_scale=0.6):
    rng = SeededRng(seed)
    out = []
    for k in range(n):
        c = k % len(targets)
        x = targets[c] + noise_scale * rng.uniform() * rng.normal(targets[c].shape)
        for i, j in g.indices():
            rows, cols = g.bounds(i, j)
            x[:, rows, cols, :] += (rng.uniform() - 0.5) * 2.0 * (rng.uniform() < 0.3)
        out.append((c, x, oracle.score_patches(c, x, g)))
    return out


def test_distill_constant_labels():
    _, targets = _oracle()
    g = make_grid(6, 6)
    rng = SeededRng(1)
    data = [(k % 3, targets[k % 3] + rng.normal(targets[0].shape), np.full((3, 3, 5), 2.5)) for k in range(40)]
    res = distill_patch_rm(data, g, DistillConfig(hidden=16, epochs=40, batch=32, lr=1e-2))
    pred = np.stack([res.model.score_patches(c, x) for c, x, _ in data])
    assert np.max(np.abs(pred - 2.5)) < 0.05


def test_distill_tracks_oracle():
    oracle, targets = _oracle()
    g = make_grid(6, 6)
    data = _dataset(oracle, targets, g, 300, 2)
    res = distill_patch_rm(data, g, DistillConfig(hidden=32, epochs=40, batch=64, lr=3e-3))
    assert res.test_spearman > 0.8
    assert sum(res.split_sizes) == 300


def test_distill_training_curve_non_increasing():
    oracle, targets = _oracle()
    g = make_grid(6, 6)
    data = _dataset(oracle, targets, g, 300, 2)
    res = distill_patch_rm(data, g, DistillConfig(hidden=32, epochs=40, batch=64, lr=1e-3))
    assert np.all(np.diff(res.train_loss) <= 1e-3)
    assert res.train_loss[-1] < 0.5 * res.train_loss[0]


def test_regressor_outputs_clamped_and_round_trip(tmp_path):
    _, targets = _oracle()
    g = make_grid(6, 6)
    m = PatchRegressor.init(g, 2, 1, 3, SeededRng(0), hidden=8)
    out = m.score_patches(0, 50 * targets[0])
    assert out.shape == (3, 3, 5) and np.all((out >= 1) & (out <= 4))
    m.save(tmp_path / "rm.ckpt")
    back = PatchRegressor.load(tmp_path / "rm.ckpt")
    assert np.array_equal(back.params.data, m.params.data)
    assert np.array_equal(back.score_patches(1, targets[1]), m.score_patches(1, targets[1]))


def test_regressor_uses_whole_video_context():
    _, targets = _oracle()
    g = make_grid(6, 6)
    m = PatchRegressor.init(g, 2, 1, 3, SeededRng(0), hidden=8)
    x = targets[0].copy()
    y = x.copy()
    y[:, 4:6, 4:6, :] += 1.0  # only patch (2, 2) changes
    assert not np.array_equal(m.score_patches(0, x)[0, 0], m.score_patches(0, y)[0, 0])


def test_reward_records_round_trip(tmp_path):
    oracle, targets = _oracle()
    g = make_grid(6, 6)
    recs = [{"prompt_id": "a", "video_id": 3, "video": oracle.score_video(0, targets[0] + 0.2), "patches": oracle.score_patches(0, targets[0] + 0.2, g)}]
    write_reward_records(tmp_path / "r.jsonl", recs)
    back = read_reward_records(tmp_path / "r.jsonl", g)
    assert np.array_equal(back[0]["video"], recs[0]["video"])
    assert np.array_equal(back[0]["patches"], recs[0]["patches"])
    with pytest.raises(ValueError):
        read_reward_records(tmp_path / "r.jsonl", make_grid(6, 6, 2, 2))
