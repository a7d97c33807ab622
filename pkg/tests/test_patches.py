import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halo import tensor as tn
from halo.patches import make_grid, reassemble, slice_like, split
from halo.rng import SeededRng


def test_divisible_grid_sizes():
    g = make_grid(12, 12, 3, 3)
    assert g.row_sizes == (4, 4, 4) and g.col_sizes == (4, 4, 4)
    assert g.row_offsets == (0, 4, 8)


def test_last_row_takes_remainder():
    assert make_grid(13, 12, 3, 3).row_sizes == (4, 4, 5)
    g = make_grid(13, 14, 3, 3)
    assert g.col_sizes == (4, 4, 6)


def test_degenerate_minimum():
    assert make_grid(3, 3, 3, 3).row_sizes == (1, 1, 1)
    with pytest.raises(ValueError):
        make_grid(2, 3, 3, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6), st.integers(1, 6))
def test_size_formula_property(h, w, h_n, w_n):
    if h < h_n or w < w_n:
        return
    g = make_grid(h, w, h_n, w_n)
    assert sum(g.row_sizes) == h and sum(g.col_sizes) == w
    assert g.row_sizes[:-1] == (h // h_n,) * (h_n - 1)
    assert g.row_sizes[-1] == h - (h_n - 1) * (h // h_n)
    assert g.col_sizes[-1] == w - (w_n - 1) * (w // w_n)
    assert min(g.row_sizes + g.col_sizes) >= 1


def test_constant_tensor_patches_constant():
    g = make_grid(12, 12)
    x = np.full((2, 12, 12, 1), 3.25)
    for row in split(x, g):
        for p in row:
            assert np.all(p == 3.25)


def test_identity_grid():
    x = SeededRng(0).normal((2, 5, 7, 3))
    g = make_grid(5, 7, 1, 1)
    assert np.array_equal(split(x, g)[0][0], x)
    assert np.array_equal(reassemble(split(x, g), g), x)


@pytest.mark.parametrize("h,w", [(12, 12), (13, 14)])
def test_indicator_partition_every_position(h, w):
    g = make_grid(h, w, 3, 3)
    for r in range(h):
        for c in range(w):
            x = np.zeros((2, h, w, 1))
            x[:, r, c, :] = 1.0
            hits = [(i, j) for i, j in g.indices() if slice_like(x, (i, j), g).sum() > 0]
            i = next(k for k in range(3) if g.row_offsets[k] <= r < g.row_offsets[k] + g.row_sizes[k])
            j = next(k for k in range(3) if g.col_offsets[k] <= c < g.col_offsets[k] + g.col_sizes[k])
            assert hits == [(i, j)]
            assert g.locate(r, c) == (i, j)
            assert slice_like(x, (i, j), g)[0, r - g.row_offsets[i], c - g.col_offsets[j], 0] == 1.0


@pytest.mark.parametrize("h,w", [(12, 12), (13, 14)])
def test_round_trip_bit_identical(h, w):
    x = SeededRng(h * w).normal((4, h, w, 2))
    g = make_grid(h, w, 3, 3)
    assert reassemble(split(x, g), g).tobytes() == x.tobytes()


def test_patches_are_copies_and_frames_untouched():
    g = make_grid(12, 12)
    x = np.zeros((4, 12, 12, 1))
    p = slice_like(x, (1, 2), g)
    p[:] = 9.0
    assert np.all(x == 0)
    assert p.shape == (4, 4, 4, 1)


def test_slice_like_on_tape():
    g = make_grid(6, 6, 3, 3)
    tape = tn.Tape()
    v = tape.variable(np.arange(36.0).reshape(1, 6, 6, 1))
    s = tn.sq_norm(slice_like(v, (2, 0), g))
    grad = tape.backward(s)[v.idx]
    expect = np.zeros((1, 6, 6, 1))
    expect[:, 4:6, 0:2, :] = 2 * v.value[:, 4:6, 0:2, :]
    assert np.array_equal(grad, expect)


def test_bad_index_and_extent():
    g = make_grid(12, 12)
    with pytest.raises(IndexError):
        slice_like(np.zeros((1, 12, 12, 1)), (3, 0), g)
    with pytest.raises(ValueError):
        split(np.zeros((1, 11, 12, 1)), g)
