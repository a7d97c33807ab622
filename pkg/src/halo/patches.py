"""Spatial h_n x w_n patch grid over (frames, height, width, channels) latents.

The first ``h_n - 1`` rows are ``h // h_n`` tall and the last row takes the
remainder; columns likewise. Frames are never split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Var, getitem


@dataclass(frozen=True)
class GridSpec:
    h: int
    w: int
    h_n: int
    w_n: int
    row_offsets: tuple[int, ...]
    row_sizes: tuple[int, ...]
    col_offsets: tuple[int, ...]
    col_sizes: tuple[int, ...]

    @property
    def n_patches(self) -> int:
        return self.h_n * self.w_n

    def indices(self):
        """Patch indices in row-major order, (0, 0) at the upper left."""
        return [(i, j) for i in range(self.h_n) for j in range(self.w_n)]

    def bounds(self, i: int, j: int) -> tuple[slice, slice]:
        if not (0 <= i < self.h_n and 0 <= j < self.w_n):
            raise IndexError(f"patch index ({i}, {j}) outside {self.h_n}x{self.w_n} grid")
        r0, c0 = self.row_offsets[i], self.col_offsets[j]
        return slice(r0, r0 + self.row_sizes[i]), slice(c0, c0 + self.col_sizes[j])

    def locate(self, row: int, col: int) -> tuple[int, int]:
        """Patch index containing latent position (row, col)."""
        i = min(row // self.row_sizes[0], self.h_n - 1)
        j = min(col // self.col_sizes[0], self.w_n - 1)
        return i, j


def _sizes(extent: int, n: int) -> tuple[list[int], list[int]]:
    base = extent // n
    sizes = [base] * (n - 1) + [extent - (n - 1) * base]
    offsets = [k * base for k in range(n)]
    return offsets, sizes


def make_grid(h: int, w: int, h_n: int = 3, w_n: int = 3) -> GridSpec:
    if h_n < 1 or w_n < 1:
        raise ValueError("grid counts must be positive")
    if h < h_n or w < w_n:
        raise ValueError(f"latent {h}x{w} too small for a {h_n}x{w_n} grid")
    ro, rs = _sizes(h, h_n)
    co, cs = _sizes(w, w_n)
    return GridSpec(h, w, h_n, w_n, tuple(ro), tuple(rs), tuple(co), tuple(cs))


def _check_extent(x, g: GridSpec) -> None:
    shape = x.shape
    if len(shape) < 3 or shape[-3] != g.h or shape[-2] != g.w:
        raise ValueError(f"latent shape {shape} does not match grid extents {g.h}x{g.w}")


def slice_like(x, idx: tuple[int, int], g: GridSpec):
    """Patch ``idx`` of ``x``; leading (batch, frame) axes are kept whole.

    Tape variables are sliced on the tape, arrays are copied.
    """
    _check_extent(x, g)
    rows, cols = g.bounds(*idx)
    index = (Ellipsis, rows, cols, slice(None))
    if isinstance(x, Var):
        return getitem(x, index)
    return np.array(x[index], copy=True)


def split(x: np.ndarray, g: GridSpec) -> list[list[np.ndarray]]:
    _check_extent(x, g)
    return [[slice_like(x, (i, j), g) for j in range(g.w_n)] for i in range(g.h_n)]


def reassemble(patches: list[list[np.ndarray]], g: GridSpec) -> np.ndarray:
    if len(patches) != g.h_n or any(len(row) != g.w_n for row in patches):
        raise ValueError("patch grid does not match GridSpec")
    first = patches[0][0]
    lead, channels = first.shape[:-3], first.shape[-1]
    out = np.empty(lead + (g.h, g.w, channels), dtype=np.float64)
    for i in range(g.h_n):
        for j in range(g.w_n):
            p = patches[i][j]
            expected = lead + (g.row_sizes[i], g.col_sizes[j], channels)
            if p.shape != expected:
                raise ValueError(f"patch ({i}, {j}) has shape {p.shape}, expected {expected}")
            rows, cols = g.bounds(i, j)
            out[..., rows, cols, :] = p
    return out
