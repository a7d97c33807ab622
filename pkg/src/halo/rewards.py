"""Five-dimension rewards on [1, 4], a synthetic oracle teacher, and a distilled patch regressor.

A video reward is a ``(5,)`` array and a patch reward grid a ``(h_n, w_n, 5)``
array, dimensions ordered as :data:`DIMENSIONS`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import tensor as tn
from .io import load_container, read_jsonl, save_container, write_jsonl
from .patches import GridSpec, slice_like
from .rng import SeededRng

DIMENSIONS = (
    "visual_quality",
    "temporal_consistency",
    "dynamic_degree",
    "t2v_alignment",
    "factual_consistency",
)
N_DIMS = len(DIMENSIONS)
SCORE_MIN, SCORE_MAX = 1.0, 4.0

# per-dimension scale on the oracle's distance constant; keeps the five
# teacher scores distinct while each stays monotone in the same distance
ORACLE_DIM_SCALES = np.array([1.0, 0.9, 1.1, 0.95, 1.05])


def check_scores(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != N_DIMS:
        raise ValueError(f"expected {N_DIMS} dimensions, got shape {r.shape}")
    if np.any(r < SCORE_MIN) or np.any(r > SCORE_MAX) or not np.all(np.isfinite(r)):
        raise ValueError("reward scores must lie in [1, 4]")
    return r


def scalarize(r) -> float | np.ndarray:
    """Plain mean over the five dimensions (works on a vector or a grid)."""
    r = check_scores(r)
    out = r.sum(axis=-1) / N_DIMS
    return float(out) if out.ndim == 0 else out


def normalize_label(s: float) -> float:
    """Map a 0-10 teacher score onto the 1-4 reward scale."""
    if not (0.0 <= s <= 10.0):
        raise ValueError(f"label {s} outside [0, 10]")
    return 1.0 + 3.0 * s / 10.0


def regression_loss(pred, labels):
    """Mean squared error over every (row, col, dimension) entry."""
    lab = np.asarray(labels, dtype=np.float64)
    pshape = pred.shape
    if tuple(pshape) != lab.shape:
        raise ValueError(f"prediction grid {pshape} does not match labels {lab.shape}")
    return tn.scale(tn.sq_norm(tn.sub(pred, lab)), 1.0 / lab.size)


class RewardModel(Protocol):
    def score_video(self, prompt_class: int, video: np.ndarray) -> np.ndarray: ...

    def score_patches(self, prompt_class: int, video: np.ndarray, grid: GridSpec) -> np.ndarray: ...


@dataclass
class OracleReward:
    """Teacher that scores closeness to a per-class target latent.

    Each dimension is ``1 + 3 exp(-d / (lam * scale_d))`` with ``d`` the mean
    squared distance to the target, over the whole video or one patch. At
    ``d >= 40 lam`` the exponential underflows below the double-precision
    resolution of 1 and every score is exactly 1.
    """

    targets: np.ndarray
    lam: float = 0.25

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        self.targets = np.asarray(self.targets, dtype=np.float64)

    @property
    def saturation_distance(self) -> float:
        return 40.0 * self.lam * ORACLE_DIM_SCALES.max()

    def _target(self, prompt_class: int) -> np.ndarray:
        if not 0 <= prompt_class < len(self.targets):
            raise KeyError(f"unknown prompt class {prompt_class}")
        return self.targets[prompt_class]

    def _map(self, d: float) -> np.ndarray:
        return 1.0 + 3.0 * np.exp(-d / (self.lam * ORACLE_DIM_SCALES))

    def score_video(self, prompt_class: int, video) -> np.ndarray:
        target = self._target(prompt_class)
        video = np.asarray(video, dtype=np.float64)
        if video.shape != target.shape:
            raise ValueError(f"video shape {video.shape} does not match target {target.shape}")
        return self._map(float(np.mean((video - target) ** 2)))

    def score_patch(self, prompt_class: int, video, idx, grid: GridSpec) -> np.ndarray:
        target = self._target(prompt_class)
        diff = slice_like(np.asarray(video, dtype=np.float64) - target, idx, grid)
        return self._map(float(np.mean(diff**2)))

    def score_patches(self, prompt_class: int, video, grid: GridSpec) -> np.ndarray:
        out = np.empty((grid.h_n, grid.w_n, N_DIMS))
        for i, j in grid.indices():
            out[i, j] = self.score_patch(prompt_class, video, (i, j), grid)
        return out


def oracle_score(oracle: OracleReward, prompt_class: int, video, grid: GridSpec | None = None, idx=None):
    """Oracle rewards for a whole video, or for patch ``idx`` when given."""
    if idx is None:
        return oracle.score_video(prompt_class, video)
    return oracle.score_patch(prompt_class, video, idx, grid)


@dataclass(frozen=True)
class RegressorArch:
    patch_size: int
    n_patches: int
    n_classes: int
    channels: int
    hidden: int = 64

    @property
    def n_features(self) -> int:
        return self.patch_size + self.n_patches + self.n_classes + self.n_patches * self.channels

    def param_shapes(self):
        return [
            ("w1", (self.hidden, self.n_features)),
            ("b1", (self.hidden,)),
            ("w2", (self.hidden, self.hidden)),
            ("b2", (self.hidden,)),
            ("w3", (N_DIMS, self.hidden)),
            ("b3", (N_DIMS,)),
        ]


def patch_features(video, prompt_class: int, grid: GridSpec, arch: RegressorArch) -> np.ndarray:
    """One feature row per patch, row-major.

    Row layout: the zero-padded flattened patch, a one-hot patch index, a
    one-hot prompt class, and the per-patch means of the whole video (the
    context summary).
    """
    video = np.asarray(video, dtype=np.float64)
    pooled = np.concatenate([slice_like(video, ij, grid).mean(axis=(0, 1, 2)) for ij in grid.indices()])
    rows = []
    for k, ij in enumerate(grid.indices()):
        flat = slice_like(video, ij, grid).reshape(-1)
        padded = np.zeros(arch.patch_size)
        padded[: flat.size] = flat
        onehot_idx = np.zeros(arch.n_patches)
        onehot_idx[k] = 1.0
        onehot_cls = np.zeros(arch.n_classes)
        onehot_cls[prompt_class] = 1.0
        rows.append(np.concatenate([padded, onehot_idx, onehot_cls, pooled]))
    return np.stack(rows)


class PatchRegressor:
    """Small MLP from patch features to five scores squashed into [1, 4]."""

    def __init__(self, arch: RegressorArch, grid: GridSpec, params: tn.ParamVector):
        self.arch = arch
        self.grid = grid
        self.params = params

    @classmethod
    def init(cls, grid: GridSpec, frames: int, channels: int, n_classes: int, rng: SeededRng, hidden: int = 64):
        patch_size = frames * max(grid.row_sizes) * max(grid.col_sizes) * channels
        arch = RegressorArch(patch_size, grid.n_patches, n_classes, channels, hidden)
        pv = tn.ParamVector.from_shapes(arch.param_shapes())
        for name in ("w1", "w2", "w3"):
            shape = pv.layout[name][2]
            pv.set_block(name, rng.normal(shape) / math.sqrt(shape[1]))
        return cls(arch, grid, pv)

    def forward(self, features, theta=None):
        theta = self.params.data if theta is None else theta
        lay = self.params.layout
        h = tn.nonlinearity(tn.affine(features, tn.param_block(theta, lay, "w1"), tn.param_block(theta, lay, "b1")))
        h = tn.nonlinearity(tn.affine(h, tn.param_block(theta, lay, "w2"), tn.param_block(theta, lay, "b2")))
        z = tn.affine(h, tn.param_block(theta, lay, "w3"), tn.param_block(theta, lay, "b3"))
        return tn.add(tn.scale(tn.sigmoid(z), SCORE_MAX - SCORE_MIN), SCORE_MIN)

    def score_patches(self, prompt_class: int, video, grid: GridSpec | None = None) -> np.ndarray:
        grid = self.grid if grid is None else grid
        if grid != self.grid:
            raise ValueError("regressor was trained for a different grid")
        feats = patch_features(video, prompt_class, grid, self.arch)
        out = np.clip(self.forward(feats), SCORE_MIN, SCORE_MAX)
        return out.reshape(grid.h_n, grid.w_n, N_DIMS)

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "patch_regressor", "arch": asdict(self.arch), "grid": [self.grid.h, self.grid.w, self.grid.h_n, self.grid.w_n]}
        header.update(extra or {})
        save_container(path, header, {n: self.params.block(n) for n in self.params.layout})

    @classmethod
    def load(cls, path) -> "PatchRegressor":
        from .patches import make_grid

        header, blocks = load_container(path)
        if header.get("kind") != "patch_regressor":
            raise ValueError(f"{path} is not a patch regressor checkpoint")
        arch = RegressorArch(**header["arch"])
        pv = tn.ParamVector.from_shapes(arch.param_shapes())
        for name in pv.layout:
            pv.set_block(name, blocks[name])
        return cls(arch, make_grid(*header["grid"]), pv)


@dataclass
class DistillConfig:
    hidden: int = 64
    epochs: int = 60
    batch: int = 64
    lr: float = 3e-3
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)


@dataclass
class DistillResult:
    model: PatchRegressor
    train_loss: list[float] = field(default_factory=list)
    valid_loss: float = float("nan")
    test_loss: float = float("nan")
    test_spearman: float = float("nan")
    split_sizes: tuple[int, int, int] = (0, 0, 0)


def _split_counts(n: int, split) -> tuple[int, int, int]:
    n_train = max(1, int(round(n * split[0])))
    n_valid = min(n - n_train, int(round(n * split[1])))
    return n_train, n_valid, n - n_train - n_valid


def distill_patch_rm(dataset: Sequence[tuple[int, np.ndarray, np.ndarray]], grid: GridSpec, cfg: DistillConfig | None = None) -> DistillResult:
    """Fit a :class:`PatchRegressor` to teacher patch labels.

    ``dataset`` holds ``(prompt_class, video, label_grid)`` triples. Videos are
    split train/valid/test by ``cfg.split``; held-out metrics are reported on
    the test part (on the train part when the dataset is too small to hold
    anything out).
    """
    from .analysis import spearman

    cfg = cfg or DistillConfig()
    if not dataset:
        raise ValueError("distillation dataset is empty")
    rng = SeededRng(cfg.seed, "distill")
    frames, channels = dataset[0][1].shape[0], dataset[0][1].shape[-1]
    n_classes = max(int(c) for c, _, _ in dataset) + 1
    model = PatchRegressor.init(grid, frames, channels, n_classes, rng.derive("init"), cfg.hidden)
    order = rng.derive("split").permutation(len(dataset))
    n_train, n_valid, n_test = _split_counts(len(dataset), cfg.split)

    def stack(ids):
        if len(ids) == 0:
            return np.zeros((0, model.arch.n_features)), np.zeros((0, N_DIMS))
        feats = [patch_features(dataset[k][1], int(dataset[k][0]), grid, model.arch) for k in ids]
        labels = [check_scores(dataset[k][2]).reshape(-1, N_DIMS) for k in ids]
        return np.concatenate(feats), np.concatenate(labels)

    x_tr, y_tr = stack(order[:n_train])
    x_va, y_va = stack(order[n_train : n_train + n_valid])
    x_te, y_te = stack(order[n_train + n_valid :])
    if len(x_te) == 0:
        x_te, y_te = x_tr, y_tr

    opt = tn.Adam(len(model.params), lr=cfg.lr)
    shuffle = rng.derive("shuffle")
    history = []
    for _ in range(cfg.epochs):
        perm = shuffle.permutation(len(x_tr))
        for start in range(0, len(perm), cfg.batch):
            ids = perm[start : start + cfg.batch]
            xb, yb = x_tr[ids], y_tr[ids]
            _, g = tn.value_and_grad(lambda th: regression_loss(model.forward(xb, th), yb), model.params.data)
            model.params.data = opt.step(model.params.data, g)
        history.append(float(regression_loss(model.forward(x_tr), y_tr)))

    result = DistillResult(model=model, train_loss=history, split_sizes=(n_train, n_valid, n_test))
    if len(x_va):
        result.valid_loss = float(regression_loss(model.forward(x_va), y_va))
    pred_te = model.forward(x_te)
    result.test_loss = float(regression_loss(pred_te, y_te))
    try:
        result.test_spearman = spearman(pred_te.mean(axis=1), y_te.mean(axis=1))
    except ValueError:
        pass  # constant teacher labels: rank correlation is undefined, stays NaN
    return result


def write_reward_records(path, records: Sequence[dict]) -> None:
    """JSON lines; each record carries ``prompt_id``, ``video_id``, ``video`` and row-major ``patches``."""
    out = []
    for r in records:
        video = check_scores(r["video"])
        patches = check_scores(r["patches"]).reshape(-1, N_DIMS)
        out.append(
            {
                "prompt_id": r["prompt_id"],
                "video_id": int(r["video_id"]),
                "video": dict(zip(DIMENSIONS, map(float, video))),
                "patches": [dict(zip(DIMENSIONS, map(float, p))) for p in patches],
            }
        )
    write_jsonl(path, out)


def read_reward_records(path, grid: GridSpec) -> list[dict]:
    out = []
    for r in read_jsonl(path):
        video = np.array([r["video"][d] for d in DIMENSIONS])
        patches = np.array([[p[d] for d in DIMENSIONS] for p in r["patches"]])
        if len(patches) != grid.n_patches:
            raise ValueError(f"record has {len(patches)} patches, grid expects {grid.n_patches}")
        out.append(
            {
                "prompt_id": r["prompt_id"],
                "video_id": int(r["video_id"]),
                "video": check_scores(video),
                "patches": check_scores(patches).reshape(grid.h_n, grid.w_n, N_DIMS),
            }
        )
    return out
