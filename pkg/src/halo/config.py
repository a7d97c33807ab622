"""Run configuration: one flat dataclass, TOML file plus command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .io import canonical_json, digest_obj

# execution-only settings; they never change results and stay out of the digest
EXECUTION_FIELDS = ("out_dir", "threads")


@dataclass
class RunConfig:
    seed: int = 0
    # latent and model
    frames: int = 4
    height: int = 12
    width: int = 12
    channels: int = 1
    n_classes: int = 4
    hidden: int = 64
    time_dim: int = 16
    cond_dim: int = 8
    # schedule
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    # patch grid
    grid_rows: int = 3
    grid_cols: int = 3
    # synthetic corpus
    n_prompts: int = 878
    n_valid: int = 50
    n_eval_prompts: int = 64
    prompts_file: str = ""
    base_videos: int = 4096
    defect_prob: float = 0.3
    flawed_fraction: float = 0.5
    defect_scale: float = 1.0
    data_noise: float = 0.1
    # base model training
    base_steps: int = 1500
    base_batch: int = 32
    base_lr: float = 3e-3
    # sampling
    samples_per_prompt: int = 5
    sampler: str = "ancestral"
    sample_steps: int = 8
    # rewards
    oracle_lambda: float = 0.5
    labels_file: str = ""
    patch_reward_source: str = "distilled"
    distill_hidden: int = 64
    distill_epochs: int = 60
    distill_batch: int = 64
    distill_lr: float = 3e-3
    # pair building and prompt filtering
    median_scope: str = "global"
    strict: bool = True
    tau: float = 0.85
    # Gran-DPO
    dpo_beta: float = 0.1
    dpo_lr: float = 1e-5
    dpo_steps: int = 2000
    dpo_batch: int = 8
    video_denominator: str = "m_V"
    use_video_loss: bool = True
    use_patch_loss: bool = True
    use_pair_weights: bool = True
    trend_every: int = 50
    eval_pairs: int = 32
    eval_draws: int = 1
    # analysis
    analysis_videos: int = 50
    # execution
    out_dir: str = "runs/default"
    threads: int = 1

    def __post_init__(self):
        choices = {
            "sampler": ("ancestral", "ddim"),
            "patch_reward_source": ("distilled", "oracle"),
            "median_scope": ("global", "per_prompt"),
            "video_denominator": ("m_V", "m_P"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.n_valid >= self.n_prompts:
            raise ValueError("n_valid must leave at least one training prompt")
        if self.samples_per_prompt < 2:
            raise ValueError("need at least two samples per prompt to form pairs")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.flawed_fraction <= 1 or not 0 <= self.defect_prob <= 1:
            raise ValueError("flawed_fraction and defect_prob must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be positive")

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        for name in EXECUTION_FIELDS:
            d.pop(name)
        return d

    def digest(self) -> str:
        return digest_obj(self.canonical())

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                lines.append(f"{f.name} = {'true' if v else 'false'}")
            elif isinstance(v, str):
                lines.append(f"{f.name} = {canonical_json(v)}")
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, kind, value):
    if kind is bool or kind == "bool":
        if not isinstance(value, bool):
            raise TypeError(f"{name} must be a boolean")
        return value
    if kind is int or kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name} must be an integer")
        return value
    if kind is float or kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise TypeError(f"{name} must be a string")
    return value


def field_types() -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(RunConfig)}


def from_mapping(values: dict) -> RunConfig:
    types = field_types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, types[k], v) for k, v in values.items()})


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """File values, then explicit overrides, then ``HALO_SEED`` from the environment."""
    env = os.environ if env is None else env
    values: dict = {}
    if path:
        with open(path, "rb") as fh:
            values.update(tomllib.load(fh))
    values.update(overrides or {})
    if env.get("HALO_SEED"):
        values["seed"] = int(env["HALO_SEED"])
    return from_mapping(values)


def demo_config_path() -> Path:
    return Path(__file__).parent / "configs" / "demo.toml"
