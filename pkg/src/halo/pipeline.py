"""Pipeline stages. Each stage reads files from the run directory, writes its
outputs there and records a provenance file next to them."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as an
from . import grandpo as gd
from .config import RunConfig
from .data import (
    Candidate,
    CandidateSet,
    EmptyDatasetError,
    build_pairs,
    check_unique,
    filter_prompts,
    read_pairs,
    read_prompts,
    write_pairs,
    write_prompts,
)
from .diffusion import (
    Denoiser,
    DenoiserArch,
    ancestral_sample,
    ddim_sample,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    train_base,
)
from .io import canonical_json, digest_file, load_container, read_jsonl, save_container, write_bytes_atomic
from .patches import make_grid
from .rewards import (
    DIMENSIONS,
    DistillConfig,
    OracleReward,
    distill_patch_rm,
    normalize_label,
    read_reward_records,
    scalarize,
    write_reward_records,
)
from .rng import SeededRng
from .synthetic import flawed_samples, generate_prompt_sets, make_targets

STAGES = ("gen-data", "train-base", "sample", "reward", "distill-rm", "build-pairs", "align", "analyze")


class PipelineError(Exception):
    """Missing, stale or inconsistent pipeline artifacts."""


# file name -> producing stage
PRODUCER = {
    "targets.halc": "gen-data",
    "prompts.jsonl": "gen-data",
    "valid_prompts.jsonl": "gen-data",
    "eval_prompts.jsonl": "gen-data",
    "base_data.halc": "gen-data",
    "base.ckpt": "train-base",
    "samples.halc": "sample",
    "rewards.jsonl": "reward",
    "patch_rm.ckpt": "distill-rm",
    "distill.json": "distill-rm",
    "rewards_distilled.jsonl": "distill-rm",
    "pairs.jsonl": "build-pairs",
    "aligned.ckpt": "align",
    "trend.csv": "align",
}


@dataclass
class Run:
    cfg: RunConfig
    force: bool = False

    @property
    def root(self) -> Path:
        return Path(self.cfg.out_dir)

    def path(self, name: str) -> Path:
        return self.root / name

    def provenance_path(self, stage: str) -> Path:
        return self.root / "provenance" / f"{stage}.json"

    def read_provenance(self, stage: str) -> dict | None:
        p = self.provenance_path(stage)
        if not p.exists():
            return None
        return json.loads(p.read_text())

    def check_inputs(self, names) -> dict[str, str]:
        """Digest every input and compare it with its producer's record."""
        digests = {}
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise PipelineError(f"missing input {p}; run the {PRODUCER[name]} stage first")
            digest = digest_file(p)
            record = self.read_provenance(PRODUCER[name])
            if record is None:
                raise PipelineError(f"no provenance record for {name}")
            if record["outputs"].get(name) != digest and not self.force:
                raise PipelineError(f"{name} changed after the {PRODUCER[name]} stage wrote it")
            if record["config_digest"] != self.cfg.digest() and not self.force:
                raise PipelineError(
                    f"{name} was produced under config {record['config_digest'][:12]}, "
                    f"current config is {self.cfg.digest()[:12]} (use --force to accept)"
                )
            digests[name] = digest
        return digests

    def record(self, stage: str, inputs: dict[str, str], outputs, started: float, extra: dict | None = None) -> dict:
        rec = {
            "stage": stage,
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": inputs,
            "outputs": {name: digest_file(self.path(name)) for name in outputs},
            "wall_time": round(time.time() - started, 3),
        }
        if extra:
            rec.update(extra)
        p = self.provenance_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        write_bytes_atomic(p, (json.dumps(rec, indent=1, sort_keys=True) + "\n").encode())
        write_bytes_atomic(self.path("config.toml"), self.cfg.to_toml().encode())
        return rec


def _arch(cfg: RunConfig) -> DenoiserArch:
    return DenoiserArch(
        frames=cfg.frames, height=cfg.height, width=cfg.width, channels=cfg.channels, hidden=cfg.hidden,
        time_dim=cfg.time_dim, cond_dim=cfg.cond_dim, n_classes=cfg.n_classes, n_steps=cfg.T,
    )


def _grid(cfg: RunConfig):
    return make_grid(cfg.height, cfg.width, cfg.grid_rows, cfg.grid_cols)


def _oracle(run: Run) -> OracleReward:
    _, blocks = load_container(run.path("targets.halc"))
    return OracleReward(blocks["targets"], lam=run.cfg.oracle_lambda)


def _sample(model, cfg: RunConfig, sched, cls: int, rng: SeededRng) -> np.ndarray:
    if cfg.sampler == "ddim":
        return ddim_sample(model, cls, rng, sched, cfg.sample_steps)
    return ancestral_sample(model, cls, rng, sched)


def _sample_many(model, cfg, sched, jobs: list[tuple[int, str]]) -> np.ndarray:
    """Sample one latent per ``(class, rng label)``; each job owns its stream,
    so the thread count never changes the result."""

    def one(job):
        cls, label = job
        return _sample(model, cfg, sched, cls, SeededRng(cfg.seed, label))

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            out = list(pool.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    return np.stack(out)


def gen_data(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    root = SeededRng(cfg.seed, "gen-data")
    grid = _grid(cfg)
    shape = (cfg.frames, cfg.height, cfg.width, cfg.channels)
    targets = make_targets(root.derive("targets"), cfg.n_classes, shape)

    if cfg.prompts_file:
        _, evaluation = generate_prompt_sets(root.derive("prompts"), 0, cfg.n_eval_prompts, cfg.n_classes, cfg.tau)
        given = read_prompts(cfg.prompts_file)
        check_unique(given)
        bad = [p.prompt_id for p in given if not 0 <= p.prompt_class < cfg.n_classes]
        if bad:
            raise PipelineError(f"prompt classes outside [0, {cfg.n_classes}): {bad[:5]}")
        kept = filter_prompts(given, evaluation, cfg.tau)[: cfg.n_prompts]
    else:
        kept, evaluation = generate_prompt_sets(root.derive("prompts"), cfg.n_prompts, cfg.n_eval_prompts, cfg.n_classes, cfg.tau)
    if len(kept) <= cfg.n_valid:
        raise PipelineError(f"{len(kept)} prompts survive the filter, fewer than n_valid + 1")
    train_prompts = kept[: len(kept) - cfg.n_valid]
    valid_prompts = kept[len(kept) - cfg.n_valid :]

    classes = root.derive("base-classes").integers(0, cfg.n_classes - 1, size=cfg.base_videos)
    latents = flawed_samples(
        targets, classes, grid, root.derive("base-data"),
        defect_prob=cfg.defect_prob, defect_scale=cfg.defect_scale, noise=cfg.data_noise,
        flawed_fraction=cfg.flawed_fraction,
    )
    run.root.mkdir(parents=True, exist_ok=True)
    save_container(run.path("targets.halc"), {"kind": "targets", "config_digest": cfg.digest()}, {"targets": targets})
    save_container(
        run.path("base_data.halc"),
        {"kind": "base_data", "config_digest": cfg.digest()},
        {"latents": latents, "classes": classes.astype(np.float64)},
    )
    write_prompts(run.path("prompts.jsonl"), train_prompts)
    write_prompts(run.path("valid_prompts.jsonl"), valid_prompts)
    write_prompts(run.path("eval_prompts.jsonl"), evaluation)
    outs = ["targets.halc", "base_data.halc", "prompts.jsonl", "valid_prompts.jsonl", "eval_prompts.jsonl"]
    return run.record("gen-data", {}, outs, t0, {"n_train_prompts": len(train_prompts)})


def train_base_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    inputs = run.check_inputs(["base_data.halc"])
    _, blocks = load_container(run.path("base_data.halc"))
    data, classes = blocks["latents"], blocks["classes"].astype(int)
    root = SeededRng(cfg.seed, "train-base")
    sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    init = Denoiser.init(_arch(cfg), root.derive("init"))
    model, losses = train_base(init, data, classes, sched, root.derive("fit"), cfg.base_steps, cfg.base_batch, cfg.base_lr)
    save_checkpoint(run.path("base.ckpt"), model, sched, cfg.base_steps, {"config_digest": cfg.digest()})
    tail = losses[-min(100, len(losses)) :] if losses else [float("nan")]
    return run.record("train-base", inputs, ["base.ckpt"], t0, {"final_loss": float(np.mean(tail))})


def sample_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    inputs = run.check_inputs(["base.ckpt", "prompts.jsonl"])
    base, sched, _ = load_checkpoint(run.path("base.ckpt"))
    prompts = read_prompts(run.path("prompts.jsonl"))
    index = [(p.prompt_id, k, p.prompt_class) for p in prompts for k in range(cfg.samples_per_prompt)]
    latents = _sample_many(base, cfg, sched, [(c, f"sample/{pid}/{k}") for pid, k, c in index])
    header = {
        "kind": "samples",
        "config_digest": cfg.digest(),
        "index": [[pid, k, c] for pid, k, c in index],
    }
    save_container(run.path("samples.halc"), header, {"latents": latents})
    return run.record("sample", inputs, ["samples.halc"], t0)


def _load_samples(run: Run):
    header, blocks = load_container(run.path("samples.halc"))
    return [tuple(r) for r in header["index"]], blocks["latents"]


def _external_records(path, grid) -> dict[tuple[str, int], dict]:
    """Human-style labels on the 0-10 scale, mapped onto [1, 4]."""
    out = {}
    for r in read_jsonl(path):
        video = np.array([normalize_label(float(r["video"][d])) for d in DIMENSIONS])
        patches = np.array([[normalize_label(float(p[d])) for d in DIMENSIONS] for p in r["patches"]])
        if len(patches) != grid.n_patches:
            raise PipelineError(f"label record has {len(patches)} patches, grid expects {grid.n_patches}")
        out[(r["prompt_id"], int(r["video_id"]))] = {
            "prompt_id": r["prompt_id"],
            "video_id": int(r["video_id"]),
            "video": video,
            "patches": patches.reshape(grid.h_n, grid.w_n, len(DIMENSIONS)),
        }
    return out


def reward_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    inputs = run.check_inputs(["samples.halc", "targets.halc"])
    grid = _grid(cfg)
    index, latents = _load_samples(run)
    if cfg.labels_file:
        labels = _external_records(cfg.labels_file, grid)
        missing = [(pid, k) for pid, k, _ in index if (pid, k) not in labels]
        if missing:
            raise PipelineError(f"labels file lacks {len(missing)} sampled videos, e.g. {missing[0]}")
        records = [labels[(pid, k)] for pid, k, _ in index]
    else:
        oracle = _oracle(run)
        records = [
            {"prompt_id": pid, "video_id": k, "video": oracle.score_video(c, x), "patches": oracle.score_patches(c, x, grid)}
            for (pid, k, c), x in zip(index, latents)
        ]
    write_reward_records(run.path("rewards.jsonl"), records)
    return run.record("reward", inputs, ["rewards.jsonl"], t0, {"source": "labels" if cfg.labels_file else "oracle"})


def distill_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    inputs = run.check_inputs(["samples.halc", "rewards.jsonl"])
    grid = _grid(cfg)
    index, latents = _load_samples(run)
    teacher = read_reward_records(run.path("rewards.jsonl"), grid)
    dataset = [(c, x, rec["patches"]) for (_, _, c), x, rec in zip(index, latents, teacher)]
    dcfg = DistillConfig(hidden=cfg.distill_hidden, epochs=cfg.distill_epochs, batch=cfg.distill_batch, lr=cfg.distill_lr, seed=cfg.seed)
    result = distill_patch_rm(dataset, grid, dcfg)
    result.model.save(run.path("patch_rm.ckpt"), {"config_digest": cfg.digest()})
    metrics = {
        "split_sizes": list(result.split_sizes),
        "train_loss": result.train_loss[-1] if result.train_loss else None,
        "valid_loss": None if np.isnan(result.valid_loss) else result.valid_loss,
        "test_loss": result.test_loss,
        "test_spearman": result.test_spearman,
        "config_digest": cfg.digest(),
    }
    write_bytes_atomic(run.path("distill.json"), (canonical_json(metrics) + "\n").encode())
    records = [
        {"prompt_id": rec["prompt_id"], "video_id": rec["video_id"], "video": rec["video"], "patches": result.model.score_patches(c, x, grid)}
        for (_, _, c), x, rec in zip(index, latents, teacher)
    ]
    write_reward_records(run.path("rewards_distilled.jsonl"), records)
    return run.record("distill-rm", inputs, ["patch_rm.ckpt", "distill.json", "rewards_distilled.jsonl"], t0, {"test_spearman": result.test_spearman})


def _reward_file(cfg: RunConfig) -> str:
    return "rewards_distilled.jsonl" if cfg.patch_reward_source == "distilled" else "rewards.jsonl"


def candidate_sets(run: Run, reward_file: str) -> list[CandidateSet]:
    grid = _grid(run.cfg)
    index, latents = _load_samples(run)
    records = {(r["prompt_id"], r["video_id"]): r for r in read_reward_records(run.path(reward_file), grid)}
    groups: dict[str, CandidateSet] = {}
    for (pid, k, c), x in zip(index, latents):
        rec = records.get((pid, k))
        if rec is None:
            raise PipelineError(f"{reward_file} has no record for video {pid}/{k}")
        cs = groups.setdefault(pid, CandidateSet(pid, c, []))
        cs.candidates.append(Candidate(k, float(scalarize(rec["video"])), scalarize(rec["patches"]), x))
    return list(groups.values())


def build_pairs_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    src = _reward_file(cfg)
    inputs = run.check_inputs(["samples.halc", src])
    try:
        pairs, stats = build_pairs(candidate_sets(run, src), cfg.median_scope, cfg.strict)
    except EmptyDatasetError as exc:
        raise PipelineError(str(exc)) from exc
    write_pairs(run.path("pairs.jsonl"), pairs, stats, cfg.digest())
    return run.record("build-pairs", inputs, ["pairs.jsonl"], t0, {"n_pairs": len(pairs), "m_V": stats.m_v, "m_P": stats.m_p})


def load_training_pairs(run: Run):
    """Pairs from the pair file with their latents and prompt classes attached."""
    grid = _grid(run.cfg)
    pairs, stats, header = read_pairs(run.path("pairs.jsonl"), (grid.h_n, grid.w_n))
    index, latents = _load_samples(run)
    where = {(pid, k): (c, x) for (pid, k, c), x in zip(index, latents)}
    for p in pairs:
        try:
            c, p.x_w = where[(p.prompt_id, p.winner_id)]
            _, p.x_l = where[(p.prompt_id, p.loser_id)]
        except KeyError as exc:
            raise PipelineError(f"pair {p.prompt_id}/{p.winner_id}-{p.loser_id} refers to an unknown video") from exc
        p.prompt_class = c
    return pairs, stats, header


def dpo_config(cfg: RunConfig, stats) -> gd.DpoConfig:
    return gd.DpoConfig.from_stats(
        stats, beta=cfg.dpo_beta, T=cfg.T, lr=cfg.dpo_lr, steps=cfg.dpo_steps, seed=cfg.seed, batch=cfg.dpo_batch,
        grid=_grid(cfg), video_denominator=cfg.video_denominator, use_video=cfg.use_video_loss,
        use_patch=cfg.use_patch_loss, use_weights=cfg.use_pair_weights, trend_every=cfg.trend_every,
        eval_pairs=cfg.eval_pairs, eval_draws=cfg.eval_draws,
    )


def align_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    inputs = run.check_inputs(["base.ckpt", "samples.halc", "pairs.jsonl"])
    base, sched, _ = load_checkpoint(run.path("base.ckpt"))
    pairs, stats, _ = load_training_pairs(run)
    model, trend = gd.train(pairs, base, sched, dpo_config(cfg, stats))
    extra = {"config_digest": cfg.digest(), "pairs_digest": inputs["pairs.jsonl"], "base_digest": inputs["base.ckpt"]}
    save_checkpoint(run.path("aligned.ckpt"), model, sched, cfg.dpo_steps, extra)
    gd.write_trend(run.path("trend.csv"), trend)
    return run.record("align", inputs, ["aligned.ckpt", "trend.csv"], t0)


def analysis_videos(run: Run, model, sched) -> tuple[list[int], np.ndarray]:
    """The fixed before/after sample set: evaluation-prompt classes and shared seeds."""
    prompts = read_prompts(run.path("eval_prompts.jsonl"))
    classes = [prompts[k % len(prompts)].prompt_class for k in range(run.cfg.analysis_videos)]
    return classes, _sample_many(model, run.cfg, sched, [(c, f"analysis/{k}") for k, c in enumerate(classes)])


def analyze_stage(run: Run) -> dict:
    cfg, t0 = run.cfg, time.time()
    src = _reward_file(cfg)
    needed = ["targets.halc", "eval_prompts.jsonl", "samples.halc", "rewards.jsonl", src, "base.ckpt", "aligned.ckpt", "trend.csv"]
    if cfg.patch_reward_source == "distilled":
        needed.append("distill.json")
    inputs = run.check_inputs(dict.fromkeys(needed))
    digests = {run.read_provenance(PRODUCER[n])["config_digest"] for n in inputs}
    if len(digests) > 1:
        raise PipelineError(f"inputs come from {len(digests)} different configs; rerun the pipeline")

    grid = _grid(cfg)
    oracle = _oracle(run)
    sets = candidate_sets(run, src)
    consistency = an.consistency_counts(
        [[(c.video_reward, float(np.mean(c.patch_rewards))) for c in cs.candidates] for cs in sets]
    )
    records = read_reward_records(run.path(src), grid)
    variances = [(r["prompt_id"], r["video_id"], an.inner_variance(r["patches"])) for r in records]

    base, sched, _ = load_checkpoint(run.path("base.ckpt"))
    aligned, _, _ = load_checkpoint(run.path("aligned.ckpt"))
    classes, before = analysis_videos(run, base, sched)
    _, after = analysis_videos(run, aligned, sched)
    grids_before = [oracle.score_patches(c, x, grid) for c, x in zip(classes, before)]
    grids_after = [oracle.score_patches(c, x, grid) for c, x in zip(classes, after)]
    v_before = float(np.mean([scalarize(oracle.score_video(c, x)) for c, x in zip(classes, before)]))
    v_after = float(np.mean([scalarize(oracle.score_video(c, x)) for c, x in zip(classes, after)]))

    teacher = read_reward_records(run.path("rewards.jsonl"), grid)
    rows = []
    vid = np.array([scalarize(r["video"]) for r in teacher])
    pmean = np.array([np.mean(scalarize(r["patches"])) for r in teacher])
    rows.append(_spearman_row("video_vs_patch_mean", vid, pmean))
    if cfg.patch_reward_source == "distilled":
        distilled = read_reward_records(run.path(src), grid)
        a = np.concatenate([np.ravel(scalarize(r["patches"])) for r in teacher])
        b = np.concatenate([np.ravel(scalarize(r["patches"])) for r in distilled])
        rows.append(_spearman_row("teacher_vs_distilled_patches_all", a, b))
        held = json.loads(run.path("distill.json").read_text())
        rows.append(("teacher_vs_distilled_patches_test", int(held["split_sizes"][2]) * grid.n_patches, float(held["test_spearman"])))

    data = an.ReportData(
        consistency=consistency,
        variances=variances,
        levels_before=an.sorted_levels(grids_before),
        levels_after=an.sorted_levels(grids_after),
        trend=gd.read_trend(run.path("trend.csv")),
        spearman_rows=rows,
        summary={
            "config_digest": cfg.digest(),
            "video_reward_before": f"{v_before:.6f}",
            "video_reward_after": f"{v_after:.6f}",
            "implicit_reward": "-beta*T*(||eps-eps_theta||^2 - ||eps-eps_ref||^2) on a fixed evaluation subset",
        },
    )
    written = an.emit_report(data, run.path("report"))
    outs = [str(p.relative_to(run.root)) for p in written]
    return run.record("analyze", inputs, outs, t0, {"video_reward_before": v_before, "video_reward_after": v_after})


def _spearman_row(name, a, b) -> tuple[str, int, float]:
    try:
        rho = an.spearman(a, b)
    except ValueError:
        rho = float("nan")
    return name, int(len(a)), rho


STAGE_FUNCS = {
    "gen-data": gen_data,
    "train-base": train_base_stage,
    "sample": sample_stage,
    "reward": reward_stage,
    "distill-rm": distill_stage,
    "build-pairs": build_pairs_stage,
    "align": align_stage,
    "analyze": analyze_stage,
}


def run_stage(run: Run, stage: str) -> dict:
    return STAGE_FUNCS[stage](run)


def run_all(run: Run) -> list[dict]:
    return [run_stage(run, s) for s in STAGES]
