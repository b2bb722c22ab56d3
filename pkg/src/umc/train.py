"""Two-stage PPO training over vectorized damaged environments.

A run is a list of phases.  Each phase owns its env seed and sampling
stream, derived from ``(seed, phase index)``, so a run resumed from a phase
checkpoint continues exactly as the uninterrupted run would have.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .damage import SUBCATEGORIES, DamageSpec, sample_stage2, spec_rng
from .env import EnvConfig, VecEnv
from .policy import ModelConfig, config_hash, load_checkpoint, make_actor_critic, save_checkpoint
from .ppo import EpisodeTracker, PpoHyper, collect_rollout, update

logger = logging.getLogger(__name__)

PARADIGMS = ("stage_based", "curriculum_based", "one_stage")
CURVE_COLUMNS = ("iteration", "mean_reward", "mean_episode_len", "loss_surrogate", "loss_value",
                 "entropy", "clip_fraction")
# curriculum blocks in order of increasing difficulty, as one-hot subcategory weights
CURRICULUM = (
    ("undetectable", (0.0, 0.0, 0.0, 1.0)),
    ("sensor_only", (0.0, 1.0, 0.0, 0.0)),
    ("detectable", (0.0, 0.0, 1.0, 0.0)),
)


@dataclass(frozen=True)
class DamageConfig:
    damage_range: tuple = (2, 4)
    limit_fraction: float = 0.3
    rom_fraction: float = 0.3
    # Stage-II onset step is drawn uniformly from this closed range
    onset_range: tuple = (0, 200)

    def __post_init__(self):
        lo, hi = self.damage_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad damage_range {self.damage_range!r}")
        if not 0 <= self.onset_range[0] <= self.onset_range[1]:
            raise ValueError(f"bad onset_range {self.onset_range!r}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    paradigm: str = "stage_based"
    stage1_iters: int = 300
    stage2_iters: int = 300
    stage2_ratios: tuple = (1.0, 1.0, 1.0, 1.0)
    mask_value: float = 0.0
    strict: bool = True
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PpoHyper = field(default_factory=PpoHyper)
    damage: DamageConfig = field(default_factory=DamageConfig)

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        w = np.asarray(self.stage2_ratios, dtype=float)
        if w.shape != (4,) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError(f"stage2 ratios must be 4 non-negative weights, not all zero: {self.stage2_ratios!r}")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.model.n_joints != self.env.n_joints:
            raise ValueError(f"model has {self.model.n_joints} joints, env has {self.env.n_joints}")
        if self.damage.damage_range[1] >= self.env.n_joints:
            raise ValueError("damage_range must leave at least one joint undamaged")
        if self.damage.onset_range[1] >= self.env.episode_length:
            raise ValueError("onset_range must end before the episode does")

    def to_dict(self) -> dict:
        return asdict(self)

    def stage1_key(self) -> str:
        """Hash of everything that shapes the Stage-I phase."""
        d = self.to_dict()
        return config_hash({k: d[k] for k in ("seed", "stage1_iters", "env", "model", "ppo")})


@dataclass(frozen=True)
class Phase:
    name: str
    iters: int
    ratios: tuple | None  # None means undamaged episodes only


def schedule(cfg: TrainConfig) -> list[Phase]:
    """Ordered phases of a run; phases with zero iterations are dropped."""
    if cfg.paradigm == "one_stage":
        phases = [Phase("stage2", cfg.stage1_iters + cfg.stage2_iters, tuple(cfg.stage2_ratios))]
    elif cfg.paradigm == "stage_based":
        phases = [Phase("stage1", cfg.stage1_iters, None),
                  Phase("stage2", cfg.stage2_iters, tuple(cfg.stage2_ratios))]
    else:
        base, extra = divmod(cfg.stage2_iters, len(CURRICULUM))
        phases = [Phase("stage1", cfg.stage1_iters, None)]
        for i, (name, ratios) in enumerate(CURRICULUM):
            phases.append(Phase(f"stage2_{name}", base + (i < extra), ratios))
    return [p for p in phases if p.iters > 0]


class SpecSampler:
    """Per-episode DamageSpec source for one phase; counts subcategory draws."""

    def __init__(self, cfg: TrainConfig, phase_index: int, phase: Phase):
        self.cfg = cfg
        self.phase_index = phase_index
        self.ratios = phase.ratios
        self.limits = cfg.env.damage_limits(cfg.damage.limit_fraction, cfg.damage.rom_fraction)
        self.counts: Counter = Counter()

    def __call__(self, env_index: int, episode: int) -> DamageSpec:
        if self.ratios is None:
            self.counts["normal"] += 1
            return DamageSpec()
        rng = spec_rng(self.cfg.seed, self.phase_index, env_index, episode)
        lo, hi = self.cfg.damage.onset_range
        onset = int(rng.integers(lo, hi + 1))
        spec = sample_stage2(rng, self.ratios, self.cfg.env.n_joints, self.cfg.damage.damage_range,
                             self.limits, onset)
        self.counts[spec.scenario] += 1
        return spec


@dataclass
class TrainResult:
    checkpoints: dict[str, Path]
    curve: list[dict]
    subcategory_counts: dict[str, int]
    seconds: float

    @property
    def final(self) -> Path:
        return self.checkpoints["final"]


def write_curve(path, rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in CURVE_COLUMNS})
    tmp.replace(path)


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _fmt(x):
    return x if isinstance(x, int) else repr(float(x))


def _strict_context(strict: bool):
    return threadpool_limits(limits=1) if strict else contextlib.nullcontext()


def train(cfg: TrainConfig, out_dir, resume_from=None, log_every: int = 10, prefix: str = "",
          final_name: str = "final.npz") -> TrainResult:
    """Run every phase of ``cfg`` and write checkpoints plus the training curve to ``out_dir``.

    Phase checkpoints are ``{prefix}{phase}.npz``, the curve is
    ``{prefix}training_curve.csv`` and the end-of-run checkpoint is ``final_name``.

    ``resume_from`` may point at a ``stage1.npz`` written by a run with the same
    Stage-I settings; its phase is then skipped.  Ablations use this to share
    one Stage-I policy across Stage-II variants.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phases = schedule(cfg)
    t0 = time.perf_counter()
    curve: list[dict] = []
    counts: Counter = Counter()
    checkpoints: dict[str, Path] = {}
    start = 0
    iteration = 0

    if resume_from is not None:
        actor, critic, meta = load_checkpoint(resume_from)
        if meta.get("stage1_key") != cfg.stage1_key() or meta.get("phase") != "stage1":
            raise ValueError(f"{resume_from} was not produced by this config's Stage-I phase")
        if phases[0].name != "stage1":
            raise ValueError("resuming needs a schedule that starts with Stage I")
        start = 1
        iteration = phases[0].iters
        checkpoints["stage1"] = Path(resume_from)
    else:
        actor, critic = make_actor_critic(cfg.model, cfg.seed)

    meta = {"config": cfg.to_dict(), "config_hash": config_hash(cfg.to_dict()),
            "stage1_key": cfg.stage1_key()}
    with _strict_context(cfg.strict):
        for k in range(start, len(phases)):
            phase = phases[k]
            sampler = SpecSampler(cfg, k, phase)
            venv = VecEnv(cfg.env, cfg.ppo.n_envs, _phase_seed(cfg.seed, k), sampler, cfg.mask_value)
            venv.reset()
            rng = np.random.default_rng([cfg.seed, k, 0x5EED])
            tracker = EpisodeTracker(cfg.ppo.n_envs)
            logger.info("phase %s: %d iterations", phase.name, phase.iters)
            for _ in range(phase.iters):
                buf = collect_rollout(actor, critic, venv, cfg.ppo, rng, tracker, cfg.mask_value)
                stats = update(buf, actor, critic, cfg.ppo, rng, cfg.mask_value)
                iteration += 1
                row = {"iteration": iteration, "mean_reward": buf.raw_reward_mean,
                       "mean_episode_len": tracker.mean_length(), "phase": phase.name, **stats}
                curve.append(row)
                if log_every and iteration % log_every == 0:
                    logger.info("it %d [%s] reward %.4f len %.1f kl %.4f clip %.3f", iteration, phase.name,
                                row["mean_reward"], row["mean_episode_len"], stats["approx_kl"],
                                stats["clip_fraction"])
            if phase.ratios is not None:
                counts.update(sampler.counts)
            path = out_dir / f"{prefix}{phase.name}.npz"
            save_checkpoint(path, actor, critic, {**meta, "phase": phase.name, "iteration": iteration})
            checkpoints[phase.name] = path

    final = out_dir / final_name
    save_checkpoint(final, actor, critic, {**meta, "phase": "final", "iteration": iteration})
    checkpoints["final"] = final
    write_curve(out_dir / f"{prefix}training_curve.csv", curve)
    return TrainResult(checkpoints, curve, dict(counts), time.perf_counter() - t0)


def _phase_seed(seed: int, phase_index: int) -> int:
    return int(np.random.SeedSequence([seed, phase_index]).generate_state(1)[0])


def subcategory_frequencies(counts: dict) -> dict[str, float]:
    total = sum(counts.get(s, 0) for s in SUBCATEGORIES)
    return {s: (counts.get(s, 0) / total if total else math.nan) for s in SUBCATEGORIES}


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
