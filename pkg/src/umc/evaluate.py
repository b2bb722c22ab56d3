"""Scenario sweeps: distance-threshold and failure metrics, averaged tables and reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .damage import SCENARIOS, DamageArrays, DamageLimits, corrupt_arrays, scenario_config, spec_rng
from .env import EnvConfig, reset, step
from .policy import config_hash, load_checkpoint

logger = logging.getLogger(__name__)

THRESHOLDS = (1, 2, 3, 4, 5)
REPORT_COLUMNS = ("model", "scenario", "setting", "seed", "n_envs", "reach_1", "reach_2", "reach_3",
                  "reach_4", "reach_5", "failed", "mean_displacement")


class InvariantViolation(AssertionError):
    """A metrics report broke one of its structural invariants."""


@dataclass(frozen=True)
class InferenceSetting:
    name: str
    seed: int
    malfunction_timing: int
    damage_count_range: tuple = (2, 3)
    episode_length: int = 750
    # optional severity overrides; None keeps the training value
    limit_fraction: float | None = None
    rom_fraction: float | None = None

    def __post_init__(self):
        if not 0 <= self.malfunction_timing < self.episode_length:
            raise ValueError("malfunction timing must fall inside the episode")

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceSetting":
        d = dict(d)
        if "damage_count_range" in d:
            d["damage_count_range"] = tuple(d["damage_count_range"])
        return cls(**d)


DEFAULT_SETTINGS = (
    InferenceSetting("I", seed=1, malfunction_timing=75),
    InferenceSetting("II", seed=800, malfunction_timing=100),
    InferenceSetting("III", seed=50, malfunction_timing=125),
)


@dataclass
class Outcomes:
    """Per-env results of one scenario run."""

    displacement: np.ndarray       # since onset; NaN if the onset was never reached
    fallen: np.ndarray             # fell after the damage onset
    fell_before_onset: np.ndarray
    steps: np.ndarray

    @classmethod
    def from_lists(cls, displacement, fallen, fell_before_onset=None) -> "Outcomes":
        d = np.asarray(displacement, dtype=np.float64)
        f = np.asarray(fallen, dtype=bool)
        pre = np.zeros_like(f) if fell_before_onset is None else np.asarray(fell_before_onset, dtype=bool)
        return cls(d, f, pre, np.zeros(d.shape, dtype=np.int64))

    def __len__(self) -> int:
        return self.displacement.shape[0]


@dataclass(frozen=True)
class MetricsReport:
    model: str
    scenario: int | str
    setting: str
    seed: int | None
    n_envs: int
    reach: tuple
    failed: float
    mean_displacement: float

    def validate(self) -> "MetricsReport":
        r = self.reach
        if any(a < b for a, b in zip(r[:-1], r[1:])):
            raise InvariantViolation(f"reach buckets not monotone: {r}")
        if any(x + self.failed > 1.0 + 1e-12 for x in r):
            raise InvariantViolation(f"reach + failed exceeds 1: {r}, {self.failed}")
        if any(x < 0 for x in r) or not 0.0 <= self.failed <= 1.0:
            raise InvariantViolation("fractions must lie in [0, 1]")
        return self

    def to_row(self) -> dict:
        row = {"model": self.model, "scenario": self.scenario, "setting": self.setting, "seed": self.seed,
               "n_envs": self.n_envs}
        row.update({f"reach_{k}": v for k, v in zip(THRESHOLDS, self.reach)})
        row["failed"] = self.failed
        row["mean_displacement"] = self.mean_displacement
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MetricsReport":
        scenario = row["scenario"]
        seed = row["seed"]
        return cls(
            model=str(row["model"]),
            scenario=scenario if scenario == "all" else int(scenario),
            setting=str(row["setting"]),
            seed=None if seed in (None, "") else int(seed),
            n_envs=int(row["n_envs"]),
            reach=tuple(float(row[f"reach_{k}"]) for k in THRESHOLDS),
            failed=float(row["failed"]),
            mean_displacement=float(row["mean_displacement"]),
        )


def aggregate(outcomes: Outcomes, thresholds=THRESHOLDS, model: str = "", scenario=0, setting: str = "",
              seed: int | None = None) -> MetricsReport:
    """Reach fractions and failure rate; envs that fell are excluded from every reach bucket."""
    n = len(outcomes)
    if n == 0:
        raise ValueError("cannot aggregate an empty set of outcomes")
    disp = np.nan_to_num(outcomes.displacement, nan=0.0)
    standing = ~outcomes.fallen & ~outcomes.fell_before_onset
    reach = tuple(float(np.count_nonzero(standing & (disp >= k))) / n for k in thresholds)
    failed = float(np.count_nonzero(outcomes.fallen)) / n
    defined = outcomes.displacement[np.isfinite(outcomes.displacement)]
    mean_disp = float(defined.mean()) if defined.size else math.nan
    return MetricsReport(model, scenario, setting, seed, n, reach, failed, mean_disp).validate()


def eval_specs(scenario_id: int, setting: InferenceSetting, n_envs: int, env_cfg: EnvConfig,
               limits: DamageLimits):
    template = scenario_config(scenario_id, limits)
    return [template.instantiate(spec_rng(setting.seed, scenario_id, i), env_cfg.n_joints,
                                 setting.damage_count_range, setting.malfunction_timing)
            for i in range(n_envs)]


def setting_limits(env_cfg: EnvConfig, setting: InferenceSetting, limit_fraction: float = 0.3,
                   rom_fraction: float = 0.3) -> DamageLimits:
    lf = limit_fraction if setting.limit_fraction is None else setting.limit_fraction
    rf = rom_fraction if setting.rom_fraction is None else setting.rom_fraction
    return env_cfg.damage_limits(lf, rf)


def run_scenario(actor, scenario_id: int, setting: InferenceSetting, n_envs: int, env_cfg: EnvConfig,
                 mask_value: float = 0.0, limits: DamageLimits | None = None, trajectory=None) -> Outcomes:
    """Roll out ``n_envs`` episodes with mean actions; damage starts at the setting's timing.

    ``trajectory`` may be a :class:`~umc.env.TrajectoryLog` that records env 0.
    """
    if scenario_id not in SCENARIOS:
        raise ValueError(f"scenario id must be in 1..8, got {scenario_id!r}")
    cfg = replace(env_cfg, episode_length=setting.episode_length)
    limits = limits or setting_limits(cfg, setting)
    dmg = DamageArrays.from_specs(eval_specs(scenario_id, setting, n_envs, cfg, limits), cfg.n_joints)
    seeds = [int(np.random.SeedSequence([setting.seed, scenario_id, i, 0xE7]).generate_state(1)[0])
             for i in range(n_envs)]
    state, obs_true = reset(seeds, cfg, onset=dmg.onset)
    obs = corrupt_arrays(obs_true, dmg.sensor_failed, state.damage_active, mask_value)
    alive = np.ones(n_envs, dtype=bool)
    while alive.any():
        idx = np.flatnonzero(alive)
        sub, sub_dmg = state[idx], dmg[idx]
        masked, detected = sub_dmg.flags(sub.damage_active)
        means = actor.forward(obs[idx], masked, detected, mask_value)
        if not np.all(np.isfinite(means)):
            raise FloatingPointError(f"non-finite action in scenario {scenario_id}")
        nxt, res = step(sub, means, sub_dmg, cfg, mask_value)
        if trajectory is not None and idx[0] == 0:
            trajectory.record(nxt, res, masked, detected, env=0)
        state.set_rows(idx, nxt)
        obs[idx] = res.obs
        alive[idx] = ~res.done
    # a fall counts as damage-related only if the step it happened in ran with damage active
    after = state.step > dmg.onset
    disp = np.where(np.isnan(state.x_onset), np.nan, state.x - state.x_onset)
    return Outcomes(disp, state.fallen & after, state.fallen & ~after, state.step.copy())


@dataclass
class SweepResult:
    cells: list[MetricsReport]
    averages: list[MetricsReport]

    @property
    def overall(self) -> MetricsReport:
        return self.averages[-1]

    def rows(self) -> list[MetricsReport]:
        return self.cells + self.averages


def average_reports(reports, model: str, scenario, setting: str = "avg") -> MetricsReport:
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to average")
    reach = tuple(float(np.mean([r.reach[i] for r in reports])) for i in range(len(THRESHOLDS)))
    disp = [r.mean_displacement for r in reports if not math.isnan(r.mean_displacement)]
    return MetricsReport(model, scenario, setting, None, sum(r.n_envs for r in reports), reach,
                         float(np.mean([r.failed for r in reports])),
                         float(np.mean(disp)) if disp else math.nan).validate()


def full_sweep(actor, settings=DEFAULT_SETTINGS, n_envs: int = 256, env_cfg: EnvConfig | None = None,
               mask_value: float = 0.0, model: str = "umc", limit_fraction: float = 0.3,
               rom_fraction: float = 0.3, scenarios=SCENARIOS) -> SweepResult:
    """Evaluate every scenario under every setting, then average per scenario and overall."""
    env_cfg = env_cfg or EnvConfig()
    cells = []
    for sid in scenarios:
        for s in settings:
            lim = setting_limits(env_cfg, s, limit_fraction, rom_fraction)
            out = run_scenario(actor, sid, s, n_envs, env_cfg, mask_value, lim)
            cells.append(aggregate(out, model=model, scenario=sid, setting=s.name, seed=s.seed))
            logger.debug("scenario %d setting %s: reach %s failed %.3f", sid, s.name, cells[-1].reach,
                         cells[-1].failed)
    averages = [average_reports([c for c in cells if c.scenario == sid], model, sid) for sid in scenarios]
    averages.append(average_reports(cells, model, "all"))
    return SweepResult(cells, averages)


def sweep_checkpoint(path, settings=DEFAULT_SETTINGS, n_envs: int = 256, model: str | None = None,
                     env_cfg: EnvConfig | None = None, mask_value: float | None = None,
                     scenarios=SCENARIOS) -> SweepResult:
    """:func:`full_sweep` on a checkpoint, using the env and damage settings it was trained with."""
    actor, _, meta = load_checkpoint(path)
    train_cfg = meta.get("config", {})
    trained_env = EnvConfig.from_dict(train_cfg["env"]) if "env" in train_cfg else None
    if env_cfg is None:
        env_cfg = trained_env or EnvConfig()
    elif trained_env is not None and config_hash(asdict(trained_env)) != config_hash(asdict(env_cfg)):
        logger.warning("evaluation env config differs from the one %s was trained with", path)
    if mask_value is None:
        mask_value = float(train_cfg.get("mask_value", 0.0))
    dmg = train_cfg.get("damage", {})
    return full_sweep(actor, settings, n_envs, env_cfg, mask_value, model or Path(path).stem,
                      dmg.get("limit_fraction", 0.3), dmg.get("rom_fraction", 0.3), scenarios)


# ---------------------------------------------------------------------------
# output


def format_table(results: dict[str, MetricsReport]) -> str:
    """Averaged rows side by side: one line per model, columns 1 unit .. 5 unit and failed."""
    width = max([5, *map(len, results)])
    header = [f"{'Model':>{width}}"] + [f"{h:>8}" for h in [f"{k} unit" for k in THRESHOLDS] + ["failed"]]
    lines = [" | ".join(header)]
    lines.append("-" * len(lines[0]))
    for name, rep in results.items():
        cells = [f"{100 * x:7.1f}%" for x in (*rep.reach, rep.failed)]
        lines.append(" | ".join([f"{name:>{width}}", *cells]))
    return "\n".join(lines)


def write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_report(reports, path, fmt: str | None = None) -> Path:
    """Write reports as CSV or JSON (chosen by ``fmt`` or the file suffix)."""
    path = Path(path)
    fmt = fmt or ("json" if path.suffix.lower() == ".json" else "csv")
    rows = [r.to_row() for r in reports]
    if fmt == "json":
        text = json.dumps({"columns": list(REPORT_COLUMNS), "rows": rows}, indent=1)
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _csv_cell(v) for k, v in row.items()})
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    write_text_atomic(path, text)
    return path


def read_report(path) -> list[MetricsReport]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        rows = json.loads(path.read_text())["rows"]
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    return [MetricsReport.from_row(r) for r in rows]
