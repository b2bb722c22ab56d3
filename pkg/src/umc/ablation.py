"""Ablation runs over Stage-II sampling ratios, masking values and training paradigms.

Every variant of one knob shares a single Stage-I policy (the knobs only
change what happens after it), then trains its own Stage II and is swept.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .evaluate import DEFAULT_SETTINGS, MetricsReport, format_table, sweep_checkpoint, write_report, write_text_atomic
from .train import TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (1.0, 1.0, 1.0, 1.0)
RATIOS = (
    (1.0, 1.0, 1.0, 0.0),
    (1.0, 1.0, 0.0, 1.0),
    (1.0, 0.0, 1.0, 1.0),
    (0.0, 1.0, 1.0, 1.0),
    (1.0, 2.0, 2.0, 1.0),
    (1.0, 3.0, 3.0, 1.0),
    DEFAULT_RATIOS,
)
MASK_VALUES = (100.0, -100.0, 0.0)
PARADIGM_VARIANTS = ("curriculum_based", "stage_based")
KNOBS = ("ratio", "maskvalue", "paradigm")


@dataclass(frozen=True)
class Variant:
    label: str
    config: TrainConfig


def _ratio_label(r) -> str:
    text = ":".join(f"{x:g}" for x in r)
    return f"Default({text})" if tuple(r) == DEFAULT_RATIOS else text


def variants(knob: str, base: TrainConfig) -> list[Variant]:
    """Configurations for one knob; all other settings come from ``base``."""
    base = replace(base, paradigm="stage_based", stage2_ratios=DEFAULT_RATIOS, mask_value=0.0)
    if knob == "ratio":
        return [Variant(_ratio_label(r), replace(base, stage2_ratios=r)) for r in RATIOS]
    if knob == "maskvalue":
        return [Variant("Default(0)" if v == 0 else f"{v:g}", replace(base, mask_value=v)) for v in MASK_VALUES]
    if knob == "paradigm":
        names = {"curriculum_based": "Curriculum-Based", "stage_based": "Stage-Based"}
        return [Variant(names[p], replace(base, paradigm=p)) for p in PARADIGM_VARIANTS]
    raise ValueError(f"unknown ablation knob {knob!r}; expected one of {KNOBS}")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_")


def run_ablation(knob: str, base: TrainConfig, out_dir, settings=DEFAULT_SETTINGS[:1],
                 eval_envs: int = 256) -> dict[str, MetricsReport]:
    """Train and sweep every variant of ``knob``; returns the overall averaged row per variant.

    Writes ``stage1.npz``, one subdirectory per variant (checkpoints, curve and
    sweep report), ``ablation_<knob>.csv`` with the averaged rows and
    ``ablation_<knob>.txt`` with the table.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    todo = variants(knob, base)
    stage1 = None
    if base.stage1_iters > 0:
        shared = replace(base, stage2_iters=0)
        stage1 = train(shared, out_dir, prefix="", final_name="stage1_final.npz").checkpoints["stage1"]

    table: dict[str, MetricsReport] = {}
    rows: list[MetricsReport] = []
    for v in todo:
        vdir = out_dir / _slug(v.label)
        logger.info("ablation %s: variant %s", knob, v.label)
        result = train(v.config, vdir, resume_from=stage1)
        sweep = sweep_checkpoint(result.final, settings, eval_envs, model=v.label)
        write_report(sweep.rows(), vdir / "sweep.csv")
        table[v.label] = sweep.overall
        rows.append(sweep.overall)
    write_report(rows, out_dir / f"ablation_{knob}.csv")
    write_text_atomic(out_dir / f"ablation_{knob}.txt", format_table(table) + "\n")
    return table
