"""Ablation grids over the distillation switches, with tabular summaries."""
from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass

from ..eval.metrics import MetricReport
from .config import TrainConfig
from .trainer import load_datasets, run_training

# grid axis -> TrainConfig field
AXES = {
    "prob": "enable_prob_kd",
    "rela": "enable_rela_kd",
    "detach": "detach_teacher",
    "distance": "relation_distance",
    "direction": "relation_direction",
}


@dataclass
class AblationRow:
    settings: dict
    report: MetricReport | None
    final_loss: float | None


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of the axis values, in axis insertion order."""
    if not grid:
        return []
    for axis in grid:
        if axis not in AXES:
            raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def cell_config(base: TrainConfig, settings: dict) -> TrainConfig:
    return dataclasses.replace(base, **{AXES[k]: v for k, v in settings.items()})


def ablation_suite(config: TrainConfig, grid: dict, out_dir=None, datasets=None) -> list[AblationRow]:
    """Train and evaluate one model per grid cell; every cell shares ``config.seed``."""
    cells = expand_grid(grid)
    if not cells:
        return []
    datasets = datasets if datasets is not None else load_datasets(config)
    rows = []
    for k, settings in enumerate(cells):
        cfg = cell_config(config, settings)
        sub = None if out_dir is None else f"{out_dir}/cell_{k:02d}"
        result = run_training(cfg, out_dir=sub, datasets=datasets)
        rows.append(AblationRow(settings, result.final, result.reports[-1].total if result.reports else None))
    return rows


def _mark(v):
    if isinstance(v, bool):
        return "✓" if v else ""
    return str(v)


def format_ablation(rows: list[AblationRow]) -> str:
    """One line per cell: the switch settings, mAP and top-1, plus Recall / AP when ``detach`` varies."""
    if not rows:
        return ""
    axes = list(rows[0].settings)
    with_det = "detach" in axes
    head = "".join(f"{a:>10}" for a in axes) + f"{'mAP':>10}{'top-1':>10}"
    if with_det:
        head += f"{'Recall':>10}{'AP':>10}"
    lines = [head]
    for row in rows:
        line = "".join(f"{_mark(row.settings[a]):>10}" for a in axes)
        r = row.report
        vals = [None, None] if r is None else [r.map, r.top_k.get(1)]
        if with_det:
            vals += [None, None] if r is None else [r.recall, r.ap]
        line += "".join(f"{'-':>10}" if v is None else f"{100 * v:>10.2f}" for v in vals)
        lines.append(line)
    return "\n".join(lines)
