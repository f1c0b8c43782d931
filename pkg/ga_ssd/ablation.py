"""Ablation grids: input method, FPN vs GA-FPN over level subsets, method comparison."""

import csv
import dataclasses
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from rich.table import Table

from .config import LEVELS, TrainConfig
from .errors import ConfigurationError
from .evaluation import CATEGORY_BUCKETS
from .phantom import Dataset, load_dataset
from .trainer import evaluate, split_hash, split_scans, train


logger = logging.getLogger(__name__)

MODES = ("input", "fpn", "compare")
LEVEL_SUBSETS = (("P4",), ("P3", "P4"), ("P2", "P3", "P4"), ("P1", "P2", "P3", "P4"))
CSV_HEADER = ["variant", "levels_or_mode", "cpm", "fp_tp_ratio"]


@dataclass
class Cell:
    variant: str
    levels_or_mode: str
    config: TrainConfig


@dataclass
class AblationRow:
    variant: str
    levels_or_mode: str
    cpm: float
    fp_tp_ratio: float
    split_hash: str = ""
    per_category: Dict[str, float] = field(default_factory=dict)


def levels_label(levels) -> str:
    """Top level first, the way the level-subset table reads: P4,P3,P2."""
    return ",".join(sorted(levels, key=LEVELS.index, reverse=True))


def _with_network(base: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(base, network=dataclasses.replace(base.network, **changes))


def ablation_grid(mode: str, base: TrainConfig) -> List[Cell]:
    if mode == "input":
        return [
            Cell("GA" if ga else "no GA", input_mode,
                 _with_network(base, input_mode=input_mode, ga_at_load=ga))
            for input_mode in ("multi_channel_2_5d", "volume_3d")
            for ga in (False, True)
        ]
    if mode == "fpn":
        return [
            Cell("GA-FPN" if ga else "FPN", levels_label(levels),
                 _with_network(base, active_levels=list(levels), use_fpn=True, ga_at_fpn=ga))
            for levels in LEVEL_SUBSETS
            for ga in (False, True)
        ]
    if mode == "compare":
        label = levels_label(base.network.active_levels)
        return [
            Cell("SSD", label, _with_network(base, use_fpn=False, ga_at_load=False, ga_at_fpn=False)),
            Cell("FPN", label, _with_network(base, use_fpn=True, ga_at_load=False, ga_at_fpn=False)),
            Cell("GA-SSD", label, _with_network(base, use_fpn=True, ga_at_load=True, ga_at_fpn=True)),
        ]
    raise ConfigurationError(f"unknown ablation mode {mode!r}; expected one of {', '.join(MODES)}")


def _slug(cell: Cell) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", f"{cell.variant}_{cell.levels_or_mode}").strip("_").lower()


def run_ablation(
    mode: str,
    base: TrainConfig,
    dataset: Optional[Dataset] = None,
    out_path: Optional[str] = None,
    max_workers: int = 1,
    show_progress: bool = False,
) -> List[AblationRow]:
    """Train and evaluate every cell on the same split; write the grid as CSV."""
    cells = ablation_grid(mode, base)
    if dataset is None:
        dataset = load_dataset(base.data_dir)
    rows: List[AblationRow] = []
    for cell in cells:
        directory = os.path.join(base.checkpoint_dir, mode, _slug(cell))
        cfg = dataclasses.replace(cell.config, checkpoint_dir=directory, run_log=os.path.join(directory, "run_log.jsonl"))
        train_ids, test_ids = split_scans(dataset.scan_ids, cfg.train_fraction, cfg.seed)
        digest = split_hash(train_ids, test_ids)
        logger.info("cell %s / %s: split %s", cell.variant, cell.levels_or_mode, digest)
        result = train(cfg, dataset=dataset, max_workers=max_workers, show_progress=show_progress)
        report, _ = evaluate(result.model, dataset.subset(test_ids), out_dir=os.path.join(directory, "eval"),
                             max_workers=max_workers)
        rows.append(AblationRow(cell.variant, cell.levels_or_mode, report.cpm, report.fp_tp_ratio,
                                digest, report.per_category))
    if out_path:
        write_ablation_csv(out_path, rows, with_categories=(mode == "compare"))
    return rows


def _format(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def write_ablation_csv(path: str, rows: List[AblationRow], with_categories: bool = False) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    header = CSV_HEADER + (list(CATEGORY_BUCKETS) if with_categories else [])
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in rows:
            line = [r.variant, r.levels_or_mode, _format(r.cpm), _format(r.fp_tp_ratio)]
            if with_categories:
                line += [_format(r.per_category[b]) if b in r.per_category else "" for b in CATEGORY_BUCKETS]
            writer.writerow(line)


def ablation_table(mode: str, rows: List[AblationRow]) -> Table:
    table = Table(title=f"Ablation ({mode})")
    table.add_column("Variant")
    table.add_column("Levels / mode")
    table.add_column("CPM", justify="right")
    table.add_column("FP/TP", justify="right")
    table.add_column("Split")
    for r in rows:
        table.add_row(r.variant, r.levels_or_mode, _format(r.cpm), _format(r.fp_tp_ratio), r.split_hash)
    return table
