"""Experiment orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .ablation import ROWS, AblationConfig, row_config, row_method
from .data import SampleRecord
from .metrics import MetricsReport, format_mean_std, summarize
from .train import run_fold


def dataset_info(records: Sequence[SampleRecord]) -> tuple[int, int, str]:
    """(anatomy classes, pathology classes, target mode) of a dataset."""
    if not records:
        raise ValueError("empty dataset")
    meta = records[0].meta
    names = meta.get("class_names")
    if names:
        A, P = len(names["anatomy"]), len(names["pathology"])
    else:
        A = int(max(r.anatomy.max() for r in records))
        P = int(max(r.pathology.max() for r in records))
    return A, P, meta.get("mode", "semantic")


def split_records(records: Sequence[SampleRecord], split: str) -> list[SampleRecord]:
    """Samples tagged with ``split`` ("train"/"test"); untagged datasets count as one split."""
    if split == "all":
        return list(records)
    if not any("split" in r.meta for r in records):
        return list(records)
    return [r for r in records if r.meta.get("split") == split]


@dataclass
class CellResult:
    config: AblationConfig
    report: MetricsReport
    losses: list[float]


def _run_cell(args) -> CellResult:
    cfg, records, A, P, mode = args
    r = run_fold(cfg, records, A, P, mode)
    return CellResult(cfg, r.report, r.train.losses)


def run_configs(configs: Sequence[AblationConfig], records: Sequence[SampleRecord], jobs: int = 1) -> list[CellResult]:
    """Run each config's fold on ``records``; results keep the input order."""
    A, P, mode = dataset_info(records)
    tasks = [(cfg, list(records), A, P, mode) for cfg in configs]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


# ---------------------------------------------------------------------------
# the ablation table

CSV_HEADER = ("Method", "A. Cond", "A. Pred", "γ", "IoU")


def _gamma_text(cfg: AblationConfig) -> str:
    return "--" if cfg.gamma is None else f"{cfg.gamma:g}"


def ablation_rows(results: Sequence[CellResult]) -> list[tuple[str, ...]]:
    """One row per grid row: method, flags, gamma and mean ± std pathology IoU (percent)."""
    by_key: dict[str, list[CellResult]] = {}
    for r in results:
        by_key.setdefault(r.config.label, []).append(r)
    rows = []
    for key, *_ in ROWS:
        cells = by_key.get(key)
        if not cells:
            continue
        cfg = cells[0].config
        summary = summarize([c.report.miou * 100.0 for c in cells])
        rows.append((row_method(key), "✓" if cfg.conditioning else "--", "✓" if cfg.anatomy_prediction else "--",
                     _gamma_text(cfg), format_mean_std(summary.mean, summary.std)))
    return rows


def ablation_csv(results: Sequence[CellResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(ablation_rows(results))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# paired comparisons


@dataclass(frozen=True)
class PairedComparison:
    mean_gap: float  # percentage points, a - b
    wins: int
    losses: int
    ties: int
    p_value: float  # one-sided sign test, H1: a > b


def paired_comparison(a: Sequence[float], b: Sequence[float]) -> PairedComparison:
    """Sign test over paired runs (values as fractions; gap reported in points)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    diff = a - b
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    n = wins + losses
    p = float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue) if n else 1.0
    return PairedComparison(float(diff.mean() * 100.0), wins, losses, int(len(diff) - n), p)


def paired_runs(keys: Sequence[str], records: Sequence[SampleRecord], seeds: Sequence[int], folds: int = 5,
                jobs: int = 1, num_anatomy: int | None = None, **overrides) -> dict[str, list[float]]:
    """Pathology mIoU per (seed, fold) for each row key, in matching order."""
    A = num_anatomy if num_anatomy is not None else dataset_info(records)[0]
    cfgs = [row_config(k, A, seed=s, fold=f, folds=folds, **overrides) for k in keys for s in seeds
            for f in range(folds)]
    results = run_configs(cfgs, records, jobs)
    out: dict[str, list[float]] = {k: [] for k in keys}
    for r in results:
        out[r.config.label].append(r.report.miou)
    return out
