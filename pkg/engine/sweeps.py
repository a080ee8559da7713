"""
SEAL Sweep Engine
Runs a detection pipeline across a grid of fine-tuning steps, watermark
rates or corruptions, with several seeds per grid point.

The pipeline itself is injected as ``run_point(value, seed) -> dict`` so the
engine stays free of training code; ``pipeline/experiments.py`` supplies it.
A point returns::

    {"columns": {name: {"pos_scores": ..., "neg_scores": ...}},
     "generated": optional (N, C, H, W) tensor}

Failing points are logged and kept as ``error`` entries.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy.stats import spearmanr

from config.parameters import DETECTION_THRESHOLD
from engine.corruptions import corrupt_batch, validate_params
from engine.metrics import DetectionReport, build_feature_extractor, compute_fid, compute_tpr_fpr
from engine.seeds import derive_seed

logger = logging.getLogger(__name__)

RunPoint = Callable[[float, int], dict]


@dataclass
class SweepPoint:
    value: float
    seed: int
    reports: dict[str, DetectionReport] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    axis: str
    values: tuple[float, ...]
    seeds: tuple[int, ...]
    points: list[SweepPoint]
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError(f"{self.axis} values must be strictly increasing, got {self.values}")

    def to_frame(self) -> pd.DataFrame:
        """One row per (value, seed, column); failed points keep their error."""
        rows = []
        for p in self.points:
            if not p.ok:
                rows.append({self.axis: p.value, "seed": p.seed, "column": None, "error": p.error})
                continue
            for column, report in p.reports.items():
                rows.append({self.axis: p.value, "seed": p.seed, "column": column,
                             **report.to_dict(), **p.extra, "error": None})
        return pd.DataFrame(rows)

    def mean_tpr(self, column: str) -> dict[float, float]:
        out = {}
        for v in self.values:
            tprs = [p.reports[column].tpr for p in self.points if p.ok and p.value == v and column in p.reports]
            out[v] = float(np.mean(tprs)) if tprs else float("nan")
        return out


def _evaluate(run_point: RunPoint, value: float, seed: int, threshold: float) -> SweepPoint:
    try:
        out = run_point(value, seed)
        reports = {
            name: compute_tpr_fpr(col["pos_scores"], col["neg_scores"], threshold)
            for name, col in out["columns"].items()
        }
        point = SweepPoint(value, seed, reports)
        if out.get("generated") is not None:
            point.extra["_generated"] = out["generated"]
        return point
    except Exception as exc:
        logger.warning("Sweep point %s (seed %d) failed: %s: %s", value, seed, type(exc).__name__, exc)
        return SweepPoint(value, seed, error=f"{type(exc).__name__}: {exc}")


def run_grid(
    run_point: RunPoint,
    values: Sequence[float],
    seeds: Sequence[int],
    jobs: int = 1,
    threshold: float = DETECTION_THRESHOLD,
) -> list[SweepPoint]:
    """
    Evaluate ``run_point`` at every (value, seed).

    With ``jobs > 1`` points run in worker processes; ``run_point`` must then
    be picklable (a module-level function or functools.partial of one).
    Results are returned in (value, seed) order regardless of completion order.
    """
    grid = [(v, s) for v in values for s in seeds]
    if jobs <= 1 or len(grid) <= 1:
        return [_evaluate(run_point, v, s, threshold) for v, s in grid]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(_evaluate, run_point, v, s, threshold) for v, s in grid]
        return [f.result() for f in futures]


def step_sweep(
    run_point: RunPoint,
    step_grid: Sequence[int],
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
    extractor: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    threshold: float = DETECTION_THRESHOLD,
) -> SweepResult:
    """
    Detection rate after ``k`` fine-tuning steps for each k in ``step_grid``.

    When points return their generations, each step's set is also compared by
    FID with the final grid point's set from the same seed.
    """
    grid = [int(k) for k in step_grid]
    if not grid or any(k < 1 for k in grid):
        raise ValueError(f"Step grid must be non-empty positive integers, got {list(step_grid)}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"Step grid must be strictly increasing, got {grid}")

    points = run_grid(run_point, grid, seeds, jobs, threshold)
    final = {p.seed: p.extra.get("_generated") for p in points if p.ok and p.value == grid[-1]}
    for p in points:
        generated = p.extra.pop("_generated", None)
        reference = final.get(p.seed)
        if generated is None or reference is None or generated.shape[0] < 2 or reference.shape[0] < 2:
            continue
        if extractor is None:
            extractor = build_feature_extractor(int(generated.shape[1]))
        p.extra["fid_to_final"] = compute_fid(generated, reference, extractor).value

    failed = sum(not p.ok for p in points)
    logger.info("Step sweep over %s x %d seeds done (%d failed)", grid, len(seeds), failed)
    return SweepResult("steps", tuple(grid), tuple(seeds), points, {"failed": failed})


def _rank_trend(xs: Sequence[float], ys: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    """Spearman (rho, p); rho is 0.0 for a constant response, p needs three points."""
    if len(set(xs)) < 2:
        return None, None
    if len(set(ys)) < 2:
        return 0.0, None
    rho, pval = spearmanr(xs, ys)
    return float(rho), (float(pval) if len(xs) > 2 else None)


def rate_sweep(
    run_point: RunPoint,
    rates: Sequence[float],
    seeds: Sequence[int] = (0,),
    jobs: int = 1,
    threshold: float = DETECTION_THRESHOLD,
    column: Optional[str] = None,
) -> SweepResult:
    """
    Detection rate when only a fraction of the dataset is watermarked.

    Rates are sorted ascending. For ``column`` (default: the first column
    reported) the summary holds:

        spearman_rho / spearman_p    rate vs the seed-mean TPR, one value per rate
        pooled_spearman_rho / _p     rate vs TPR over every successful (rate, seed) point
        endpoints_hold               per seed, TPR at the top rate >= TPR at the bottom rate
    """
    canonical = tuple(sorted(float(r) for r in rates))
    if not canonical:
        raise ValueError("Rate grid is empty")
    if any(not 0.0 < r <= 1.0 for r in canonical):
        raise ValueError(f"Watermark rates must lie in (0, 1], got {list(rates)}")
    if len(set(canonical)) != len(canonical):
        raise ValueError(f"Duplicate watermark rates in {list(rates)}")

    points = run_grid(run_point, canonical, seeds, jobs, threshold)
    for p in points:
        p.extra.pop("_generated", None)
    result = SweepResult("rate", canonical, tuple(seeds), points)
    summary = {"failed": sum(not p.ok for p in points), "spearman_rho": None, "spearman_p": None,
               "pooled_spearman_rho": None, "pooled_spearman_p": None, "endpoints_hold": None}
    ok = [p for p in points if p.ok]
    if ok:
        column = column or next(iter(ok[0].reports))
        summary["column"] = column
        means = {r: t for r, t in result.mean_tpr(column).items() if not np.isnan(t)}
        summary["mean_tpr"] = means
        summary["spearman_rho"], summary["spearman_p"] = _rank_trend(list(means), list(means.values()))
        scored = [p for p in ok if column in p.reports]
        summary["pooled_spearman_rho"], summary["pooled_spearman_p"] = _rank_trend(
            [p.value for p in scored], [p.reports[column].tpr for p in scored])
        tpr = {(p.value, p.seed): p.reports[column].tpr for p in scored}
        lo, hi = canonical[0], canonical[-1]
        pairs = [(tpr[(lo, s)], tpr[(hi, s)]) for s in seeds if (lo, s) in tpr and (hi, s) in tpr]
        if pairs and lo != hi:
            summary["endpoints_hold"] = all(top >= bottom for bottom, top in pairs)
    result.summary = summary
    logger.info("Rate sweep over %s done: Spearman rho on seed means %s (pooled %s)",
                list(canonical), summary["spearman_rho"], summary["pooled_spearman_rho"])
    return result


def robustness_table(
    scorers: Mapping[str, Mapping[str, Callable[[torch.Tensor], torch.Tensor]]],
    eval_sets: Mapping[str, tuple[torch.Tensor, torch.Tensor]],
    corruptions: Mapping[str, dict],
    seed: int = 0,
    threshold: float = DETECTION_THRESHOLD,
) -> pd.DataFrame:
    """
    Accuracy of each detector column on corrupted evaluation sets.

    Args:
        scorers: column (e.g. "expert_aug", "expert_plain", "moe_aug") ->
            method -> score callable
        eval_sets: method -> (watermark-tuned generations, clean-tuned generations)
        corruptions: corruption kind -> fixed params; a "clean" row is always added

    Returns:
        DataFrame with one row per (method, corruption) and one accuracy
        column per detector column.
    """
    for kind, params in corruptions.items():
        validate_params(kind, params)
    rows = []
    for method, (pos, neg) in eval_sets.items():
        variants = {"clean": (pos, neg)}
        for kind, params in corruptions.items():
            s = derive_seed(seed, "corrupt", method, kind)
            variants[kind] = (corrupt_batch(pos, kind, params, s), corrupt_batch(neg, kind, params, s + 1_000_003))
        for name, (p_img, n_img) in variants.items():
            row = {"method": method, "corruption": name}
            for column, by_method in scorers.items():
                if method not in by_method:
                    continue
                score = by_method[method]
                row[column] = compute_tpr_fpr(score(p_img), score(n_img), threshold).accuracy
            rows.append(row)
    return pd.DataFrame(rows)
