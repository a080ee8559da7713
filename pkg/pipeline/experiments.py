"""
SEAL experiments
Multi-seed evaluation runs built on the protect / offender / detector stages.

Each seed (and, for the detection table, each budget) gets its own
*context*: a full stage run under ``<output_root>/experiments/contexts`` that
shares the top-level dataset and base model. Contexts are reused across
experiments when their config is unchanged. Sweeps then fine-tune, generate
and score on top of a context.

    steps       TPR after k fine-tuning steps, optimised vs random watermarks, plus FID
    rate        TPR when only a fraction of the dataset is watermarked
    robustness  accuracy under fixed corruptions, augmented vs plain detectors
    transfer    expert x method accuracy matrix
    quality     FID of released images and of clean vs watermark-tuned generations
    ablation    experts trained with vs without generated images
    detection   TPR/FPR/AUC of experts and the mixture, one block per budget
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Iterable, Optional

import numpy as np
import pandas as pd
import torch

from engine.detector import ExpertDetector, MoEDetector, detect, load_moe, train_expert
from engine.finetune import finetune
from engine.metrics import compute_fid, compute_tpr_fpr, load_or_build_extractor, roc_auc, roc_sweep, transfer_matrix
from engine.seeds import derive_seed
from engine.sweeps import rate_sweep, robustness_table, step_sweep
from engine.watermark import apply_watermarks
from output import charts
from pipeline.base_model import load_or_train_base
from pipeline.common import (
    ProgressCallback,
    base_dir,
    dataset_dir,
    detectors_dir,
    hyper_from_config,
    method_from_config,
    policy_from_config,
    select_subset,
    stage_dir,
    with_overrides,
    write_json,
    write_run_manifest,
)
from pipeline.datasets import ImageDataset, as_8bit, load_dataset, load_or_create_dataset
from pipeline.detectors import build_moe, load_training_generations, run_train_detectors, train_detector_set, watermarked_originals
from pipeline.offender import generate_sets, generation_prompts, load_generated, run_simulate_offender, tune_pair
from pipeline.protect import load_protected_watermarks, load_released, run_protect

logger = logging.getLogger(__name__)

EXPERIMENTS = ("steps", "rate", "robustness", "transfer", "quality", "ablation", "detection")


# ── Contexts ───────────────────────────────────────────────────────


def experiments_dir(cfg: dict, *parts: str) -> str:
    return stage_dir(cfg, "experiments", *parts)


def context_config(cfg: dict, seed: int, random_control: bool = False, eta: Optional[float] = None) -> dict:
    """Stage config of one (seed, budget, watermark kind) context; every image is watermarked."""
    eta = cfg["watermark"]["eta"] if eta is None else eta
    name = f"seed{seed}_eta{eta * 255:g}" + ("_random" if random_control else "")
    return with_overrides(
        cfg,
        seed=int(seed),
        output_root=experiments_dir(cfg, "contexts", name),
        dataset__path=dataset_dir(cfg),
        base_model__path=base_dir(cfg),
        watermark__eta=float(eta),
        watermark__rate=1.0,
        watermark__random_control=random_control,
    )


def prepare_context(ctx_cfg: dict) -> str:
    """Run (or reuse) protect, simulate-offender and train-detectors for a context."""
    run_protect(ctx_cfg, reuse=True)
    run_simulate_offender(ctx_cfg, reuse=True)
    run_train_detectors(ctx_cfg, reuse=True)
    return ctx_cfg["output_root"]


@dataclass(frozen=True)
class Context:
    cfg: dict
    clean: ImageDataset
    released: ImageDataset
    protected_ids: tuple[str, ...]
    moe: MoEDetector

    def expert(self, method: str) -> ExpertDetector:
        for e in self.moe.experts:
            if e.method_kind == method:
                return e
        raise KeyError(f"Context {self.cfg['output_root']} has no expert for {method}")

    @property
    def wm_originals(self) -> torch.Tensor:
        return watermarked_originals(self.released, self.protected_ids)

    def eval_sets(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        """method -> (watermark-tuned eval generations, clean-tuned eval generations)"""
        return {m: (load_generated(self.cfg, m, "wm", "eval"), load_generated(self.cfg, m, "clean", "eval"))
                for m in self.cfg["finetune"]["methods"]}


def load_context(ctx_cfg: dict) -> Context:
    released, protected_ids = load_released(ctx_cfg)
    return Context(ctx_cfg, load_dataset(dataset_dir(ctx_cfg)), released, tuple(protected_ids),
                   load_moe(detectors_dir(ctx_cfg)))


def _map(fn: Callable, items: Iterable, jobs: int) -> list:
    """``fn`` over ``items`` in order; worker processes when jobs > 1 (``fn`` must pickle)."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _scores(score: Callable, images: torch.Tensor) -> torch.Tensor:
    return score(images) if images.shape[0] else torch.zeros(0)


def _moe_score(moe: MoEDetector) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda images: detect(moe, images)


# ── Sweep points (module level so worker processes can pickle them) ─


def steps_point(k: float, seed: int, cfg: dict, method: str, random_control: bool = False) -> dict:
    """
    Fine-tune on the context's clean and released data for ``k`` steps each and
    score the eval generations; negatives come from the matched clean k-step model.
    """
    ctx = load_context(context_config(cfg, seed, random_control))
    pair = tune_pair(load_or_train_base(ctx.cfg), ctx.clean, ctx.released,
                     method_from_config(ctx.cfg, method, max_steps=int(k)), seed)
    prompts = generation_prompts(ctx.clean, ctx.cfg)
    generated = generate_sets(pair["wm"], prompts, ctx.cfg, seed, splits=("eval",))["eval"].images
    negatives = generate_sets(pair["clean"], prompts, ctx.cfg, seed, splits=("eval",))["eval"].images
    expert, moe = ctx.expert(method).score, _moe_score(ctx.moe)
    return {
        "columns": {
            "expert": {"pos_scores": _scores(expert, generated), "neg_scores": _scores(expert, negatives)},
            "moe": {"pos_scores": _scores(moe, generated), "neg_scores": _scores(moe, negatives)},
        },
        "generated": generated,
    }


def rate_point(rate: float, seed: int, cfg: dict, method: str) -> dict:
    """
    Watermark a ``rate`` subset with the context's watermarks, fine-tune on it,
    retrain the method's expert and score both the expert and the mixture
    with that expert swapped in.
    """
    ctx = load_context(context_config(cfg, seed))
    full = load_protected_watermarks(ctx.cfg)
    ids = select_subset(ctx.clean.image_ids, rate, derive_seed(seed, "rate", rate))
    released = ctx.clean.replace_images(as_8bit(apply_watermarks(
        ctx.clean.images, ctx.clean.image_ids, full.subset(ids), allow_partial=True)))

    tuned = finetune(load_or_train_base(ctx.cfg), released.images, released.prompts,
                     method_from_config(ctx.cfg, method), derive_seed(seed, "finetune", method),
                     watermarked=True, dataset_checksum=released.checksum)
    gen = generate_sets(tuned, generation_prompts(ctx.clean, ctx.cfg), ctx.cfg, seed)
    expert = train_expert(ctx.clean.images, watermarked_originals(released, ids),
                          load_generated(ctx.cfg, method, "clean", "train"), gen["train"].images,
                          policy_from_config(ctx.cfg), hyper_from_config(ctx.cfg),
                          derive_seed(seed, "expert", method, rate), method)
    experts = tuple(expert if e.method_kind == method else e for e in ctx.moe.experts)
    moe = MoEDetector(experts, ctx.moe.gating, ctx.moe.threshold)

    positives, negatives = gen["eval"].images, load_generated(ctx.cfg, method, "clean", "eval")
    return {"columns": {
        "expert": {"pos_scores": _scores(expert.score, positives), "neg_scores": _scores(expert.score, negatives)},
        "moe": {"pos_scores": _scores(_moe_score(moe), positives), "neg_scores": _scores(_moe_score(moe), negatives)},
    }}


# ── Per-seed evaluations ───────────────────────────────────────────


def robustness_for_seed(seed: int, cfg: dict) -> pd.DataFrame:
    ctx = load_context(context_config(cfg, seed))
    methods = list(ctx.moe.methods)
    generated = load_training_generations(ctx.cfg, methods)
    plain_experts, plain_gating = train_detector_set(ctx.cfg, ctx.clean.images, ctx.wm_originals, generated,
                                                     seed, augment=False)
    plain = build_moe(plain_experts, plain_gating, ctx.cfg)
    scorers = {
        "expert_aug": {m: ctx.expert(m).score for m in methods},
        "expert_plain": {e.method_kind: e.score for e in plain_experts},
        "moe_aug": {m: _moe_score(ctx.moe) for m in methods},
        "moe_plain": {m: _moe_score(plain) for m in methods},
    }
    table = robustness_table(scorers, ctx.eval_sets(), cfg["experiments"]["corruptions"],
                             derive_seed(seed, "robustness"), cfg["detector"]["threshold"])
    return table.assign(seed=seed)


def transfer_for_seed(seed: int, cfg: dict) -> dict:
    ctx = load_context(context_config(cfg, seed))
    out = transfer_matrix({e.method_kind: e.score for e in ctx.moe.experts}, ctx.eval_sets(),
                          cfg["detector"]["threshold"])
    rows = [{"seed": seed, "generated_by": row, "expert": col, **report.to_dict()}
            for (row, col), report in out["reports"].items()]
    return {"methods": out["methods"], "matrix": out["matrix"], "rows": rows}


def _fid_row(seed: int, comparison: str, method: Optional[str], a: torch.Tensor, b: torch.Tensor, extractor) -> dict:
    row = {"seed": seed, "comparison": comparison, "method": method, "n_a": int(a.shape[0]), "n_b": int(b.shape[0])}
    try:
        row["fid"] = compute_fid(a, b, extractor).value
        row["error"] = None
    except ValueError as exc:
        row["fid"], row["error"] = float("nan"), str(exc)
    return row


def quality_for_seed(seed: int, cfg: dict, extractor_dir: str) -> list[dict]:
    ctx = load_context(context_config(cfg, seed))
    control = load_context(context_config(cfg, seed, random_control=True))
    extractor = load_or_build_extractor(extractor_dir, ctx.clean.image_shape[0])
    rows = [
        _fid_row(seed, "released_optimized_vs_clean", None, ctx.released.images, ctx.clean.images, extractor),
        _fid_row(seed, "released_random_vs_clean", None, control.released.images, ctx.clean.images, extractor),
    ]
    for m in ctx.moe.methods:
        for name, c in (("generated_optimized", ctx), ("generated_random", control)):
            wm = torch.cat([load_generated(c.cfg, m, "wm", s) for s in ("train", "eval")])
            clean = torch.cat([load_generated(c.cfg, m, "clean", s) for s in ("train", "eval")])
            rows.append(_fid_row(seed, f"{name}_wm_vs_clean", m, wm, clean, extractor))
    return rows


def ablation_for_seed(seed: int, cfg: dict) -> list[dict]:
    ctx = load_context(context_config(cfg, seed))
    methods = list(ctx.moe.methods)
    originals_only, _ = train_detector_set(ctx.cfg, ctx.clean.images, ctx.wm_originals,
                                           load_training_generations(ctx.cfg, methods), seed, use_generated=False)
    variants = {"with_generated": {m: ctx.expert(m) for m in methods},
                "originals_only": {e.method_kind: e for e in originals_only}}
    rows = []
    for m, (pos, neg) in ctx.eval_sets().items():
        for training, experts in variants.items():
            report = compute_tpr_fpr(_scores(experts[m].score, pos), _scores(experts[m].score, neg),
                                     cfg["detector"]["threshold"])
            rows.append({"seed": seed, "method": m, "training": training, **report.to_dict()})
    return rows


def detection_for_seed(seed: int, cfg: dict) -> list[dict]:
    threshold = cfg["detector"]["threshold"]
    grid = np.linspace(0.0, 1.0, cfg["experiments"]["roc_points"])
    rows = []
    for eta in cfg["experiments"]["budgets"]:
        ctx = load_context(context_config(cfg, seed, eta=eta))
        for m, (pos, neg) in ctx.eval_sets().items():
            for detector, score in (("expert", ctx.expert(m).score), ("moe", _moe_score(ctx.moe))):
                p, n = _scores(score, pos), _scores(score, neg)
                report = compute_tpr_fpr(p, n, threshold)
                auc = roc_auc(roc_sweep(p, n, grid)) if len(p) and len(n) else float("nan")
                rows.append({"eta": eta, "eta_255": round(eta * 255, 3), "seed": seed, "method": m,
                             "detector": detector, **report.to_dict(), "auc": auc})
    return rows


# ── Orchestration ──────────────────────────────────────────────────


def _contexts_for(cfg: dict, which: str) -> list[dict]:
    seeds = cfg["experiments"]["seeds"]
    if which == "detection":
        return [context_config(cfg, s, eta=b) for s in seeds for b in cfg["experiments"]["budgets"]]
    out = [context_config(cfg, s) for s in seeds]
    if which in ("steps", "quality"):
        out += [context_config(cfg, s, random_control=True) for s in seeds]
    return out


def step_grid(cfg: dict, method: str) -> list[int]:
    """Step counts as fractions of the method's full step budget, deduplicated and ascending."""
    full = method_from_config(cfg, method).max_steps
    return sorted({max(1, int(round(f * full))) for f in cfg["experiments"]["step_fractions"]})


def _run_steps(cfg: dict, extractor_dir: str, progress) -> tuple[pd.DataFrame, dict, dict]:
    seeds, jobs, threshold = cfg["experiments"]["seeds"], cfg["jobs"], cfg["detector"]["threshold"]
    extractor = load_or_build_extractor(extractor_dir, cfg["dataset"]["image_shape"][0])
    frames, summary, point_seeds = [], {}, {}
    for m in cfg["finetune"]["methods"]:
        grid = step_grid(cfg, m)
        for watermark in ("optimized", "random"):
            progress(3, f"Step sweep {m} ({watermark}) over {grid}...")
            result = step_sweep(partial(steps_point, cfg=cfg, method=m, random_control=watermark == "random"),
                                grid, seeds, jobs, extractor, threshold)
            frames.append(result.to_frame().assign(method=m, watermark=watermark))
            summary[f"{m}/{watermark}"] = {"mean_tpr_expert": result.mean_tpr("expert"),
                                           "mean_tpr_moe": result.mean_tpr("moe"), **result.summary}
            point_seeds[f"{m}/{watermark}"] = [
                {"steps": k, "seed": s, "finetune": derive_seed(s, "finetune", m)} for k in grid for s in seeds]
    frame = pd.concat(frames, ignore_index=True)
    return frame, summary, point_seeds


def _run_rate(cfg: dict, progress) -> tuple[pd.DataFrame, dict, dict]:
    seeds, rates = cfg["experiments"]["seeds"], cfg["experiments"]["rates"]
    frames, summary, point_seeds = [], {}, {}
    for m in cfg["finetune"]["methods"]:
        progress(3, f"Rate sweep {m} over {sorted(rates)}...")
        result = rate_sweep(partial(rate_point, cfg=cfg, method=m), rates, seeds, cfg["jobs"],
                            cfg["detector"]["threshold"], column="expert")
        frames.append(result.to_frame().assign(method=m))
        summary[m] = {"mean_tpr_expert": result.mean_tpr("expert"), "mean_tpr_moe": result.mean_tpr("moe"),
                      **result.summary}
        point_seeds[m] = [{"rate": r, "seed": s, "subset": derive_seed(s, "rate", r),
                           "expert": derive_seed(s, "expert", m, r)} for r in result.values for s in seeds]
    return pd.concat(frames, ignore_index=True), summary, point_seeds


def _summarise_transfer(per_seed: list[dict]) -> tuple[pd.DataFrame, dict]:
    methods = per_seed[0]["methods"]
    mean = np.mean([p["matrix"] for p in per_seed], axis=0)
    matrix = pd.DataFrame(mean, index=methods, columns=methods)
    matrix.index.name = "generated_by"
    diag = float(np.mean(np.diag(mean)))
    off = float(mean[~np.eye(len(methods), dtype=bool)].mean()) if len(methods) > 1 else None
    return matrix, {"methods": methods, "diagonal_mean": diag, "off_diagonal_mean": off,
                    "gap": None if off is None else diag - off}


def run_experiment(cfg: dict, which: str, progress_callback: ProgressCallback = None) -> dict:
    """
    Run one experiment end to end and write CSV, summary JSON, chart PNG and
    run manifest under ``<output_root>/experiments/<which>``.

    Raises:
        ValueError: unknown experiment or empty method list
    """

    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        print(message)

    if which not in EXPERIMENTS:
        raise ValueError(f"Unknown experiment {which!r}; choose from {EXPERIMENTS}")
    if not cfg["finetune"]["methods"]:
        raise ValueError("finetune.methods is empty: there is nothing to evaluate")

    t0 = time.time()
    out_dir = experiments_dir(cfg, which)
    seeds, jobs = cfg["experiments"]["seeds"], cfg["jobs"]
    extractor_dir = experiments_dir(cfg, "fid_extractor")

    progress(1, "Preparing shared dataset and base model...")
    load_or_create_dataset(cfg)
    load_or_train_base(cfg)
    if which in ("steps", "quality"):
        load_or_build_extractor(extractor_dir, cfg["dataset"]["image_shape"][0])

    contexts = _contexts_for(cfg, which)
    progress(2, f"Preparing {len(contexts)} context(s) with {jobs} job(s)...")
    _map(prepare_context, contexts, jobs)

    tables: dict[str, pd.DataFrame] = {}
    figures = {}
    point_seeds: dict = {s: {"context": os.path.basename(context_config(cfg, s)["output_root"]),
                             "experts": {m: derive_seed(s, "expert", m) for m in cfg["finetune"]["methods"]},
                             "corrupt": derive_seed(s, "robustness")} for s in seeds}
    if which == "steps":
        frame, summary, point_seeds = _run_steps(cfg, extractor_dir, progress)
        tables["steps"] = frame
        figures["steps_expert"] = charts.create_step_sweep_chart(frame, "expert")
        figures["steps_moe"] = charts.create_step_sweep_chart(frame, "moe")
    elif which == "rate":
        frame, summary, point_seeds = _run_rate(cfg, progress)
        tables["rate"] = frame
        figures["rate"] = charts.create_rate_sweep_chart(frame)
    elif which == "robustness":
        progress(3, f"Scoring {len(cfg['experiments']['corruptions'])} corruption(s) over {len(seeds)} seed(s)...")
        frame = pd.concat(_map(partial(robustness_for_seed, cfg=cfg), seeds, jobs), ignore_index=True)
        tables["robustness"] = frame
        columns = [c for c in ("expert_aug", "expert_plain", "moe_aug", "moe_plain") if c in frame.columns]
        summary = {"mean_accuracy": frame.groupby("corruption")[columns].mean().to_dict(orient="index")}
        figures["robustness"] = charts.create_robustness_chart(frame)
    elif which == "transfer":
        progress(3, f"Building transfer matrices over {len(seeds)} seed(s)...")
        per_seed = _map(partial(transfer_for_seed, cfg=cfg), seeds, jobs)
        matrix, summary = _summarise_transfer(per_seed)
        tables["transfer_matrix"] = matrix.reset_index()
        tables["transfer_points"] = pd.DataFrame([r for p in per_seed for r in p["rows"]])
        figures["transfer"] = charts.create_transfer_heatmap(matrix)
    elif which == "quality":
        progress(3, f"Computing FID over {len(seeds)} seed(s)...")
        rows = _map(partial(quality_for_seed, cfg=cfg, extractor_dir=extractor_dir), seeds, jobs)
        frame = pd.DataFrame([r for per in rows for r in per])
        tables["quality"] = frame
        summary = {"mean_fid": frame.groupby(["comparison", "method"], dropna=False)["fid"].mean()
                   .reset_index().to_dict(orient="records")}
    elif which == "ablation":
        progress(3, f"Training originals-only experts over {len(seeds)} seed(s)...")
        frame = pd.DataFrame([r for per in _map(partial(ablation_for_seed, cfg=cfg), seeds, jobs) for r in per])
        tables["ablation"] = frame
        summary = {"mean": frame.groupby(["method", "training"])[["tpr", "fpr", "accuracy"]].mean()
                   .reset_index().to_dict(orient="records")}
    else:
        budgets = cfg["experiments"]["budgets"]
        progress(3, f"Scoring {len(budgets)} budget(s) over {len(seeds)} seed(s)...")
        frame = pd.DataFrame([r for per in _map(partial(detection_for_seed, cfg=cfg), seeds, jobs) for r in per])
        tables["detection"] = frame
        means = frame.groupby(["eta_255", "method", "detector"])[["tpr", "fpr", "accuracy", "auc"]].mean().reset_index()
        summary = {"budgets": {f"{b:g}/255": g.drop(columns="eta_255").to_dict(orient="records")
                               for b, g in means.groupby("eta_255")}}
        point_seeds = {s: {f"{b * 255:g}/255": os.path.basename(context_config(cfg, s, eta=b)["output_root"])
                           for b in budgets} for s in seeds}

    progress(4, "Writing tables and charts...")
    os.makedirs(out_dir, exist_ok=True)
    for name, table in tables.items():
        table.to_csv(os.path.join(out_dir, f"{name}.csv"), index=False)
    chart_paths = [p for name, fig in figures.items()
                   if (p := charts.save_figure(fig, os.path.join(out_dir, f"{name}.png")))]
    write_json(os.path.join(out_dir, "summary.json"), summary)

    manifest = write_run_manifest(
        out_dir, f"experiment:{which}", cfg, t0,
        seeds={"seeds": seeds, "points": point_seeds},
        inputs={"contexts": [c["output_root"] for c in contexts], "dataset": dataset_dir(cfg),
                "base_model": base_dir(cfg)},
        extra={"summary": summary},
    )
    progress(5, f"Complete: {', '.join(f'{n}.csv' for n in tables)} and {len(chart_paths)} chart(s) in {out_dir}")
    return {"which": which, "output_dir": out_dir, "tables": list(tables), "charts": chart_paths,
            "summary": summary, "metadata": manifest["metadata"]}
