"""SEAL protect stage: optimise watermarks, apply them, release 8-bit PNGs."""

import logging
import os
import time

import numpy as np

from engine import tensor_io
from engine.diffusion import DiffusionModel, save_model
from engine.errors import BudgetViolation
from engine.seeds import derive_seed
from engine.watermark import (
    apply_watermarks,
    load_watermark_set,
    optimize_watermarks,
    quantize_8bit,
    random_watermarks,
    save_watermark_set,
    verify_budget,
)
from pipeline.base_model import load_or_train_base
from pipeline.common import (
    ProgressCallback,
    base_dir,
    dataset_dir,
    read_run_manifest,
    released_dir,
    select_subset,
    stage_dir,
    stage_is_current,
    watermark_config_from,
    write_run_manifest,
)
from pipeline.datasets import (
    ImageDataset,
    as_8bit,
    directory_checksum,
    load_dataset,
    load_or_create_dataset,
    read_manifest,
    save_dataset,
)

logger = logging.getLogger(__name__)


def protect_images(
    clean: ImageDataset,
    base: DiffusionModel,
    cfg: dict,
    progress_callback: ProgressCallback = None,
) -> dict:
    """
    Watermark the configured fraction of ``clean``.

    Watermarks are optimised over the whole dataset and applied to a seeded
    random subset of ``watermark.rate``; the rest is released unchanged.

    Returns:
        Dict with "released" (ImageDataset on the 8-bit grid), "watermarks"
        (applied subset), "full_watermarks", "cotrained" (model or None),
        "trace", "protected_ids" and "budget" (float and 8-bit check).
    """
    wm = cfg["watermark"]
    wm_cfg = watermark_config_from(cfg)
    protected_ids = select_subset(clean.image_ids, wm["rate"], derive_seed(cfg["seed"], "rate", wm["rate"]))

    if wm["random_control"]:
        full = random_watermarks(clean.images.shape, wm_cfg.eta, derive_seed(cfg["seed"], "random-wm"), clean.image_ids)
        cotrained, trace = None, []
    else:
        out = optimize_watermarks(clean.images, clean.prompts, clean.image_ids, base, wm_cfg,
                                  progress_callback=progress_callback)
        full, cotrained, trace = out["watermarks"], out["model"], out["trace"]

    applied = full.subset(protected_ids)
    protected = apply_watermarks(clean.images, clean.image_ids, applied, allow_partial=True)
    budget = verify_budget(clean.images, protected, wm_cfg.eta)
    if not budget["ok"]:
        raise BudgetViolation(f"Released images exceed the watermark budget: {budget}")
    return {
        "released": clean.replace_images(as_8bit(protected)),
        "watermarks": applied,
        "full_watermarks": full,
        "cotrained": cotrained,
        "trace": trace,
        "protected_ids": protected_ids,
        "budget": budget,
    }


def integer_budget_check(clean: ImageDataset, released: ImageDataset, eta: float) -> dict:
    """Count pixels whose 8-bit change stays within round(eta * 255)."""
    bound = int(round(eta * 255))
    diff = np.abs(quantize_8bit(released.images).astype(np.int16) - quantize_8bit(clean.images).astype(np.int16))
    within = int((diff <= bound).sum())
    return {
        "pixels_total": int(diff.size),
        "pixels_within_budget": within,
        "max_abs_8bit": int(diff.max()) if diff.size else 0,
        "bound_8bit": bound,
        "ok": within == diff.size,
    }


def load_released(cfg: dict) -> tuple[ImageDataset, list[str]]:
    """Released dataset written by run_protect plus the ids that carry a watermark."""
    directory = released_dir(cfg)
    dataset = load_dataset(directory)
    return dataset, list(read_manifest(directory).get("protected_ids", dataset.image_ids))


def run_protect(cfg: dict, progress_callback: ProgressCallback = None, reuse: bool = False) -> dict:
    """
    Run the protection stage end to end and write its outputs under
    ``<output_root>/protect``.

    Args:
        cfg: Validated run config
        progress_callback: optional callable(stage: int, message: str)
        reuse: Skip work when a finished run with the same config hash exists

    Returns dict with output paths, counts, the budget check and metadata.
    """

    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        print(message)

    t0 = time.time()
    out_dir = stage_dir(cfg, "protect")
    if reuse and stage_is_current(out_dir, cfg):
        manifest = read_run_manifest(out_dir)
        progress(5, f"Protect stage already complete in {out_dir}")
        return {**manifest["summary"], "reused": True}

    progress(1, "Loading dataset...")
    clean = load_or_create_dataset(cfg)
    progress(2, f"Loading base model... ({len(clean)} {clean.kind} images, {clean.image_shape})")
    base = load_or_train_base(cfg)

    mode = "random control" if cfg["watermark"]["random_control"] else "optimised"
    progress(3, f"Generating watermarks ({mode}, eta={cfg['watermark']['eta'] * 255:.1f}/255, "
                f"rate={cfg['watermark']['rate']})...")
    result = protect_images(clean, base, cfg, lambda epoch, msg: progress(3, msg))

    progress(4, "Writing released images and watermarks...")
    released = result["released"]
    save_dataset(released, released_dir(cfg), extra={
        "protected_ids": result["protected_ids"],
        "source_checksum": clean.checksum,
        "eta": result["watermarks"].eta,
        "watermark_kind": result["watermarks"].kind,
    })
    save_watermark_set(result["watermarks"], os.path.join(out_dir, "watermarks"))
    if result["cotrained"] is not None:
        save_model(result["cotrained"], os.path.join(out_dir, "cotrained"), extra={"role": "diagnostic_cotrained"})

    reread = load_dataset(released_dir(cfg))
    check = integer_budget_check(clean, reread, result["watermarks"].eta)
    if not check["ok"]:
        raise BudgetViolation(f"Re-read PNGs exceed the 8-bit budget: {check}")
    progress(5, f"Complete: {len(reread)} images released, {len(result['protected_ids'])} watermarked; "
                f"budget check {check['pixels_within_budget']}/{check['pixels_total']} pixels "
                f"within {check['bound_8bit']}/255")

    summary = {
        "released_dir": released_dir(cfg),
        "watermark_dir": os.path.join(out_dir, "watermarks"),
        "n_images": len(reread),
        "n_protected": len(result["protected_ids"]),
        "watermark_kind": result["watermarks"].kind,
        "eta": result["watermarks"].eta,
        "budget": {**result["budget"], "integer_check": check},
        "final_loss": result["trace"][-1]["loss"] if result["trace"] else None,
    }
    manifest = write_run_manifest(
        out_dir, "protect", cfg, t0,
        seeds={"seed": cfg["seed"], "watermark": watermark_config_from(cfg).seed,
               "rate_subset": derive_seed(cfg["seed"], "rate", cfg["watermark"]["rate"])},
        inputs={"dataset": directory_checksum(dataset_dir(cfg)),
                "base_model": tensor_io.file_checksum(os.path.join(base_dir(cfg), tensor_io.MANIFEST_NAME))},
        extra={"summary": summary, "trace": result["trace"]},
    )
    return {**summary, "metadata": manifest["metadata"]}


def load_protected_watermarks(cfg: dict):
    return load_watermark_set(os.path.join(stage_dir(cfg, "protect"), "watermarks"))
