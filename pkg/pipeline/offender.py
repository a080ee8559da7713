"""
SEAL offender simulation
Fine-tunes the public base model on the clean and on the released (watermarked)
copy of the dataset with every configured method, then samples generation sets
from each tuned model. The clean/watermarked pair of one method shares its seed,
so the data is the only difference between them.
"""

import logging
import os
import time
from typing import Sequence

import torch

from config.parameters import METHOD_LABELS
from engine import tensor_io
from engine.diffusion import DiffusionModel, Prompt
from engine.errors import DataError, SealError
from engine.finetune import (
    EvalSet,
    FineTuneMethod,
    FineTuneResult,
    finetune,
    generate_eval_set,
    save_finetune_result,
)
from engine.seeds import derive_seed
from pipeline.base_model import load_or_train_base
from pipeline.common import (
    ProgressCallback,
    base_dir,
    generated_dir,
    method_from_config,
    offender_dir,
    read_run_manifest,
    released_dir,
    stage_dir,
    stage_is_current,
    write_run_manifest,
)
from pipeline.datasets import (
    ImageDataset,
    as_8bit,
    directory_checksum,
    from_images,
    load_dataset,
    load_or_create_dataset,
    save_dataset,
)
from pipeline.prompts import OBJECT_CLASSES, object_prompts, style_prompts

logger = logging.getLogger(__name__)

SOURCES = ("clean", "wm")
SPLITS = ("train", "eval")

# Parameter groups each method may change in a saved checkpoint
ALLOWED_GROUPS = {
    "FULL_FT": {"theta1"},
    "DREAMBOOTH_LIKE": {"theta1", "theta2"},
    "TEXTUAL_INVERSION_LIKE": {"theta2"},
    "LORA_LIKE": {"lora"},
}


def generation_prompts(dataset: ImageDataset, cfg: dict) -> list[Prompt]:
    gen = cfg["generation"]
    if dataset.kind == "object":
        if dataset.name not in OBJECT_CLASSES:
            raise DataError(f"Object dataset names {dataset.name!r}; known classes are {OBJECT_CLASSES}")
        return object_prompts(dataset.name, gen["object_prompts"])
    return style_prompts(gen["style_prompts"])


def tune_pair(
    base: DiffusionModel,
    clean: ImageDataset,
    released: ImageDataset,
    method: FineTuneMethod,
    seed: int,
    progress_callback: ProgressCallback = None,
) -> dict[str, FineTuneResult]:
    """Fine-tune ``base`` on the clean and on the released copy with one shared seed."""
    tune_seed = derive_seed(seed, "finetune", method.kind)
    return {
        "clean": finetune(base, clean.images, clean.prompts, method, tune_seed, watermarked=False,
                          dataset_checksum=clean.checksum, progress_callback=progress_callback),
        "wm": finetune(base, released.images, released.prompts, method, tune_seed, watermarked=True,
                       dataset_checksum=released.checksum, progress_callback=progress_callback),
    }


def generate_sets(
    result: FineTuneResult,
    prompts: Sequence[Prompt],
    cfg: dict,
    seed: int,
    splits: Sequence[str] = SPLITS,
) -> dict[str, EvalSet]:
    """One generation set per split; splits share prompts but not sampling seeds."""
    gen = cfg["generation"]
    out = {}
    for split in splits:
        es = generate_eval_set(result, prompts, gen["images_per_prompt"],
                               derive_seed(seed, "generate", result.label, split), gen["sampling_steps"])
        out[split] = EvalSet(as_8bit(es.images), es.prompts, es.method_kind, es.watermarked, es.source)
    return out


def checkpoint_footprint(base_directory: str, tuned_directory: str, method: FineTuneMethod) -> dict:
    """Re-verify a method's update footprint on the saved checkpoints (bitwise)."""
    diff = tensor_io.diff_checkpoints(base_directory, tuned_directory)
    summary = tensor_io.footprint_summary(diff)
    allowed = ALLOWED_GROUPS[method.kind]
    violations = [f"group {g} changed" for g in summary["changed_groups"] if g not in allowed]
    rows = sorted({r for info in diff.get("theta2", {}).values() for r in info["rows"]})
    if method.kind == "TEXTUAL_INVERSION_LIKE" and rows and rows != [method.identifier_token]:
        violations.append(f"embedding rows {rows} changed, only {method.identifier_token} allowed")
    return {**summary, "changed_rows": rows, "violations": violations, "ok": not violations}


def load_generated(cfg: dict, method: str, source: str, split: str) -> torch.Tensor:
    """Generated images written by run_simulate_offender; DataError names what is missing."""
    directory = generated_dir(cfg, method, source, split)
    try:
        return load_dataset(directory).images
    except DataError as exc:
        raise DataError(
            f"No {source} {split} generations for method {method} ({exc}); "
            f"run simulate-offender with {method} in finetune.methods"
        ) from exc


def run_simulate_offender(cfg: dict, progress_callback: ProgressCallback = None, reuse: bool = False) -> dict:
    """
    Fine-tune with every configured method on clean and released data, save
    each model with its finetune.json sidecar and write train/eval generations.

    An empty method list is a no-op with a warning.
    """

    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        print(message)

    methods = list(cfg["finetune"]["methods"])
    if not methods:
        logger.warning("finetune.methods is empty: no offender models to simulate")
        return {"methods": [], "skipped": True}

    t0 = time.time()
    out_dir = stage_dir(cfg, "offender")
    if reuse and stage_is_current(out_dir, cfg):
        progress(4, f"Offender stage already complete in {out_dir}")
        return {**read_run_manifest(out_dir)["summary"], "reused": True}

    progress(1, "Loading datasets and base model...")
    clean = load_or_create_dataset(cfg)
    released = load_dataset(released_dir(cfg))
    if released.image_ids != clean.image_ids:
        raise DataError("Released dataset ids do not match the clean dataset; re-run protect")
    base = load_or_train_base(cfg)
    prompts = generation_prompts(clean, cfg)

    summary = {"methods": methods, "per_method": {}}
    for i, kind in enumerate(methods):
        method = method_from_config(cfg, kind)
        progress(2, f"Fine-tuning {METHOD_LABELS[kind]} ({i + 1}/{len(methods)}, {method.max_steps} steps)...")
        pair = tune_pair(base, clean, released, method, cfg["seed"], lambda step, msg: logger.debug(msg))
        entry = {"max_steps": method.max_steps, "footprint": {}, "generated": {}}
        for source, result in pair.items():
            directory = offender_dir(cfg, kind, source)
            save_finetune_result(result, directory)
            footprint = checkpoint_footprint(base_dir(cfg), directory, method)
            if not footprint["ok"]:
                raise SealError(f"{kind} ({source}) checkpoint breaks its update footprint: {footprint['violations']}")
            entry["footprint"][source] = footprint

            progress(3, f"Generating {len(prompts)} prompts x {cfg['generation']['images_per_prompt']} "
                        f"images from {result.label}...")
            for split, es in generate_sets(result, prompts, cfg, cfg["seed"]).items():
                save_dataset(from_images(es.images, es.prompts, "generated", result.label, split),
                             generated_dir(cfg, kind, source, split),
                             extra={"method": kind, "source": source, "split": split})
                entry["generated"][f"{source}/{split}"] = len(es)
            entry.setdefault("final_loss", {})[source] = result.loss_trace[-1]
        summary["per_method"][kind] = entry

    progress(4, f"Complete: {len(methods)} method(s) x {len(SOURCES)} sources fine-tuned")
    manifest = write_run_manifest(
        out_dir, "simulate-offender", cfg, t0,
        seeds={"seed": cfg["seed"], **{k: derive_seed(cfg["seed"], "finetune", k) for k in methods}},
        inputs={"dataset": clean.checksum, "released": directory_checksum(released_dir(cfg)),
                "base_model": tensor_io.file_checksum(os.path.join(base_dir(cfg), tensor_io.MANIFEST_NAME))},
        extra={"summary": summary},
    )
    return {**summary, "metadata": manifest["metadata"]}
