"""SEAL detector training stage: per-method experts first, then the gating model."""

import logging
import time
from typing import Mapping, Optional

import torch

from engine.detector import (
    ExpertDetector,
    GatingModel,
    MoEDetector,
    save_moe,
    train_expert,
    train_gating,
)
from engine.seeds import derive_seed
from pipeline.common import (
    ProgressCallback,
    detectors_dir,
    hyper_from_config,
    policy_from_config,
    read_run_manifest,
    stage_dir,
    stage_is_current,
    write_run_manifest,
)
from pipeline.datasets import ImageDataset, load_or_create_dataset
from pipeline.offender import load_generated
from pipeline.protect import load_released

logger = logging.getLogger(__name__)

GATING_REFUSED = "Gating needs at least 2 methods; saved the single expert only (use detect_specific)"


def watermarked_originals(released: ImageDataset, protected_ids) -> torch.Tensor:
    wanted = set(protected_ids)
    rows = [i for i, image_id in enumerate(released.image_ids) if image_id in wanted]
    return released.images[rows]


def train_detector_set(
    cfg: dict,
    clean_images: torch.Tensor,
    wm_images: torch.Tensor,
    generated: Mapping[str, tuple[torch.Tensor, torch.Tensor]],
    seed: int,
    augment: bool = True,
    use_generated: Optional[bool] = None,
) -> tuple[tuple[ExpertDetector, ...], Optional[GatingModel]]:
    """
    Stage one: one expert per method. Stage two: gating over the methods'
    generations (clean and watermark-tuned together). Gating is skipped for
    a single method.

    Args:
        generated: method -> (clean-tuned generations, watermark-tuned generations)
        use_generated: None follows ``detector.use_generated``; False trains on originals only
    """
    hyper = hyper_from_config(cfg)
    policy = policy_from_config(cfg, augment)
    with_generated = cfg["detector"]["use_generated"] if use_generated is None else use_generated
    experts = []
    for kind, (gen_clean, gen_wm) in generated.items():
        if not with_generated:
            empty = gen_clean[:0]
            gen_clean, gen_wm = empty, empty
        experts.append(train_expert(clean_images, wm_images, gen_clean, gen_wm, policy, hyper,
                                    derive_seed(seed, "expert", kind), kind, ablation=not with_generated))
    gating = None
    if len(generated) >= 2:
        gating = train_gating({k: torch.cat([c, w]) for k, (c, w) in generated.items()}, hyper,
                              derive_seed(seed, "gating"))
    return tuple(experts), gating


def build_moe(experts, gating: Optional[GatingModel], cfg: dict) -> MoEDetector:
    return MoEDetector(tuple(experts), gating, cfg["detector"]["threshold"])


def load_training_generations(cfg: dict, methods, split: str = "train") -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    return {m: (load_generated(cfg, m, "clean", split), load_generated(cfg, m, "wm", split)) for m in methods}


def run_train_detectors(cfg: dict, progress_callback: ProgressCallback = None, reuse: bool = False) -> dict:
    """
    Train the detectors on the offender generations and save them as a
    mixture under ``<output_root>/detectors`` (experts/<method>/, gating/, moe.json).
    """

    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        print(message)

    t0 = time.time()
    out_dir = detectors_dir(cfg)
    if reuse and stage_is_current(out_dir, cfg):
        progress(4, f"Detectors already trained in {out_dir}")
        return {**read_run_manifest(out_dir)["summary"], "reused": True}

    methods = list(cfg["finetune"]["methods"])
    if not methods:
        raise ValueError("finetune.methods is empty: there is nothing to train detectors for")

    progress(1, "Loading originals and generated sets...")
    clean = load_or_create_dataset(cfg)
    released, protected_ids = load_released(cfg)
    wm_images = watermarked_originals(released, protected_ids)
    generated = load_training_generations(cfg, methods)

    progress(2, f"Training {len(methods)} expert(s)"
                f"{' and the gating model' if len(methods) > 1 else ''}...")
    experts, gating = train_detector_set(cfg, clean.images, wm_images, generated, cfg["seed"])
    moe = build_moe(experts, gating, cfg)
    if gating is None:
        logger.warning(GATING_REFUSED)

    progress(3, "Saving detectors...")
    save_moe(moe, out_dir)
    summary = {
        "methods": methods,
        "experts": {e.method_kind: {k: e.report.get(k) for k in ("train_accuracy", "holdout_accuracy", "warnings")}
                    for e in experts},
        "gating": None if gating is None else {k: gating.report.get(k) for k in ("train_accuracy", "holdout_accuracy")},
        "gating_message": GATING_REFUSED if gating is None else None,
        "threshold": moe.threshold,
    }
    held = ", ".join(f"{m} {v['holdout_accuracy']}" for m, v in summary["experts"].items())
    progress(4, f"Complete: held-out accuracy {held}")
    manifest = write_run_manifest(
        out_dir, "train-detectors", cfg, t0,
        seeds={"seed": cfg["seed"], **{m: derive_seed(cfg["seed"], "expert", m) for m in methods},
               "gating": derive_seed(cfg["seed"], "gating")},
        inputs={"offender": (read_run_manifest(stage_dir(cfg, "offender")) or {}).get("config_hash"),
                "clean": clean.checksum, "released": released.checksum},
        extra={"summary": summary},
    )
    return {**summary, "metadata": manifest["metadata"]}
