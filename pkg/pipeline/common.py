"""Shared stage helpers: output layout, run manifests, config -> engine objects."""

import copy
import json
import logging
import os
import time
from datetime import datetime
from typing import Callable, Optional, Sequence

import numpy as np

from config.run_config import config_hash
from engine import tensor_io
from engine.corruptions import AugmentationPolicy
from engine.detector import DetectorHyper
from engine.finetune import FineTuneMethod, default_method
from engine.seeds import derive_seed
from engine.watermark import WatermarkConfig

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.json"

ProgressCallback = Optional[Callable[[int, str], None]]


# ── Output layout ──────────────────────────────────────────────────


def stage_dir(cfg: dict, *parts: str) -> str:
    return os.path.join(cfg["output_root"], *parts)


def dataset_dir(cfg: dict) -> str:
    return cfg["dataset"]["path"] or stage_dir(cfg, "dataset")


def base_dir(cfg: dict) -> str:
    return cfg["base_model"]["path"] or stage_dir(cfg, "base")


def released_dir(cfg: dict) -> str:
    return stage_dir(cfg, "protect", "released")


def watermark_dir(cfg: dict) -> str:
    return stage_dir(cfg, "protect", "watermarks")


def offender_dir(cfg: dict, method: str, source: str) -> str:
    return stage_dir(cfg, "offender", method, source)


def generated_dir(cfg: dict, method: str, source: str, split: str) -> str:
    return stage_dir(cfg, "offender", method, source, "generated", split)


def detectors_dir(cfg: dict) -> str:
    return stage_dir(cfg, "detectors")


# ── Run manifests ──────────────────────────────────────────────────


def checksum_tree(directory: str) -> dict[str, str]:
    """sha256 of every file below ``directory`` (run manifests excluded), keyed by relative path."""
    out = {}
    if not os.path.isdir(directory):
        return out
    for root, _, files in os.walk(directory):
        for name in sorted(files):
            if name == RUN_MANIFEST:
                continue
            path = os.path.join(root, name)
            out[os.path.relpath(path, directory)] = tensor_io.file_checksum(path)
    return dict(sorted(out.items()))


def write_run_manifest(
    directory: str,
    stage: str,
    cfg: dict,
    t0: float,
    seeds: Optional[dict] = None,
    inputs: Optional[dict] = None,
    outputs: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> dict:
    """Everything needed to re-run the stage exactly, plus timing."""
    elapsed = time.time() - t0
    manifest = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": seeds or {"seed": cfg["seed"]},
        "inputs": inputs or {},
        "outputs": outputs if outputs is not None else checksum_tree(directory),
        **(extra or {}),
        "metadata": {
            "started": datetime.fromtimestamp(t0).isoformat(),
            "processing_time_seconds": round(elapsed, 1),
            "timestamp": datetime.now().isoformat(),
        },
    }
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, RUN_MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, default=_json_default)
    return manifest


def read_run_manifest(directory: str) -> Optional[dict]:
    path = os.path.join(directory, RUN_MANIFEST)
    if not os.path.isfile(path):
        return None
    with open(path) as f:
        return json.load(f)


def stage_is_current(directory: str, cfg: dict) -> bool:
    """True when ``directory`` holds a finished stage run for this exact config."""
    manifest = read_run_manifest(directory)
    return manifest is not None and manifest.get("config_hash") == config_hash(cfg)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def write_json(path: str, payload) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=_json_default)


# ── Config -> engine objects ───────────────────────────────────────


def with_overrides(cfg: dict, **changes) -> dict:
    """Copy of ``cfg`` with dotted-path keys replaced (``watermark__eta=...``)."""
    out = copy.deepcopy(cfg)
    for dotted, value in changes.items():
        node = out
        keys = dotted.split("__")
        for key in keys[:-1]:
            node = node[key]
        if keys[-1] not in node:
            raise KeyError(f"Unknown config key {'.'.join(keys)}")
        node[keys[-1]] = value
    return out


def method_from_config(cfg: dict, kind: str, max_steps: Optional[int] = None) -> FineTuneMethod:
    """Method defaults scaled by ``cfg['scale']`` with per-method overrides applied."""
    ft = cfg["finetune"]
    per = ft["per_method"].get(kind, {})
    overrides = {
        "lora_rank": ft["lora_rank"],
        "prior_preservation": ft["prior_preservation"],
        "prior_loss_weight": ft["prior_loss_weight"],
    }
    for key in ("lr", "batch_size"):
        if per.get(key) is not None:
            overrides[key] = per[key]
    steps = max_steps if max_steps is not None else per.get("max_steps")
    if steps is not None:
        overrides["max_steps"] = int(steps)
    return default_method(kind, cfg["scale"], **overrides)


def hyper_from_config(cfg: dict) -> DetectorHyper:
    det = cfg["detector"]
    return DetectorHyper(
        lr=det["lr"],
        weight_decay=det["weight_decay"],
        steps=det["steps"],
        batch_size=det["batch_size"],
        channels=tuple(det["channels"]),
        holdout_fraction=det["holdout_fraction"],
    )


def policy_from_config(cfg: dict, augment: bool = True) -> AugmentationPolicy:
    if not augment:
        return AugmentationPolicy.disabled()
    return AugmentationPolicy.from_dict(cfg["detector"]["augmentation"])


def watermark_config_from(cfg: dict, eta: Optional[float] = None) -> WatermarkConfig:
    wm = cfg["watermark"]
    return WatermarkConfig(
        eta=wm["eta"] if eta is None else eta,
        pgd_step=wm["pgd_step"],
        inner_steps=tuple(wm["inner_steps"]),
        epochs=wm["epochs"],
        batch_size=wm["batch_size"],
        model_lr=wm["model_lr"],
        seed=derive_seed(cfg["seed"], "watermark"),
    )


def select_subset(image_ids: Sequence[str], rate: float, seed: int) -> list[str]:
    """Uniform random ``rate`` fraction of the ids (at least one), kept in dataset order."""
    if not 0 < rate <= 1:
        raise ValueError(f"Watermark rate must lie in (0, 1], got {rate}")
    n = len(image_ids)
    if rate == 1:
        return list(image_ids)
    k = max(1, int(round(rate * n)))
    chosen = set(np.random.default_rng(seed).permutation(n)[:k].tolist())
    return [image_id for i, image_id in enumerate(image_ids) if i in chosen]
