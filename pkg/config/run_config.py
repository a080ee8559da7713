"""
SEAL Run Configuration
One JSON file per run, deep-merged over DEFAULT_RUN_CONFIG. Unknown keys are
rejected at every level. Precedence: CLI flags > environment (.env) > run
file > defaults.
"""

import copy
import hashlib
import json
import os
from typing import Any, Optional

from dotenv import load_dotenv

from config.parameters import (
    AUGMENTATION_DEFAULTS,
    BASE_CORPUS_SIZE,
    BASE_PRETRAIN_BATCH_SIZE,
    BASE_PRETRAIN_LR,
    BASE_PRETRAIN_STEPS,
    BETA_END,
    BETA_START,
    COND_EMBED_DIM,
    DATASET_KINDS,
    DEFAULT_DATASET_SIZE,
    DEFAULT_ETA,
    DEFAULT_OUTPUT_ROOT,
    DENOISER_BASE_CHANNELS,
    DETECTION_THRESHOLD,
    DETECTOR_BATCH_SIZE,
    DETECTOR_CHANNELS,
    DETECTOR_LR,
    DETECTOR_STEPS,
    DETECTOR_WEIGHT_DECAY,
    ENV_JOBS,
    ENV_OUTPUT_ROOT,
    EVAL_CORRUPTIONS,
    FINETUNE_BATCH_SIZE,
    FINETUNE_LR,
    HOLDOUT_FRACTION,
    IMAGE_SHAPE,
    IMAGES_PER_PROMPT,
    INNER_STEPS,
    LORA_RANK,
    MAX_ETA,
    METHOD_KINDS,
    NUM_TIMESTEPS,
    OBJECT_PROMPT_COUNT,
    PRIOR_LOSS_WEIGHT,
    PRIOR_PRESERVATION,
    ROC_GRID_POINTS,
    SAMPLING_STEPS,
    SCALE_FACTOR,
    STEP_GRID_FRACTIONS,
    STYLE_PROMPT_COUNT,
    SWEEP_SEEDS,
    TIME_EMBED_DIM,
    WATERMARK_BATCH_SIZE,
    WATERMARK_BUDGETS,
    WATERMARK_EPOCHS,
    WATERMARK_MODEL_LR,
    WATERMARK_RATES,
)
from engine.errors import ConfigError

# Keys whose values are free-form mappings (not checked key by key)
_OPEN_KEYS = {"experiments.corruptions"}

# Keys that do not change results and stay out of the config hash
_RUNTIME_KEYS = ("jobs", "output_root")

DEFAULT_RUN_CONFIG: dict[str, Any] = {
    "seed": 0,
    "scale": SCALE_FACTOR,
    "jobs": 1,
    "output_root": DEFAULT_OUTPUT_ROOT,
    "dataset": {
        "kind": "style",
        "path": None,
        "size": DEFAULT_DATASET_SIZE,
        "image_shape": list(IMAGE_SHAPE),
    },
    "base_model": {
        "path": None,
        "base_channels": DENOISER_BASE_CHANNELS,
        "time_dim": TIME_EMBED_DIM,
        "cond_dim": COND_EMBED_DIM,
        "num_timesteps": NUM_TIMESTEPS,
        "beta_start": BETA_START,
        "beta_end": BETA_END,
        "pretrain_steps": BASE_PRETRAIN_STEPS,
        "pretrain_lr": BASE_PRETRAIN_LR,
        "pretrain_batch_size": BASE_PRETRAIN_BATCH_SIZE,
        "corpus_size": BASE_CORPUS_SIZE,
    },
    "watermark": {
        "eta": DEFAULT_ETA,
        "pgd_step": None,
        "inner_steps": list(INNER_STEPS),
        "epochs": WATERMARK_EPOCHS,
        "batch_size": WATERMARK_BATCH_SIZE,
        "model_lr": WATERMARK_MODEL_LR,
        "rate": 1.0,
        "random_control": False,
    },
    "finetune": {
        "methods": list(METHOD_KINDS),
        "per_method": {
            kind: {"lr": FINETUNE_LR[kind], "batch_size": FINETUNE_BATCH_SIZE[kind], "max_steps": None}
            for kind in METHOD_KINDS
        },
        "lora_rank": LORA_RANK,
        "prior_preservation": PRIOR_PRESERVATION,
        "prior_loss_weight": PRIOR_LOSS_WEIGHT,
    },
    "generation": {
        "images_per_prompt": IMAGES_PER_PROMPT,
        "sampling_steps": SAMPLING_STEPS,
        "style_prompts": STYLE_PROMPT_COUNT,
        "object_prompts": OBJECT_PROMPT_COUNT,
    },
    "detector": {
        "lr": DETECTOR_LR,
        "weight_decay": DETECTOR_WEIGHT_DECAY,
        "steps": DETECTOR_STEPS,
        "batch_size": DETECTOR_BATCH_SIZE,
        "channels": list(DETECTOR_CHANNELS),
        "holdout_fraction": HOLDOUT_FRACTION,
        "threshold": DETECTION_THRESHOLD,
        "use_generated": True,
        "augmentation": copy.deepcopy(AUGMENTATION_DEFAULTS),
    },
    "audit": {
        "images": None,
        "labels": None,
    },
    "experiments": {
        "seeds": list(SWEEP_SEEDS),
        "step_fractions": list(STEP_GRID_FRACTIONS),
        "rates": list(WATERMARK_RATES),
        "budgets": list(WATERMARK_BUDGETS),
        "corruptions": copy.deepcopy(EVAL_CORRUPTIONS),
        "roc_points": ROC_GRID_POINTS,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"Unknown config key '{dotted}'")
        if isinstance(base[key], dict) and dotted not in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{dotted}' must be a mapping, got {type(value).__name__}")
            out[key] = _merge(base[key], value, dotted)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(f"Config key '{key}': {message}")


def _fractions(values, key: str):
    _require(isinstance(values, list) and len(values) > 0, key, "must be a non-empty list")
    _require(all(isinstance(v, (int, float)) and 0 < v <= 1 for v in values), key,
             f"values must lie in (0, 1], got {values}")


def validate_run_config(cfg: dict) -> dict:
    """Range checks on a merged config. Raises ConfigError naming the key."""
    _require(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", f"must be a non-negative int, got {cfg['seed']!r}")
    _require(cfg["scale"] > 0, "scale", f"must be positive, got {cfg['scale']}")
    _require(isinstance(cfg["jobs"], int) and cfg["jobs"] >= 1, "jobs", f"must be an int >= 1, got {cfg['jobs']!r}")

    ds = cfg["dataset"]
    _require(ds["kind"] in DATASET_KINDS, "dataset.kind", f"must be one of {DATASET_KINDS}, got {ds['kind']!r}")
    _require(ds["size"] >= 2, "dataset.size", f"must be >= 2, got {ds['size']}")
    shape = ds["image_shape"]
    _require(len(shape) == 3 and shape[1] % 4 == 0 and shape[2] % 4 == 0, "dataset.image_shape",
             f"must be [C, H, W] with H and W divisible by 4, got {shape}")

    bm = cfg["base_model"]
    _require(0 < bm["beta_start"] < bm["beta_end"] < 1, "base_model.beta_start",
             f"need 0 < beta_start < beta_end < 1, got {bm['beta_start']}, {bm['beta_end']}")
    _require(bm["num_timesteps"] >= 2, "base_model.num_timesteps", "must be >= 2")
    _require(bm["pretrain_steps"] >= 0, "base_model.pretrain_steps", "must be >= 0")

    wm = cfg["watermark"]
    _require(0 < wm["eta"] <= MAX_ETA, "watermark.eta", f"must lie in (0, {MAX_ETA:.4f}], got {wm['eta']}")
    _require(len(wm["inner_steps"]) == 3 and all(int(s) >= 1 for s in wm["inner_steps"]),
             "watermark.inner_steps", f"must be three counts >= 1, got {wm['inner_steps']}")
    _require(wm["epochs"] >= 0, "watermark.epochs", "must be >= 0")
    _require(0 < wm["rate"] <= 1, "watermark.rate", f"must lie in (0, 1], got {wm['rate']}")

    ft = cfg["finetune"]
    methods = ft["methods"]
    unknown = [m for m in methods if m not in METHOD_KINDS]
    _require(not unknown, "finetune.methods", f"unknown method(s) {unknown}; choose from {METHOD_KINDS}")
    _require(len(set(methods)) == len(methods), "finetune.methods", f"duplicate methods in {methods}")
    for kind, params in ft["per_method"].items():
        _require(params["lr"] > 0, f"finetune.per_method.{kind}.lr", "must be positive")
        _require(params["max_steps"] is None or params["max_steps"] >= 1,
                 f"finetune.per_method.{kind}.max_steps", "must be null or >= 1")

    gen = cfg["generation"]
    _require(gen["images_per_prompt"] >= 0, "generation.images_per_prompt", "must be >= 0")
    _require(gen["sampling_steps"] >= 1, "generation.sampling_steps", "must be >= 1")

    det = cfg["detector"]
    _require(0 <= det["threshold"] <= 1, "detector.threshold", f"must lie in [0, 1], got {det['threshold']}")
    _require(0 <= det["holdout_fraction"] < 1, "detector.holdout_fraction", "must lie in [0, 1)")
    try:
        from engine.corruptions import AugmentationPolicy
        AugmentationPolicy.from_dict(det["augmentation"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Config key 'detector.augmentation': {exc}") from exc

    ex = cfg["experiments"]
    _require(len(ex["seeds"]) > 0, "experiments.seeds", "must not be empty")
    _fractions(ex["step_fractions"], "experiments.step_fractions")
    _fractions(ex["rates"], "experiments.rates")
    _require(all(0 < b <= MAX_ETA for b in ex["budgets"]), "experiments.budgets", f"must lie in (0, {MAX_ETA:.4f}]")
    try:
        from engine.corruptions import validate_params
        for kind, params in ex["corruptions"].items():
            validate_params(kind, params)
    except ValueError as exc:
        raise ConfigError(f"Config key 'experiments.corruptions': {exc}") from exc
    return cfg


def _env_overrides() -> dict:
    load_dotenv()
    out = {}
    if os.getenv(ENV_OUTPUT_ROOT):
        out["output_root"] = os.getenv(ENV_OUTPUT_ROOT)
    if os.getenv(ENV_JOBS):
        try:
            out["jobs"] = int(os.getenv(ENV_JOBS))
        except ValueError as exc:
            raise ConfigError(f"{ENV_JOBS} must be an integer, got {os.getenv(ENV_JOBS)!r}") from exc
    return out


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """
    Build and validate the run config.

    Args:
        path: JSON run file (optional)
        overrides: Values from CLI flags, nested like the config (None values ignored)

    Returns:
        Plain dict with every key of DEFAULT_RUN_CONFIG.
    """
    cfg = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path) as f:
                from_file = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        cfg = _merge(cfg, from_file)
    cfg = _merge(cfg, _env_overrides())
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return validate_run_config(cfg)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON dump, runtime-only keys excluded."""
    stable = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}
    return hashlib.sha256(json.dumps(stable, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
