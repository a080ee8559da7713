"""The public base model: pretrained once on a generic captioned corpus and cached."""

import hashlib
import json
import logging
import os
import time

import torch

from engine.diffusion import (
    DiffusionModel,
    ImageBatch,
    build_model,
    ldm_loss,
    linear_schedule,
    load_model,
    save_model,
)
from engine.errors import DataError, NumericError
from engine.seeds import derive_seed, make_generator
from pipeline.common import ProgressCallback, base_dir, write_run_manifest
from pipeline.datasets import make_base_corpus
from pipeline.prompts import VOCAB_SIZE

logger = logging.getLogger(__name__)


def _base_key(cfg: dict) -> str:
    spec = {
        "base_model": {k: v for k, v in cfg["base_model"].items() if k != "path"},
        "image_shape": cfg["dataset"]["image_shape"],
        "seed": cfg["seed"],
        "vocab_size": VOCAB_SIZE,
    }
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


def pretrain_base(cfg: dict, progress_callback: ProgressCallback = None) -> DiffusionModel:
    """Train a fresh model on the generic corpus with Adam over both parameter groups."""
    bm = cfg["base_model"]
    seed = derive_seed(cfg["seed"], "base")
    shape = tuple(cfg["dataset"]["image_shape"])
    model = build_model(
        seed=seed,
        image_shape=shape,
        vocab_size=VOCAB_SIZE,
        base_channels=bm["base_channels"],
        time_dim=bm["time_dim"],
        cond_dim=bm["cond_dim"],
        schedule=linear_schedule(bm["num_timesteps"], bm["beta_start"], bm["beta_end"]),
    )
    steps = bm["pretrain_steps"]
    if steps == 0:
        return model
    corpus = make_base_corpus(bm["corpus_size"], shape, cfg["seed"])
    optimizer = torch.optim.Adam(model.parameters(), lr=bm["pretrain_lr"])
    gen = make_generator(derive_seed(seed, "batches"))
    bs = min(bm["pretrain_batch_size"], len(corpus))
    batch_all = ImageBatch(corpus.images, corpus.prompts)
    for step in range(steps):
        idx = torch.randperm(len(corpus), generator=gen)[:bs]
        try:
            loss = ldm_loss(model, batch_all.subset(idx), derive_seed(seed, "loss", step))
        except NumericError as exc:
            raise exc.with_context(stage="pretrain", step=step) from exc
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if progress_callback and (step + 1) % max(1, steps // 10) == 0:
            progress_callback(step + 1, f"Pretraining base model step {step + 1}/{steps} loss {float(loss):.4f}")
    logger.info("Pretrained base model for %d steps on %d corpus images", steps, len(corpus))
    return model


def load_or_train_base(cfg: dict, progress_callback: ProgressCallback = None) -> DiffusionModel:
    """
    Load ``base_model.path`` if set; otherwise reuse ``<output_root>/base`` when it
    was trained with the same settings, and train it there when it was not.
    """
    shape = tuple(cfg["dataset"]["image_shape"])
    if cfg["base_model"]["path"]:
        model = load_model(cfg["base_model"]["path"])
        if tuple(model.image_shape) != shape:
            raise DataError(f"Base model resolution {model.image_shape} does not match dataset {shape}")
        if model.embedder.vocab_size < VOCAB_SIZE:
            raise DataError(f"Base model vocabulary ({model.embedder.vocab_size}) is smaller than {VOCAB_SIZE}")
        return model

    directory = base_dir(cfg)
    key = _base_key(cfg)
    manifest_path = os.path.join(directory, "manifest.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path) as f:
            if json.load(f).get("base_key") == key:
                logger.info("Reusing cached base model in %s", directory)
                return load_model(directory)

    t0 = time.time()
    model = pretrain_base(cfg, progress_callback)
    save_model(model, directory, extra={"base_key": key, "role": "public_base"})
    write_run_manifest(directory, "base", cfg, t0, seeds={"seed": cfg["seed"], "init": derive_seed(cfg["seed"], "base")})
    return model
