"""
SEAL Watermark Generation Engine
Per-image L-infinity bounded perturbations learned by alternating optimisation
against the diffusion fine-tuning loss, so a fine-tuned model picks them up in
its earliest steps.

Per batch the optimiser runs three inner loops:
  1. warm up a copy of the denoiser on the clean images (plain SGD)
  2. sign-gradient descent on the batch's deltas through that frozen copy
  3. update the persistent denoiser on the watermarked images (plain SGD)
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from config.parameters import (
    DEFAULT_ETA,
    MAX_ETA,
    PGD_STEP_FRACTION,
    INNER_STEPS,
    WATERMARK_EPOCHS,
    WATERMARK_BATCH_SIZE,
    WATERMARK_MODEL_LR,
    FORMAT_VERSION,
)
from engine.diffusion import (
    DiffusionModel,
    ImageBatch,
    clone_model,
    finetune_step,
    grad_ldm,
    ldm_loss,
)
from engine.errors import BudgetViolation, DataError, NumericError
from engine.seeds import derive_seed, make_generator
from engine import tensor_io

logger = logging.getLogger(__name__)

WM_MANIFEST_NAME = "wm_manifest.json"
PIXEL_TOLERANCE = 1e-6  # float32 rounding of x + delta


@dataclass(frozen=True)
class WatermarkConfig:
    """Hyperparameters of the alternating watermark optimisation."""

    eta: float = DEFAULT_ETA
    pgd_step: Optional[float] = None
    inner_steps: tuple[int, int, int] = INNER_STEPS
    epochs: int = WATERMARK_EPOCHS
    batch_size: int = WATERMARK_BATCH_SIZE
    model_lr: float = WATERMARK_MODEL_LR
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.eta <= MAX_ETA:
            raise ValueError(f"eta must lie in (0, {MAX_ETA:.4f}], got {self.eta}")
        if self.pgd_step is None:
            object.__setattr__(self, "pgd_step", self.eta * PGD_STEP_FRACTION)
        if self.pgd_step <= 0:
            raise ValueError(f"pgd_step must be positive, got {self.pgd_step}")
        steps = tuple(int(s) for s in self.inner_steps)
        if len(steps) != 3 or min(steps) < 1:
            raise ValueError(f"inner_steps must be three counts >= 1, got {self.inner_steps}")
        object.__setattr__(self, "inner_steps", steps)
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.model_lr <= 0:
            raise ValueError(f"model_lr must be positive, got {self.model_lr}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inner_steps"] = list(self.inner_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkConfig":
        d = dict(d)
        if "inner_steps" in d:
            d["inner_steps"] = tuple(d["inner_steps"])
        return cls(**d)


def _budget_ceiling(eta: float) -> float:
    # one float32 ulp above eta
    return float(np.nextafter(np.float32(eta), np.float32(np.inf)))


@dataclass(frozen=True)
class WatermarkSet:
    """Per-image deltas aligned to image ids; ||delta_i||_inf <= eta on construction."""

    deltas: torch.Tensor
    image_ids: tuple[str, ...]
    eta: float
    config: Optional[WatermarkConfig] = None
    kind: str = "optimized"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        deltas = torch.as_tensor(self.deltas).detach().to(torch.float32).clone()
        ids = tuple(str(i) for i in self.image_ids)
        if deltas.dim() != 4:
            raise ValueError(f"deltas must be (N, C, H, W), got shape {tuple(deltas.shape)}")
        if deltas.shape[0] != len(ids):
            raise ValueError(f"{deltas.shape[0]} deltas for {len(ids)} image ids")
        if len(set(ids)) != len(ids):
            raise ValueError("Watermark image ids must be unique")
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if deltas.numel():
            worst = float(deltas.abs().max())
            if not np.isfinite(worst) or worst > _budget_ceiling(self.eta):
                raise BudgetViolation(f"Watermark budget exceeded: max |delta| = {worst:.8f} > eta = {self.eta:.8f}")
        object.__setattr__(self, "deltas", deltas)
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "_index", {image_id: i for i, image_id in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.image_ids)

    def delta_for(self, image_id: str) -> torch.Tensor:
        if image_id not in self._index:
            raise DataError(f"No watermark for image id {image_id!r}")
        return self.deltas[self._index[image_id]]

    def subset(self, image_ids: Sequence[str]) -> "WatermarkSet":
        idx = [self._index[i] for i in image_ids]
        return WatermarkSet(self.deltas[idx], tuple(image_ids), self.eta, self.config, self.kind)


# ── PGD primitives ────────────────────────────────────────────────


def project_linf(delta: torch.Tensor, eta: float) -> torch.Tensor:
    """Elementwise clamp into the L-infinity ball of radius eta."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return delta.clamp(-eta, eta)


def pgd_step(delta: torch.Tensor, grad: torch.Tensor, alpha: float, eta: float) -> torch.Tensor:
    """
    One sign-gradient descent step on delta followed by projection.

    Descends the loss (sign(0) = 0 leaves an element in place).
    """
    if delta.shape != grad.shape:
        raise ValueError(f"grad shape {tuple(grad.shape)} does not match delta shape {tuple(delta.shape)}")
    if alpha <= 0:
        raise ValueError(f"PGD step size must be positive, got {alpha}")
    return project_linf(delta - alpha * torch.sign(grad), eta)


# ── Alternating optimisation ──────────────────────────────────────


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=make_generator(derive_seed(seed, "perm", epoch)))
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def optimize_watermarks(
    images: torch.Tensor,
    prompts: torch.Tensor,
    image_ids: Sequence[str],
    base_model: DiffusionModel,
    cfg: WatermarkConfig,
    update_watermarks: bool = True,
    progress_callback: Optional[Callable[[int, str], None]] = None,
) -> dict:
    """
    Learn one watermark per image against the fine-tuning loss.

    Args:
        images: Clean images (N, C, H, W) in [0, 1]
        prompts: Fixed dataset caption per image (N, L)
        image_ids: Stable id per image
        base_model: Public model; copied, never modified
        cfg: Optimisation settings
        update_watermarks: False runs the identical schedule with the PGD
            update replaced by a no-op (control run)
        progress_callback: optional callable(epoch, message)

    Returns:
        Dict with "watermarks" (WatermarkSet), "model" (co-trained model) and
        "trace" (per-batch loss on the watermarked batch after step 3).
    """
    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        logger.info(message)

    n = int(images.shape[0])
    if n == 0:
        raise DataError("Cannot optimise watermarks for an empty dataset")
    clean = ImageBatch(images, prompts)
    if len(image_ids) != n:
        raise ValueError(f"{len(image_ids)} image ids for {n} images")

    model = clone_model(base_model)
    deltas = torch.zeros_like(clean.pixels)
    clean_steps, pgd_steps, wm_steps = cfg.inner_steps
    trace = []

    for epoch in range(cfg.epochs):
        batches = _batches(n, cfg.batch_size, cfg.seed, epoch)
        for b, idx in enumerate(batches):
            x = clean.pixels[idx]
            c = clean.prompts[idx]
            d = deltas[idx]
            loop = "clean"
            try:
                # 1. warm-up copy on clean images
                warm = clone_model(model)
                for k in range(clean_steps):
                    finetune_step(warm, ImageBatch(x, c), cfg.model_lr, "theta1",
                                  derive_seed(cfg.seed, "clean", epoch, b, k))

                # 2. PGD on deltas through the frozen warm-up copy
                loop = "pgd"
                for k in range(pgd_steps):
                    g = grad_ldm(warm, ImageBatch.unchecked(x + d, c), "input",
                                 derive_seed(cfg.seed, "pgd", epoch, b, k))
                    if update_watermarks:
                        d = pgd_step(d, g, cfg.pgd_step, cfg.eta)

                # 3. persistent model on watermarked images (x + delta unclamped)
                loop = "watermarked"
                for k in range(wm_steps):
                    finetune_step(model, ImageBatch.unchecked(x + d, c), cfg.model_lr, "theta1",
                                  derive_seed(cfg.seed, "wm", epoch, b, k))
                with torch.no_grad():
                    loss = float(ldm_loss(model, ImageBatch.unchecked(x + d, c),
                                          derive_seed(cfg.seed, "trace", epoch, b)))
            except NumericError as exc:
                raise exc.with_context(epoch=epoch, batch=b, loop=loop) from exc

            deltas[idx] = d.detach()
            trace.append({"epoch": epoch, "batch": b, "loss": loss})
            logger.debug("epoch %d batch %d loss %.6f", epoch, b, loss)
        progress(epoch + 1, f"Watermark epoch {epoch + 1}/{cfg.epochs} (last batch loss {trace[-1]['loss']:.4f})")

    watermarks = WatermarkSet(deltas, tuple(image_ids), cfg.eta, cfg,
                              kind="optimized" if update_watermarks else "control")
    return {"watermarks": watermarks, "model": model, "trace": trace}


# ── Application and controls ──────────────────────────────────────


def apply_watermarks(
    images: torch.Tensor,
    image_ids: Sequence[str],
    wm: WatermarkSet,
    allow_partial: bool = False,
) -> torch.Tensor:
    """
    Protected images x_hat = clamp(x + delta, 0, 1), matched by image id.

    With ``allow_partial`` images without a watermark pass through unchanged
    (used for partial watermark rates); otherwise every id must be covered.
    """
    ids = [str(i) for i in image_ids]
    if len(ids) != int(images.shape[0]):
        raise ValueError(f"{len(ids)} image ids for {images.shape[0]} images")
    missing = [i for i in ids if i not in wm._index]
    if missing and not allow_partial:
        raise DataError(f"Watermark set has no delta for {len(missing)} image(s), e.g. {missing[:3]}")
    out = images.clone()
    for row, image_id in enumerate(ids):
        if image_id in wm._index:
            delta = wm.delta_for(image_id).to(images.dtype)
            if delta.shape != images[row].shape:
                raise ValueError(f"Delta shape {tuple(delta.shape)} does not match image {image_id!r}")
            out[row] = (images[row] + delta).clamp(0.0, 1.0)
    return out


def random_watermarks(
    shape: Sequence[int],
    eta: float,
    seed: int,
    image_ids: Optional[Sequence[str]] = None,
) -> WatermarkSet:
    """I.i.d. uniform deltas in [-eta, +eta] (control baseline)."""
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    shape = tuple(int(s) for s in shape)
    ids = tuple(image_ids) if image_ids is not None else tuple(f"{i:05d}" for i in range(shape[0]))
    if eta == 0:
        deltas = torch.zeros(shape, dtype=torch.float32)
    else:
        u = torch.rand(shape, generator=make_generator(seed), dtype=torch.float32)
        deltas = (2.0 * u - 1.0) * eta
        deltas = deltas.clamp(-eta, eta)
    return WatermarkSet(deltas, ids, eta, None, kind="random")


def quantize_8bit(pixels: torch.Tensor) -> np.ndarray:
    """[0, 1] pixels to uint8 with round-half-to-even."""
    arr = np.clip(pixels.detach().cpu().numpy().astype(np.float64), 0.0, 1.0) * 255.0
    return np.rint(arr).astype(np.uint8)


def verify_budget(original: torch.Tensor, protected: torch.Tensor, eta: float) -> dict:
    """
    Check the L-infinity budget in float and after 8-bit quantisation.

    The 8-bit bound round(eta * 255) holds when the originals are themselves
    8-bit images, as every dataset loaded from PNG is.
    """
    diff = float((protected - original).abs().max()) if original.numel() else 0.0
    q_diff = 0
    if original.numel():
        q_diff = int(np.abs(quantize_8bit(protected).astype(np.int16) - quantize_8bit(original).astype(np.int16)).max())
    bound_8bit = int(round(eta * 255))
    return {
        "max_abs": diff,
        "max_abs_8bit": q_diff,
        "bound_8bit": bound_8bit,
        "ok": diff <= eta + PIXEL_TOLERANCE and q_diff <= bound_8bit,
    }


# ── Persistence ───────────────────────────────────────────────────


def save_watermark_set(wm: WatermarkSet, directory: str) -> dict:
    """Write wm_manifest.json plus one delta blob per image."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, image_id in enumerate(wm.image_ids):
        name = f"delta_{i:05d}.bin"
        checksum = tensor_io.write_blob(os.path.join(directory, name), wm.deltas[i].numpy())
        entries.append({"image_id": image_id, "file": name, "sha256": checksum})
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": wm.kind,
        "eta": wm.eta,
        "config": wm.config.to_dict() if wm.config else None,
        "image_ids": list(wm.image_ids),
        "deltas": entries,
    }
    with open(os.path.join(directory, WM_MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_watermark_set(directory: str) -> WatermarkSet:
    """Read a watermark set, verifying every delta checksum."""
    path = os.path.join(directory, WM_MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"Watermark manifest not found: {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"Unsupported watermark format {manifest.get('format_version')} in {directory}")
    deltas = []
    for entry in manifest["deltas"]:
        blob = os.path.join(directory, entry["file"])
        if not os.path.isfile(blob):
            raise DataError(f"Missing delta blob {blob}")
        if tensor_io.file_checksum(blob) != entry["sha256"]:
            raise DataError(f"Checksum mismatch for {blob}")
        deltas.append(torch.from_numpy(tensor_io.read_blob(blob)))
    config = WatermarkConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    stacked = torch.stack(deltas) if deltas else torch.zeros((0, 1, 1, 1))
    return WatermarkSet(stacked, tuple(manifest["image_ids"]), float(manifest["eta"]), config,
                        kind=manifest.get("kind", "optimized"))
