"""
SEAL Diffusion Core
Minimal conditional denoising-diffusion model in pixel space.

Provides the noise schedule, forward noising, the noise-prediction fine-tuning
loss, its gradients, plain-SGD fine-tuning steps, ancestral sampling and
checkpoint persistence. Every other engine module builds on these functions.

Parameter groups:
  theta1: denoiser (conv encoder-decoder)
  theta2: condition embedding table
  lora: low-rank adapters, present only after engine.finetune.inject_lora
"""

import copy
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config.parameters import (
    IMAGE_SHAPE,
    NUM_TIMESTEPS,
    BETA_START,
    BETA_END,
    DENOISER_BASE_CHANNELS,
    TIME_EMBED_DIM,
    COND_EMBED_DIM,
    PAD_TOKEN,
    PROMPT_LENGTH,
)
from engine.errors import NumericError
from engine.seeds import make_generator, seeded_init
from engine import tensor_io

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ("theta1", "theta2", "lora")
DEFAULT_VOCAB_SIZE = 64

Prompt = tuple[int, ...]


# ── Noise schedule ────────────────────────────────────────────────


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances with derived alphas and cumulative alpha-bars (float64)."""

    betas: torch.Tensor

    def __post_init__(self):
        betas = torch.as_tensor(self.betas, dtype=torch.float64).reshape(-1).clone()
        if betas.numel() == 0:
            raise ValueError("Noise schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("Every beta must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        ab = self.alpha_bars
        if ab.numel() > 1 and not bool((ab[1:] < ab[:-1]).all()):
            raise ValueError("alpha-bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.numel())

    @property
    def alphas(self) -> torch.Tensor:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> torch.Tensor:
        return torch.cumprod(self.alphas, dim=0)


def linear_schedule(
    T: int = NUM_TIMESTEPS,
    beta_start: float = BETA_START,
    beta_end: float = BETA_END,
) -> NoiseSchedule:
    """Standard DDPM linear beta schedule."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    return NoiseSchedule(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


# ── Prompts and image batches ─────────────────────────────────────


def make_prompt(tokens: Sequence[int], vocab_size: int, length: int = PROMPT_LENGTH) -> Prompt:
    """Validate token ids and right-pad to a fixed prompt length."""
    ids = [int(t) for t in tokens]
    if len(ids) > length:
        raise ValueError(f"Prompt has {len(ids)} tokens, maximum is {length}")
    bad = [t for t in ids if not 0 <= t < vocab_size]
    if bad:
        raise ValueError(f"Token ids {bad} outside embedding table of size {vocab_size}")
    return tuple(ids + [PAD_TOKEN] * (length - len(ids)))


def prompts_tensor(prompts: Sequence[Prompt]) -> torch.Tensor:
    """Stack prompts into a (batch, length) long tensor."""
    if len(prompts) == 0:
        return torch.zeros((0, PROMPT_LENGTH), dtype=torch.long)
    return torch.tensor([list(p) for p in prompts], dtype=torch.long)


@dataclass(frozen=True)
class ImageBatch:
    """Pixels in [0, 1] shaped (batch, channels, height, width) plus one prompt per image.

    ``ImageBatch.unchecked`` skips the pixel-range check; it is used only for
    perturbed inputs x + delta, which the watermark optimiser keeps unclamped.
    """

    pixels: torch.Tensor
    prompts: torch.Tensor
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-D (B, C, H, W), got shape {tuple(self.pixels.shape)}")
        prompts = torch.as_tensor(self.prompts, dtype=torch.long)
        if prompts.dim() != 2:
            raise ValueError(f"prompts must be 2-D (B, L), got shape {tuple(prompts.shape)}")
        object.__setattr__(self, "prompts", prompts)
        if prompts.shape[0] != self.pixels.shape[0]:
            raise ValueError(
                f"Batch size mismatch: {self.pixels.shape[0]} images, {prompts.shape[0]} prompts"
            )
        if self.checked and self.pixels.numel():
            lo, hi = float(self.pixels.min()), float(self.pixels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"Pixel values must lie in [0, 1], got range [{lo:.4f}, {hi:.4f}]")

    @classmethod
    def unchecked(cls, pixels: torch.Tensor, prompts: torch.Tensor) -> "ImageBatch":
        return cls(pixels, prompts, checked=False)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def subset(self, index) -> "ImageBatch":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageBatch(self.pixels[index], self.prompts[index], checked=self.checked)

    @staticmethod
    def concat(batches: Sequence["ImageBatch"]) -> "ImageBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("Nothing to concatenate")
        return ImageBatch(
            torch.cat([b.pixels for b in batches]),
            torch.cat([b.prompts for b in batches]),
            checked=all(b.checked for b in batches),
        )


# ── Networks ──────────────────────────────────────────────────────


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConvBlock(nn.Module):
    """Two 3x3 convs with GroupNorm, SiLU and an additive embedding bias."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Conv encoder-decoder (2 down / 2 up) predicting the added noise."""

    def __init__(
        self,
        channels: int = IMAGE_SHAPE[0],
        base: int = DENOISER_BASE_CHANNELS,
        time_dim: int = TIME_EMBED_DIM,
        cond_dim: int = COND_EMBED_DIM,
    ):
        super().__init__()
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.cond_proj = nn.Linear(cond_dim, time_dim)
        self.inc = nn.Conv2d(channels, base, 3, padding=1)
        self.enc1 = ConvBlock(base, base, time_dim)
        self.down1 = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.enc2 = ConvBlock(2 * base, 2 * base, time_dim)
        self.down2 = nn.Conv2d(2 * base, 2 * base, 3, stride=2, padding=1)
        self.mid = ConvBlock(2 * base, 2 * base, time_dim)
        self.up2 = nn.Conv2d(2 * base, 2 * base, 3, padding=1)
        self.dec2 = ConvBlock(4 * base, 2 * base, time_dim)
        self.up1 = nn.Conv2d(2 * base, base, 3, padding=1)
        self.dec1 = ConvBlock(2 * base, base, time_dim)
        self.out = nn.Conv2d(base, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = timestep_embedding(t, self.time_dim).to(x.dtype)
        emb = self.time_mlp(temb) + self.cond_proj(cond.to(x.dtype))
        h0 = self.inc(x)
        h1 = self.enc1(h0, emb)
        h2 = self.enc2(self.down1(h1), emb)
        m = self.mid(self.down2(h2), emb)
        u2 = self.up2(F.interpolate(m, scale_factor=2, mode="nearest"))
        d2 = self.dec2(torch.cat([u2, h2], dim=1), emb)
        u1 = self.up1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        d1 = self.dec1(torch.cat([u1, h1], dim=1), emb)
        return self.out(d1)


class ConditionEmbedder(nn.Module):
    """Token embedding table; a prompt embeds as the mean of its non-pad rows."""

    def __init__(self, vocab_size: int = DEFAULT_VOCAB_SIZE, dim: int = COND_EMBED_DIM):
        super().__init__()
        self.table = nn.Embedding(vocab_size, dim)

    @property
    def vocab_size(self) -> int:
        return int(self.table.num_embeddings)

    def forward(self, prompts: torch.Tensor) -> torch.Tensor:
        if prompts.numel() and (int(prompts.max()) >= self.vocab_size or int(prompts.min()) < 0):
            raise ValueError(f"Prompt token outside embedding table of size {self.vocab_size}")
        mask = (prompts != PAD_TOKEN).unsqueeze(-1)
        rows = self.table(prompts) * mask.to(self.table.weight.dtype)
        count = mask.sum(dim=1).clamp(min=1).to(rows.dtype)
        return rows.sum(dim=1) / count


class DiffusionModel(nn.Module):
    """Denoiser (theta1) + condition embedder (theta2) + noise schedule."""

    def __init__(
        self,
        denoiser: nn.Module,
        embedder: nn.Module,
        schedule: NoiseSchedule,
        image_shape: tuple[int, int, int] = IMAGE_SHAPE,
        config: Optional[dict] = None,
    ):
        super().__init__()
        self.denoiser = denoiser
        self.embedder = embedder
        self.schedule = schedule
        self.image_shape = tuple(image_shape)
        self.config = dict(config or {})

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
        cond = self.embedder(prompts)
        return self.denoiser(x_t, t, cond)


def build_model(
    seed: int = 0,
    image_shape: tuple[int, int, int] = IMAGE_SHAPE,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    base_channels: int = DENOISER_BASE_CHANNELS,
    time_dim: int = TIME_EMBED_DIM,
    cond_dim: int = COND_EMBED_DIM,
    schedule: Optional[NoiseSchedule] = None,
) -> DiffusionModel:
    """Build a freshly initialised conditional diffusion model (deterministic per seed)."""
    c, h, w = image_shape
    if h % 4 or w % 4:
        raise ValueError(f"Image height/width must be divisible by 4, got {h}x{w}")
    schedule = schedule or linear_schedule()
    with seeded_init(seed):
        denoiser = Denoiser(c, base_channels, time_dim, cond_dim)
        embedder = ConditionEmbedder(vocab_size, cond_dim)
    config = {
        "image_shape": list(image_shape),
        "vocab_size": vocab_size,
        "base_channels": base_channels,
        "time_dim": time_dim,
        "cond_dim": cond_dim,
        "init_seed": seed,
    }
    return DiffusionModel(denoiser, embedder, schedule, image_shape, config)


def clone_model(model: DiffusionModel) -> DiffusionModel:
    """Deep copy: numerically equal, independently mutable parameters."""
    return copy.deepcopy(model)


def parameter_groups(model: DiffusionModel) -> dict[str, dict[str, nn.Parameter]]:
    """Split parameters into theta1 (denoiser), theta2 (embedder) and lora (adapters)."""
    groups = {"theta1": {}, "theta2": {}, "lora": {}}
    for name, p in model.denoiser.named_parameters():
        groups["lora" if "lora_" in name else "theta1"][name] = p
    for name, p in model.embedder.named_parameters():
        groups["theta2"][name] = p
    return groups


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _model_dtype(model: nn.Module) -> torch.dtype:
    for p in model.parameters():
        return p.dtype
    return torch.float32


def _normalise_groups(wrt: Union[str, Sequence[str]]) -> tuple[str, ...]:
    groups = (wrt,) if isinstance(wrt, str) else tuple(wrt)
    unknown = [g for g in groups if g not in PARAMETER_GROUPS]
    if unknown or not groups:
        raise ValueError(f"Unknown parameter group(s) {unknown or groups}; choose from {PARAMETER_GROUPS}")
    return groups


# ── Forward process ───────────────────────────────────────────────


def diffuse_closed_form(x0: torch.Tensor, alpha_bar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps with per-sample alpha_bar."""
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    ab = torch.as_tensor(alpha_bar, dtype=torch.float64).reshape(-1)
    if ab.numel() == 1 and x0.shape[0] != 1:
        ab = ab.expand(x0.shape[0])
    if ab.numel() != x0.shape[0]:
        raise ValueError(f"Need one alpha-bar per sample, got {ab.numel()} for batch {x0.shape[0]}")
    view = (-1,) + (1,) * (x0.dim() - 1)
    a = torch.sqrt(ab).to(x0.dtype).view(view)
    s = torch.sqrt(1.0 - ab).to(x0.dtype).view(view)
    return a * x0 + s * eps


def forward_diffuse(
    x0: torch.Tensor,
    t: Union[int, torch.Tensor],
    eps: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """
    Noise a clean batch to step t.

    Args:
        x0: Clean pixels (B, C, H, W)
        t: Step index per sample (or a single int for the whole batch), in [0, T)
        eps: Standard-normal noise, same shape as x0
        schedule: Noise schedule

    Returns:
        x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
    """
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match x0 shape {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and x0.shape[0] != 1:
        t = t.expand(x0.shape[0])
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
        raise ValueError(f"Timestep out of range [0, {schedule.T}): {t.tolist()}")
    return diffuse_closed_form(x0, schedule.alpha_bars[t], eps)


def draw_noise(
    seed: int,
    shape: Sequence[int],
    T: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One (t, eps) draw per image: t uniform on [0, T), eps standard normal.

    t is drawn first, then eps, from a single generator seeded with ``seed``.
    """
    gen = make_generator(seed)
    t = torch.randint(0, T, (int(shape[0]),), generator=gen)
    eps = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    return t, eps


# ── Loss and gradients ────────────────────────────────────────────


def _raise_non_finite(model: DiffusionModel, what: str) -> None:
    offending = "activations"
    for group, params in parameter_groups(model).items():
        if any(not bool(torch.isfinite(p).all()) for p in params.values()):
            offending = group
            break
    raise NumericError(f"Non-finite {what}", {"group": offending})


def _loss_from_pixels(model: DiffusionModel, pixels: torch.Tensor, prompts: torch.Tensor, seed: int) -> torch.Tensor:
    if pixels.shape[0] == 0:
        raise ValueError("ldm loss needs a nonempty batch")
    t, eps = draw_noise(seed, pixels.shape, model.schedule.T, pixels.dtype)
    x_t = forward_diffuse(pixels, t, eps, model.schedule)
    pred = model(x_t, t, prompts)
    if pred.shape != eps.shape:
        raise ValueError(f"Denoiser output shape {tuple(pred.shape)} != noise shape {tuple(eps.shape)}")
    if not bool(torch.isfinite(pred).all()):
        _raise_non_finite(model, "denoiser output")
    loss = torch.linalg.vector_norm((eps - pred).flatten(1), ord=2, dim=1).mean()
    if not bool(torch.isfinite(loss)):
        _raise_non_finite(model, "loss")
    return loss


def ldm_loss(model: DiffusionModel, batch: ImageBatch, seed: int) -> torch.Tensor:
    """
    Monte-Carlo noise-prediction loss: mean over the batch of ||eps - eps_theta(x_t, t, c)||_2.

    One (t, eps) draw per image per call, fixed by ``seed``. Returns a scalar
    tensor attached to the autograd graph.
    """
    return _loss_from_pixels(model, batch.pixels, batch.prompts, seed)


@contextmanager
def _only_grad_for(model: nn.Module, selected: Sequence[torch.Tensor]):
    """Temporarily enable grad on the selected parameters only."""
    saved = [(p, p.requires_grad) for p in model.parameters()]
    selected_ids = {id(p) for p in selected}
    try:
        for p, _ in saved:
            p.requires_grad_(id(p) in selected_ids)
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def _group_gradients(
    model: DiffusionModel,
    batch: ImageBatch,
    groups: Sequence[str],
    seed: int,
) -> tuple[torch.Tensor, dict[str, dict[str, torch.Tensor]]]:
    all_groups = parameter_groups(model)
    named = [(g, n, p) for g in groups for n, p in all_groups[g].items()]
    params = [p for _, _, p in named]
    with _only_grad_for(model, params):
        loss = _loss_from_pixels(model, batch.pixels, batch.prompts, seed)
        grads = torch.autograd.grad(loss, params, allow_unused=True) if params else ()
    out: dict[str, dict[str, torch.Tensor]] = {g: {} for g in groups}
    for (g, n, p), grad in zip(named, grads):
        out[g][n] = torch.zeros_like(p) if grad is None else grad.detach()
    return loss.detach(), out


def grad_ldm(
    model: DiffusionModel,
    batch: ImageBatch,
    wrt: str,
    seed: int,
) -> Union[torch.Tensor, dict[str, torch.Tensor]]:
    """
    Gradient of the same loss realisation ldm_loss computes for ``seed``.

    Args:
        wrt: "theta1", "theta2", "lora" (returns {param_name: grad}) or
            "input" (returns a tensor shaped like the pixels)
    """
    if wrt == "input":
        pixels = batch.pixels.detach().clone().requires_grad_(True)
        with _only_grad_for(model, []):
            loss = _loss_from_pixels(model, pixels, batch.prompts, seed)
            (grad,) = torch.autograd.grad(loss, [pixels], allow_unused=True)
        return torch.zeros_like(pixels) if grad is None else grad.detach()
    _normalise_groups(wrt)
    _, grads = _group_gradients(model, batch, (wrt,), seed)
    return grads[wrt]


def finetune_step(
    model: DiffusionModel,
    batch: ImageBatch,
    lr: float,
    wrt: Union[str, Sequence[str]],
    seed: int,
) -> DiffusionModel:
    """
    One plain gradient-descent step on the selected parameter groups, in place.

    Parameters outside ``wrt`` are not touched. Returns the same model object.
    """
    if lr < 0:
        raise ValueError(f"Learning rate must be non-negative, got {lr}")
    groups = _normalise_groups(wrt)
    if lr == 0:
        return model
    loss, grads = _group_gradients(model, batch, groups, seed)
    all_groups = parameter_groups(model)
    with torch.no_grad():
        for g in groups:
            for name, grad in grads[g].items():
                all_groups[g][name].add_(grad, alpha=-lr)
    logger.debug("finetune_step groups=%s loss=%.6f", groups, float(loss))
    return model


# ── Sampling ──────────────────────────────────────────────────────


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending respaced timestep sequence of length ``steps`` ending at 0."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) cannot exceed the schedule length T={T}")
    seq = torch.linspace(T - 1, 0, steps, dtype=torch.float64).round().long().tolist()
    return [int(s) for s in seq]


@torch.no_grad()
def sample(
    model: DiffusionModel,
    prompt: Union[Prompt, torch.Tensor],
    n: int,
    steps: int,
    seed: int,
) -> ImageBatch:
    """
    Ancestral DDPM sampling over a respaced schedule; outputs clamped to [0, 1].

    Args:
        prompt: One prompt shared by all n samples
        n: Number of images
        steps: Denoising steps (<= T)
        seed: Seeds the initial noise and every ancestral draw
    """
    T = model.schedule.T
    seq = sampling_timesteps(T, steps)
    prompt_row = torch.as_tensor(prompt, dtype=torch.long).reshape(1, -1)
    prompts = prompt_row.expand(n, -1).clone()
    dtype = _model_dtype(model)
    c, h, w = model.image_shape
    if n == 0:
        return ImageBatch(torch.zeros((0, c, h, w), dtype=dtype), prompts)

    was_training = model.training
    model.eval()
    ab = model.schedule.alpha_bars
    gen = make_generator(seed)
    x = torch.randn((n, c, h, w), generator=gen, dtype=dtype)
    try:
        for k, t in enumerate(seq):
            prev = seq[k + 1] if k + 1 < len(seq) else None
            ab_t = ab[t]
            ab_prev = ab[prev] if prev is not None else torch.tensor(1.0, dtype=torch.float64)
            beta = 1.0 - ab_t / ab_prev
            alpha = 1.0 - beta
            t_vec = torch.full((n,), t, dtype=torch.long)
            eps = model(x, t_vec, prompts)
            if not bool(torch.isfinite(eps).all()):
                _raise_non_finite(model, "denoiser output during sampling")
            coef = (beta / torch.sqrt(1.0 - ab_t)).to(dtype)
            x = (x - coef * eps) / torch.sqrt(alpha).to(dtype)
            if prev is not None:
                var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
                x = x + torch.sqrt(var).to(dtype) * torch.randn(x.shape, generator=gen, dtype=dtype)
    finally:
        model.train(was_training)
    return ImageBatch(x.clamp(0.0, 1.0), prompts)


# ── Persistence ───────────────────────────────────────────────────


def model_state(model: DiffusionModel) -> dict[str, dict[str, np.ndarray]]:
    """Parameter groups as numpy arrays (empty groups dropped)."""
    return {
        group: {name: p.detach().cpu().numpy().astype(np.float32) for name, p in params.items()}
        for group, params in parameter_groups(model).items()
        if params
    }


def save_model(model: DiffusionModel, directory: str, extra: Optional[dict] = None) -> dict:
    """Write a model checkpoint (manifest.json + one blob per parameter group)."""
    if not model.config:
        raise ValueError("Only models created by build_model can be saved")
    metadata = {
        "kind": "diffusion_model",
        "architecture": model.config,
        "schedule": {"T": model.schedule.T, "betas": model.schedule.betas.tolist()},
        "image_shape": list(model.image_shape),
        "parameter_groups": [g for g in PARAMETER_GROUPS if parameter_groups(model)[g]],
        **(extra or {}),
    }
    return tensor_io.save_checkpoint(directory, model_state(model), metadata)


def load_model(directory: str) -> DiffusionModel:
    """Rebuild a model from a checkpoint written by save_model."""
    manifest, groups = tensor_io.load_checkpoint(directory)
    arch = manifest["architecture"]
    model = build_model(
        seed=arch.get("init_seed", 0),
        image_shape=tuple(arch["image_shape"]),
        vocab_size=arch["vocab_size"],
        base_channels=arch["base_channels"],
        time_dim=arch["time_dim"],
        cond_dim=arch["cond_dim"],
        schedule=NoiseSchedule(torch.tensor(manifest["schedule"]["betas"], dtype=torch.float64)),
    )
    lora_cfg = arch.get("lora")
    if lora_cfg:
        from engine.finetune import inject_lora

        inject_lora(model, rank=lora_cfg["rank"], alpha=lora_cfg["alpha"],
                    targets=tuple(lora_cfg["targets"]), seed=lora_cfg.get("seed", 0))
    current = parameter_groups(model)
    with torch.no_grad():
        for group, params in groups.items():
            for name, value in params.items():
                if name not in current[group]:
                    raise ValueError(f"Checkpoint parameter {group}/{name} has no slot in the model")
                current[group][name].copy_(torch.from_numpy(np.array(value)))
    return model
