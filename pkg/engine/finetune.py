"""
SEAL Fine-Tuning Suite
Desk-scale analogs of the four fine-tuning methods an offender might apply to
released images, plus generation of evaluation images from the tuned models.

Update footprint per method:
  FULL_FT                  denoiser (theta1)
  DREAMBOOTH_LIKE          denoiser + condition embedding table
  TEXTUAL_INVERSION_LIKE   the identifier token's embedding row only
  LORA_LIKE                low-rank adapters on the middle blocks only
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config.parameters import (
    METHOD_KINDS,
    FINETUNE_BASE_STEPS,
    FINETUNE_LR,
    FINETUNE_BATCH_SIZE,
    SCALE_FACTOR,
    LORA_RANK,
    LORA_TARGET_PREFIXES,
    IDENTIFIER_TOKEN,
    PAD_TOKEN,
    PRIOR_PRESERVATION,
    PRIOR_LOSS_WEIGHT,
    SAMPLING_STEPS,
)
from engine.diffusion import (
    DiffusionModel,
    ImageBatch,
    clone_model,
    ldm_loss,
    load_model,
    parameter_groups,
    sample,
    save_model,
)
from engine.errors import DataError, NumericError
from engine.seeds import derive_seed, make_generator, seeded_init

logger = logging.getLogger(__name__)

FINETUNE_SIDECAR = "finetune.json"


@dataclass(frozen=True)
class FineTuneMethod:
    kind: str
    lr: float
    max_steps: int
    batch_size: int
    lora_rank: int = LORA_RANK
    lora_alpha: Optional[float] = None
    lora_targets: tuple[str, ...] = LORA_TARGET_PREFIXES
    identifier_token: int = IDENTIFIER_TOKEN
    prior_preservation: bool = PRIOR_PRESERVATION
    prior_loss_weight: float = PRIOR_LOSS_WEIGHT

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"Unknown fine-tuning method {self.kind!r}; choose from {METHOD_KINDS}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lora_rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {self.lora_rank}")
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FineTuneMethod":
        d = dict(d)
        d["lora_targets"] = tuple(d.get("lora_targets", LORA_TARGET_PREFIXES))
        return cls(**d)


def default_method(kind: str, scale: float = SCALE_FACTOR, **overrides) -> FineTuneMethod:
    """Method with desk-scale defaults; step counts keep the published ratios."""
    if kind not in METHOD_KINDS:
        raise ValueError(f"Unknown fine-tuning method {kind!r}; choose from {METHOD_KINDS}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    params = {
        "kind": kind,
        "lr": FINETUNE_LR[kind],
        "max_steps": max(1, int(round(FINETUNE_BASE_STEPS[kind] * scale))),
        "batch_size": FINETUNE_BATCH_SIZE[kind],
    }
    params.update(overrides)
    return FineTuneMethod(**params)


# ── LoRA adapters ─────────────────────────────────────────────────


class _LoRABase(nn.Module):
    """Frozen base weight plus trainable up @ down, merged on the fly."""

    def _init_adapter(self, weight: nn.Parameter, bias, rank: int, alpha: Optional[float]):
        d_out = weight.shape[0]
        d_in = int(np.prod(weight.shape[1:]))
        if rank > min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} exceeds min(d_in={d_in}, d_out={d_out})")
        self.weight = weight
        self.bias = bias
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        self.lora_down = nn.Parameter(torch.empty(rank, d_in, dtype=weight.dtype))
        self.lora_up = nn.Parameter(torch.zeros(d_out, rank, dtype=weight.dtype))
        nn.init.kaiming_uniform_(self.lora_down, a=5 ** 0.5)

    def merged_weight(self) -> torch.Tensor:
        delta = (self.lora_up @ self.lora_down).view_as(self.weight)
        return self.weight + self.scale * delta


class LoRAConv2d(_LoRABase):
    def __init__(self, conv: nn.Conv2d, rank: int, alpha: Optional[float] = None):
        super().__init__()
        self._init_adapter(conv.weight, conv.bias, rank, alpha)
        self.stride, self.padding = conv.stride, conv.padding
        self.dilation, self.groups = conv.dilation, conv.groups

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.merged_weight(), self.bias, self.stride, self.padding, self.dilation, self.groups)

    def to_plain(self) -> nn.Conv2d:
        out_ch, in_per_group, kh, kw = self.weight.shape
        conv = nn.Conv2d(in_per_group * self.groups, out_ch, (kh, kw), self.stride, self.padding,
                         self.dilation, self.groups, bias=self.bias is not None).to(self.weight.dtype)
        with torch.no_grad():
            conv.weight.copy_(self.merged_weight())
            if self.bias is not None:
                conv.bias.copy_(self.bias)
        return conv


class LoRALinear(_LoRABase):
    def __init__(self, linear: nn.Linear, rank: int, alpha: Optional[float] = None):
        super().__init__()
        self._init_adapter(linear.weight, linear.bias, rank, alpha)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.merged_weight(), self.bias)

    def to_plain(self) -> nn.Linear:
        d_out, d_in = self.weight.shape
        linear = nn.Linear(d_in, d_out, bias=self.bias is not None).to(self.weight.dtype)
        with torch.no_grad():
            linear.weight.copy_(self.merged_weight())
            if self.bias is not None:
                linear.bias.copy_(self.bias)
        return linear


def _replace_module(root: nn.Module, name: str, new: nn.Module) -> None:
    parent_name, _, child_name = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, child_name, new)


def inject_lora(
    model: DiffusionModel,
    rank: int = LORA_RANK,
    alpha: Optional[float] = None,
    targets: Sequence[str] = LORA_TARGET_PREFIXES,
    seed: int = 0,
) -> list[str]:
    """
    Wrap every conv/linear layer of the denoiser whose name starts with one of
    ``targets`` in a LoRA adapter, in place. Returns the adapted layer names.
    """
    if any(isinstance(m, _LoRABase) for m in model.denoiser.modules()):
        raise ValueError("Model already carries LoRA adapters")
    names = [
        name for name, module in model.denoiser.named_modules()
        if isinstance(module, (nn.Conv2d, nn.Linear)) and any(name.startswith(t) for t in targets)
    ]
    if not names:
        raise ValueError(f"No conv/linear layers match LoRA targets {tuple(targets)}")
    with seeded_init(seed):
        for name in names:
            module = model.denoiser.get_submodule(name)
            wrapper = LoRAConv2d(module, rank, alpha) if isinstance(module, nn.Conv2d) else LoRALinear(module, rank, alpha)
            _replace_module(model.denoiser, name, wrapper)
    if model.config:
        model.config["lora"] = {"rank": rank, "alpha": alpha, "targets": list(targets), "seed": seed}
    logger.debug("Injected rank-%d LoRA into %d layers", rank, len(names))
    return names


def merge_lora(model: DiffusionModel) -> DiffusionModel:
    """Copy of the model with every adapter folded into a plain layer."""
    merged = clone_model(model)
    names = [n for n, m in merged.denoiser.named_modules() if isinstance(m, _LoRABase)]
    for name in names:
        _replace_module(merged.denoiser, name, merged.denoiser.get_submodule(name).to_plain())
    merged.config.pop("lora", None)
    return merged


def count_lora_parameters(model: DiffusionModel) -> int:
    return sum(p.numel() for p in parameter_groups(model)["lora"].values())


# ── Fine-tuning ───────────────────────────────────────────────────


@dataclass(frozen=True)
class FineTuneResult:
    model: DiffusionModel
    method: FineTuneMethod
    steps_run: int
    loss_trace: tuple[float, ...]
    seed: int
    watermarked: bool = False
    dataset_checksum: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "loss_trace", tuple(float(v) for v in self.loss_trace))
        if len(self.loss_trace) != self.steps_run:
            raise ValueError(f"Loss trace has {len(self.loss_trace)} entries for {self.steps_run} steps")

    @property
    def label(self) -> str:
        return f"{self.method.kind}:{'wm' if self.watermarked else 'clean'}"


def _strip_identifier(prompts: torch.Tensor, identifier: int) -> torch.Tensor:
    """Class prompts for prior preservation: identifier removed, rest left-packed."""
    rows = []
    for row in prompts.tolist():
        kept = [t for t in row if t not in (identifier, PAD_TOKEN)]
        rows.append(kept + [PAD_TOKEN] * (len(row) - len(kept)))
    return torch.tensor(rows, dtype=torch.long)


def _trainable_parameters(model: DiffusionModel, method: FineTuneMethod) -> list[nn.Parameter]:
    groups = parameter_groups(model)
    if method.kind == "FULL_FT":
        return list(groups["theta1"].values())
    if method.kind == "DREAMBOOTH_LIKE":
        return list(groups["theta1"].values()) + list(groups["theta2"].values())
    if method.kind == "TEXTUAL_INVERSION_LIKE":
        return [model.embedder.table.weight]
    return list(groups["lora"].values())


def finetune(
    base: DiffusionModel,
    images: torch.Tensor,
    prompts: torch.Tensor,
    method: FineTuneMethod,
    seed: int,
    watermarked: bool = False,
    dataset_checksum: Optional[str] = None,
    progress_callback: Optional[Callable[[int, str], None]] = None,
) -> FineTuneResult:
    """
    Fine-tune a private copy of ``base`` on (images, prompts) with fixed-lr Adam.

    Textual inversion trains the reserved identifier row already in the table;
    no row is appended, so the vocabulary size stays fixed.

    Args:
        base: Public model, never modified
        images: Released images (N, C, H, W), protected or clean
        prompts: One caption per image (N, L)
        method: Method kind and hyperparameters
        seed: Fixes batch order, loss draws and adapter init
        watermarked: Tag carried into the result (source identity)

    Returns:
        FineTuneResult with the tuned model and per-step loss trace.
    """
    data = ImageBatch(images, prompts)
    n = len(data)
    if n == 0:
        raise DataError("Cannot fine-tune on an empty dataset")

    model = clone_model(base)
    if method.kind == "TEXTUAL_INVERSION_LIKE":
        vocab = model.embedder.table.num_embeddings
        if not 0 <= method.identifier_token < vocab:
            raise ValueError(f"Identifier token {method.identifier_token} outside embedding table of size {vocab}")
        if not bool((data.prompts == method.identifier_token).any(dim=1).all()):
            raise ValueError("Textual inversion needs the identifier token in every caption")
    if method.kind == "LORA_LIKE":
        inject_lora(model, method.lora_rank, method.lora_alpha, method.lora_targets,
                    seed=derive_seed(seed, "lora-init"))

    prior = None
    if method.prior_preservation and method.kind == "DREAMBOOTH_LIKE":
        class_prompts = _strip_identifier(data.prompts[:1], method.identifier_token)
        prior = sample(base, class_prompts[0], n, SAMPLING_STEPS, derive_seed(seed, "prior"))

    trainable = _trainable_parameters(model, method)
    trainable_ids = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad_(id(p) in trainable_ids)
    optimizer = torch.optim.Adam(trainable, lr=method.lr)

    frozen_rows = None
    if method.kind == "TEXTUAL_INVERSION_LIKE":
        table = model.embedder.table.weight
        frozen_rows = torch.ones(table.shape[0], dtype=torch.bool)
        frozen_rows[method.identifier_token] = False
        frozen_values = table.detach()[frozen_rows].clone()

    gen = make_generator(derive_seed(seed, "batches"))
    bs = min(method.batch_size, n)
    trace = []
    for step in range(method.max_steps):
        idx = torch.randperm(n, generator=gen)[:bs]
        try:
            loss = ldm_loss(model, data.subset(idx), derive_seed(seed, "loss", step))
            if prior is not None:
                loss = loss + method.prior_loss_weight * ldm_loss(model, prior.subset(idx), derive_seed(seed, "prior-loss", step))
        except NumericError as exc:
            raise exc.with_context(method=method.kind, step=step) from exc
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if frozen_rows is not None:
            with torch.no_grad():
                model.embedder.table.weight[frozen_rows] = frozen_values
        trace.append(float(loss.detach()))
        if progress_callback and (step + 1) % max(1, method.max_steps // 10) == 0:
            progress_callback(step + 1, f"{method.kind} step {step + 1}/{method.max_steps} loss {trace[-1]:.4f}")

    for p in model.parameters():
        p.requires_grad_(True)
    logger.info("Fine-tuned %s for %d steps (loss %.4f -> %.4f)", method.kind, method.max_steps, trace[0], trace[-1])
    return FineTuneResult(model, method, method.max_steps, tuple(trace), seed, watermarked, dataset_checksum)


def _bitwise_changed(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a_bits = a.detach().contiguous().view(torch.int32) if a.dtype == torch.float32 else a.detach()
    b_bits = b.detach().contiguous().view(torch.int32) if b.dtype == torch.float32 else b.detach()
    return a_bits != b_bits


def verify_footprint(base: DiffusionModel, tuned: DiffusionModel, method: FineTuneMethod) -> dict:
    """
    Compare base and tuned parameters bitwise against the method's footprint.

    Returns:
        Dict with "ok", "changed_groups", "changed_params", "violations" and,
        for the embedding table, "changed_rows".
    """
    allowed = {
        "FULL_FT": {"theta1"},
        "DREAMBOOTH_LIKE": {"theta1", "theta2"},
        "TEXTUAL_INVERSION_LIKE": {"theta2"},
        "LORA_LIKE": {"lora"},
    }[method.kind]
    base_groups = parameter_groups(base)
    tuned_groups = parameter_groups(tuned)
    changed_params: dict[str, list[str]] = {}
    violations = []
    changed_rows: list[int] = []
    for group in ("theta1", "theta2"):
        for name, p in tuned_groups[group].items():
            if name not in base_groups[group]:
                violations.append(f"{group}/{name} not in base")
                continue
            mask = _bitwise_changed(base_groups[group][name], p)
            if not bool(mask.any()):
                continue
            changed_params.setdefault(group, []).append(name)
            if group == "theta2" and mask.dim() >= 1:
                changed_rows.extend(int(r) for r in torch.nonzero(mask.reshape(mask.shape[0], -1).any(dim=1)).flatten())
            if group not in allowed:
                violations.append(f"{group}/{name}")
    if tuned_groups["lora"]:
        changed_params["lora"] = sorted(tuned_groups["lora"])
        if "lora" not in allowed:
            violations.append("lora adapters present")
    if method.kind == "TEXTUAL_INVERSION_LIKE":
        extra_rows = [r for r in changed_rows if r != method.identifier_token]
        if extra_rows:
            violations.append(f"embedding rows {extra_rows} changed besides identifier {method.identifier_token}")
    return {
        "ok": not violations,
        "changed_groups": sorted(changed_params),
        "changed_params": changed_params,
        "changed_rows": sorted(set(changed_rows)),
        "violations": violations,
    }


# ── Evaluation sets ───────────────────────────────────────────────


@dataclass(frozen=True)
class EvalSet:
    """Generated images tagged with their source model."""

    images: torch.Tensor
    prompts: torch.Tensor
    method_kind: str
    watermarked: bool
    source: str = ""

    def __len__(self) -> int:
        return int(self.images.shape[0])


def generate_eval_set(
    result: FineTuneResult,
    prompts: Sequence,
    n_per_prompt: int,
    seed: int,
    steps: int = SAMPLING_STEPS,
) -> EvalSet:
    """n_per_prompt samples per prompt from the tuned model, tagged with method and watermark flag."""
    if len(prompts) == 0:
        raise ValueError("generate_eval_set needs at least one prompt")
    if n_per_prompt < 0:
        raise ValueError(f"n_per_prompt must be >= 0, got {n_per_prompt}")
    c, h, w = result.model.image_shape
    batches = [
        sample(result.model, p, n_per_prompt, steps, derive_seed(seed, "generate", i))
        for i, p in enumerate(prompts)
    ] if n_per_prompt else []
    batches = [b for b in batches if len(b)]
    if batches:
        images = torch.cat([b.pixels for b in batches])
        prompt_rows = torch.cat([b.prompts for b in batches])
    else:
        images = torch.zeros((0, c, h, w))
        prompt_rows = torch.zeros((0, len(prompts[0])), dtype=torch.long)
    return EvalSet(images, prompt_rows, result.method.kind, result.watermarked, result.label)


# ── Persistence ───────────────────────────────────────────────────


def save_finetune_result(result: FineTuneResult, directory: str) -> dict:
    """Checkpoint plus finetune.json sidecar."""
    save_model(result.model, directory, extra={"kind": "finetuned_model"})
    sidecar = {
        "method": result.method.to_dict(),
        "steps_run": result.steps_run,
        "seed": result.seed,
        "watermarked": result.watermarked,
        "dataset_checksum": result.dataset_checksum,
        "loss_trace": list(result.loss_trace),
    }
    with open(os.path.join(directory, FINETUNE_SIDECAR), "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar


def load_finetune_result(directory: str) -> FineTuneResult:
    path = os.path.join(directory, FINETUNE_SIDECAR)
    if not os.path.isfile(path):
        raise DataError(f"Fine-tune sidecar not found: {path}")
    with open(path) as f:
        sidecar = json.load(f)
    return FineTuneResult(
        model=load_model(directory),
        method=FineTuneMethod.from_dict(sidecar["method"]),
        steps_run=sidecar["steps_run"],
        loss_trace=tuple(sidecar["loss_trace"]),
        seed=sidecar["seed"],
        watermarked=sidecar["watermarked"],
        dataset_checksum=sidecar.get("dataset_checksum"),
    )
