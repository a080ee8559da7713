"""
SEAL Watermark Detector
Per-method expert classifiers, a gating classifier over fine-tuning methods,
and their softmax-weighted mixture:

    D(x) = sum_i softmax(G(x))_i * E_i(x)

Training is two-stage: experts first, then the gating model. Experts are never
touched again once trained, so adding a method only needs a new expert and a
new gating model.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config.parameters import (
    DETECTOR_LR,
    DETECTOR_WEIGHT_DECAY,
    DETECTOR_STEPS,
    DETECTOR_BATCH_SIZE,
    DETECTOR_CHANNELS,
    DETECTION_THRESHOLD,
    MAX_CLASS_IMBALANCE,
    HOLDOUT_FRACTION,
)
from engine.corruptions import AugmentationPolicy, augment_batch
from engine.errors import DataError, NumericError
from engine.seeds import derive_seed, make_generator, seeded_init
from engine import tensor_io

logger = logging.getLogger(__name__)

DETECTOR_SIDECAR = "detector.json"


@dataclass(frozen=True)
class DetectorHyper:
    lr: float = DETECTOR_LR
    weight_decay: float = DETECTOR_WEIGHT_DECAY
    steps: int = DETECTOR_STEPS
    batch_size: int = DETECTOR_BATCH_SIZE
    channels: tuple[int, ...] = DETECTOR_CHANNELS
    holdout_fraction: float = HOLDOUT_FRACTION

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"Invalid optimiser settings lr={self.lr}, weight_decay={self.weight_decay}")
        if self.steps < 1 or self.batch_size < 2:
            raise ValueError(f"Need steps >= 1 and batch_size >= 2, got {self.steps}, {self.batch_size}")
        if not self.channels:
            raise ValueError("Classifier needs at least one conv block")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError(f"holdout_fraction must lie in [0, 1), got {self.holdout_fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class ConvClassifier(nn.Module):
    """Stride-2 conv blocks, global average pool, linear head."""

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = DETECTOR_CHANNELS, n_out: int = 1):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(prev, n_out)
        self.n_out = n_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pool(self.features(x)).flatten(1)
        out = self.head(h)
        return out.squeeze(1) if self.n_out == 1 else out


def _check_resolution(images: torch.Tensor, image_shape: tuple) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if tuple(images.shape[1:]) != tuple(image_shape):
        raise ValueError(
            f"Image shape {tuple(images.shape[1:])} does not match detector resolution {tuple(image_shape)}"
        )
    return images


@dataclass(frozen=True)
class ExpertDetector:
    """Binary watermark classifier for one fine-tuning method."""

    network: nn.Module
    method_kind: str
    image_shape: tuple[int, int, int]
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy.disabled)
    report: dict = field(default_factory=dict)

    @torch.no_grad()
    def score(self, images: torch.Tensor) -> torch.Tensor:
        """Watermark probability per image, shape (N,)."""
        images = _check_resolution(images, self.image_shape)
        self.network.eval()
        logits = self.network(images.to(torch.float32)).reshape(images.shape[0], -1)[:, 0]
        return torch.sigmoid(logits)


@dataclass(frozen=True)
class GatingModel:
    """
    M-way method classifier.

    The network is trained over the canonical (sorted) method order; ``logits``
    permutes its outputs into ``methods`` order.
    """

    network: nn.Module
    methods: tuple[str, ...]
    image_shape: tuple[int, int, int]
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if len(set(self.methods)) != len(self.methods):
            raise ValueError(f"Duplicate methods in gating order {self.methods}")

    @property
    def canonical(self) -> tuple[str, ...]:
        return tuple(sorted(self.methods))

    @torch.no_grad()
    def logits(self, images: torch.Tensor) -> torch.Tensor:
        images = _check_resolution(images, self.image_shape)
        self.network.eval()
        raw = self.network(images.to(torch.float32)).reshape(images.shape[0], -1)
        if raw.shape[1] != len(self.methods):
            raise ValueError(f"Gating network gives {raw.shape[1]} logits for {len(self.methods)} methods")
        order = [self.canonical.index(m) for m in self.methods]
        return raw[:, order]

    def weights(self, images: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(images).to(torch.float64), dim=1)


@dataclass(frozen=True)
class MoEDetector:
    experts: tuple[ExpertDetector, ...]
    gating: Optional[GatingModel] = None
    threshold: float = DETECTION_THRESHOLD

    def __post_init__(self):
        experts = tuple(self.experts)
        object.__setattr__(self, "experts", experts)
        if not experts:
            raise ValueError("MoEDetector needs at least one expert")
        methods = tuple(e.method_kind for e in experts)
        if len(set(methods)) != len(methods):
            raise ValueError(f"Duplicate expert methods {methods}")
        if len(experts) > 1:
            if self.gating is None:
                raise ValueError(f"{len(experts)} experts need a gating model")
            if self.gating.methods != methods:
                raise ValueError(f"Gating order {self.gating.methods} does not match experts {methods}")
        if not 0 <= self.threshold <= 1:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(e.method_kind for e in self.experts)

    @property
    def image_shape(self) -> tuple:
        return self.experts[0].image_shape


# ── Training ──────────────────────────────────────────────────────


def _split(n: int, fraction: float, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    perm = torch.randperm(n, generator=make_generator(seed))
    n_hold = int(n * fraction) if n >= 2 else 0
    return perm[n_hold:], perm[:n_hold]


def _draw(pool: torch.Tensor, k: int, gen: torch.Generator) -> torch.Tensor:
    idx = torch.randint(0, pool.shape[0], (k,), generator=gen)
    return pool[idx]


def _balanced_accuracy(scores: torch.Tensor, labels: torch.Tensor, threshold: float) -> float:
    pred = scores >= threshold
    pos, neg = labels == 1, labels == 0
    parts = []
    if pos.any():
        parts.append(float(pred[pos].float().mean()))
    if neg.any():
        parts.append(float((~pred[neg]).float().mean()))
    return float(np.mean(parts)) if parts else float("nan")


def _pool_shape(pools: Sequence[torch.Tensor]) -> tuple:
    shapes = {tuple(p.shape[1:]) for p in pools if p.shape[0]}
    if len(shapes) != 1:
        raise DataError(f"Training images must share one resolution, got {sorted(shapes)}")
    return shapes.pop()


def train_expert(
    clean_images: torch.Tensor,
    wm_images: torch.Tensor,
    gen_clean: torch.Tensor,
    gen_wm: torch.Tensor,
    policy: AugmentationPolicy,
    hyper: DetectorHyper,
    seed: int,
    method_kind: str = "FULL_FT",
    ablation: bool = False,
) -> ExpertDetector:
    """
    Train one expert with binary cross-entropy.

    Positives are watermarked originals plus generations of the watermark-tuned
    model; negatives are clean originals plus generations of the clean-tuned
    model. Generated and original images are mixed 1:1 within each class.

    Args:
        ablation: Allow empty generated sets (originals-only training)

    Returns:
        Frozen ExpertDetector whose report holds train / held-out accuracy.
    """
    if clean_images.shape[0] == 0 or wm_images.shape[0] == 0:
        raise DataError(f"{method_kind}: expert training needs clean and watermarked originals")
    if not ablation and (gen_clean.shape[0] == 0 or gen_wm.shape[0] == 0):
        raise DataError(f"{method_kind}: generated image sets are missing; run simulate-offender first")
    pools = {"clean": clean_images, "wm": wm_images, "gen_clean": gen_clean, "gen_wm": gen_wm}
    image_shape = _pool_shape(list(pools.values()))

    train, hold = {}, {}
    for name, pool in pools.items():
        tr, ho = _split(pool.shape[0], hyper.holdout_fraction, derive_seed(seed, "split", name))
        train[name], hold[name] = pool[tr], pool[ho]

    report = {"method": method_kind, "counts": {k: int(v.shape[0]) for k, v in pools.items()}, "warnings": []}
    n_pos = pools["wm"].shape[0] + pools["gen_wm"].shape[0]
    n_neg = pools["clean"].shape[0] + pools["gen_clean"].shape[0]
    imbalance = max(n_pos, n_neg) / max(1, min(n_pos, n_neg))
    if imbalance > MAX_CLASS_IMBALANCE:
        message = f"class imbalance {imbalance:.1f}:1 exceeds {MAX_CLASS_IMBALANCE:.0f}:1 ({n_pos} pos / {n_neg} neg)"
        logger.warning("%s: %s", method_kind, message)
        report["warnings"].append(message)

    with seeded_init(derive_seed(seed, "init", "expert")):
        network = ConvClassifier(image_shape[0], hyper.channels, n_out=1)
    optimizer = torch.optim.AdamW(network.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    gen = make_generator(derive_seed(seed, "batches", method_kind))
    quarter = max(1, hyper.batch_size // 4)
    use_generated = train["gen_clean"].shape[0] > 0 and train["gen_wm"].shape[0] > 0

    network.train()
    for step in range(hyper.steps):
        parts, labels = [], []
        for orig, generated, label in (("wm", "gen_wm", 1.0), ("clean", "gen_clean", 0.0)):
            if use_generated:
                parts += [_draw(train[orig], quarter, gen), _draw(train[generated], quarter, gen)]
                labels += [label] * (2 * quarter)
            else:
                parts.append(_draw(train[orig], 2 * quarter, gen))
                labels += [label] * (2 * quarter)
        x = augment_batch(torch.cat(parts).to(torch.float32), policy, derive_seed(seed, "aug", step))
        y = torch.tensor(labels, dtype=torch.float32)
        loss = F.binary_cross_entropy_with_logits(network(x), y)
        if not bool(torch.isfinite(loss)):
            raise NumericError("Non-finite expert loss", {"method": method_kind, "step": step})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if (step + 1) % max(1, hyper.steps // 5) == 0:
            logger.debug("%s expert step %d loss %.4f", method_kind, step + 1, float(loss))

    for p in network.parameters():
        p.requires_grad_(False)
    network.eval()
    expert = ExpertDetector(network, method_kind, image_shape, policy, report)

    def accuracy(split: dict) -> Optional[float]:
        names = ["wm", "clean"] + (["gen_wm", "gen_clean"] if use_generated else [])
        imgs = [split[n] for n in names if split[n].shape[0]]
        labs = [torch.full((split[n].shape[0],), 1 if "wm" in n else 0) for n in names if split[n].shape[0]]
        if not imgs:
            return None
        return _balanced_accuracy(expert.score(torch.cat(imgs)), torch.cat(labs), DETECTION_THRESHOLD)

    report["train_accuracy"] = accuracy(train)
    report["holdout_accuracy"] = accuracy(hold)
    report["steps"] = hyper.steps
    report["ablation"] = bool(ablation or not use_generated)
    report["training_checksums"] = {k: tensor_io.array_checksum(v.numpy()) for k, v in pools.items()}
    logger.info("Expert %s trained: train acc %.3f, held-out acc %s", method_kind,
                report["train_accuracy"], report["holdout_accuracy"])
    return expert


def train_gating(
    generated_sets: Mapping[str, torch.Tensor],
    hyper: DetectorHyper,
    seed: int,
) -> GatingModel:
    """
    Train the M-way method classifier on per-method generations (stage two).

    ``generated_sets`` maps method kind -> images; its iteration order becomes
    the gating output order. Training itself is order independent.
    """
    methods = tuple(generated_sets)
    if len(methods) < 2:
        raise ValueError(
            f"Gating needs at least 2 methods, got {len(methods)}; use detect_specific for a single method"
        )
    empty = [m for m in methods if generated_sets[m].shape[0] == 0]
    if empty:
        raise DataError(f"No generated images for method(s) {empty}")
    canonical = tuple(sorted(methods))
    image_shape = _pool_shape([generated_sets[m] for m in canonical])

    train, hold = [], []
    for m in canonical:
        tr, ho = _split(generated_sets[m].shape[0], hyper.holdout_fraction, derive_seed(seed, "gating-split", m))
        train.append(generated_sets[m][tr])
        hold.append(generated_sets[m][ho])

    with seeded_init(derive_seed(seed, "init", "gating")):
        network = ConvClassifier(image_shape[0], hyper.channels, n_out=len(canonical))
    optimizer = torch.optim.AdamW(network.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    gen = make_generator(derive_seed(seed, "gating-batches"))
    per_class = max(1, hyper.batch_size // len(canonical))

    network.train()
    for step in range(hyper.steps):
        x = torch.cat([_draw(pool, per_class, gen) for pool in train]).to(torch.float32)
        y = torch.arange(len(canonical)).repeat_interleave(per_class)
        loss = F.cross_entropy(network(x), y)
        if not bool(torch.isfinite(loss)):
            raise NumericError("Non-finite gating loss", {"step": step})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    for p in network.parameters():
        p.requires_grad_(False)
    network.eval()
    gating = GatingModel(network, methods, image_shape)

    def accuracy(pools: list[torch.Tensor]) -> Optional[float]:
        pairs = [(p, i) for i, p in enumerate(pools) if p.shape[0]]
        if not pairs:
            return None
        with torch.no_grad():
            per_method = [
                float((network(p.to(torch.float32)).reshape(p.shape[0], -1).argmax(1) == i).float().mean())
                for p, i in pairs
            ]
        return float(np.mean(per_method))

    gating.report.update({
        "methods": list(methods),
        "train_accuracy": accuracy(train),
        "holdout_accuracy": accuracy(hold),
        "counts": {m: int(generated_sets[m].shape[0]) for m in methods},
        "training_checksums": {m: tensor_io.array_checksum(generated_sets[m].numpy()) for m in methods},
    })
    logger.info("Gating over %s trained: held-out acc %s", list(methods), gating.report["holdout_accuracy"])
    return gating


# ── Inference ─────────────────────────────────────────────────────


def detect_details(moe: MoEDetector, images: torch.Tensor) -> dict:
    """
    Per-image gating weights, expert scores and mixture score.

    Returns:
        {"methods", "weights" (N, M), "expert_scores" (N, M), "score" (N,)}
    """
    images = _check_resolution(images, moe.image_shape)
    # experts are evaluated one at a time
    expert_scores = torch.stack([e.score(images).to(torch.float64) for e in moe.experts], dim=1)
    if len(moe.experts) == 1:
        weights = torch.ones_like(expert_scores)
        score = expert_scores[:, 0]
    else:
        weights = moe.gating.weights(images)
        score = (weights * expert_scores).sum(dim=1)
    return {"methods": list(moe.methods), "weights": weights, "expert_scores": expert_scores, "score": score}


def detect(moe: MoEDetector, images: torch.Tensor) -> Union[float, torch.Tensor]:
    """Mixture score in [0, 1]: a float for one (C, H, W) image, a (N,) tensor for a batch."""
    scores = detect_details(moe, images)["score"]
    return float(scores[0]) if images.dim() == 3 else scores


def detect_specific(expert: ExpertDetector, images: torch.Tensor) -> Union[float, torch.Tensor]:
    """Score with the expert tailored to a known fine-tuning method."""
    scores = expert.score(images)
    return float(scores[0]) if images.dim() == 3 else scores


def add_expert(moe: MoEDetector, expert: ExpertDetector, gating: GatingModel) -> MoEDetector:
    """New mixture with one more expert; existing experts are reused as-is."""
    if expert.method_kind in moe.methods:
        raise ValueError(f"Detector already has an expert for {expert.method_kind}")
    if tuple(expert.image_shape) != tuple(moe.image_shape):
        raise ValueError(f"Expert resolution {expert.image_shape} differs from {moe.image_shape}")
    return MoEDetector(moe.experts + (expert,), gating, moe.threshold)


# ── Persistence ───────────────────────────────────────────────────


def _network_groups(network: nn.Module) -> dict:
    return {"classifier": {k: v.detach().cpu().numpy() for k, v in network.state_dict().items()}}


def _restore_network(network: nn.Module, groups: dict) -> nn.Module:
    state = {k: torch.from_numpy(np.array(v)) for k, v in groups["classifier"].items()}
    network.load_state_dict(state)
    for p in network.parameters():
        p.requires_grad_(False)
    return network.eval()


def _infer_channels(groups: dict) -> tuple[int, ...]:
    convs = sorted(
        (int(k.split(".")[1]), v.shape[0]) for k, v in groups["classifier"].items()
        if k.startswith("features.") and k.endswith(".weight")
    )
    return tuple(ch for _, ch in convs)


def save_expert(expert: ExpertDetector, directory: str, threshold: float = DETECTION_THRESHOLD) -> dict:
    sidecar = {
        "role": "expert",
        "method_kind": expert.method_kind,
        "image_shape": list(expert.image_shape),
        "policy": expert.policy.to_dict(),
        "threshold": threshold,
        "report": expert.report,
    }
    tensor_io.save_checkpoint(directory, _network_groups(expert.network), {"kind": "expert_detector"})
    with open(os.path.join(directory, DETECTOR_SIDECAR), "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar


def _read_sidecar(directory: str) -> dict:
    path = os.path.join(directory, DETECTOR_SIDECAR)
    if not os.path.isfile(path):
        raise DataError(f"Detector sidecar not found: {path}")
    with open(path) as f:
        return json.load(f)


def load_expert(directory: str) -> ExpertDetector:
    sidecar = _read_sidecar(directory)
    _, groups = tensor_io.load_checkpoint(directory)
    shape = tuple(sidecar["image_shape"])
    network = _restore_network(ConvClassifier(shape[0], _infer_channels(groups), 1), groups)
    return ExpertDetector(network, sidecar["method_kind"], shape,
                          AugmentationPolicy.from_dict(sidecar["policy"]), sidecar.get("report", {}))


def save_gating(gating: GatingModel, directory: str) -> dict:
    sidecar = {
        "role": "gating",
        "methods": list(gating.methods),
        "image_shape": list(gating.image_shape),
        "report": gating.report,
    }
    tensor_io.save_checkpoint(directory, _network_groups(gating.network), {"kind": "gating_model"})
    with open(os.path.join(directory, DETECTOR_SIDECAR), "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar


def load_gating(directory: str) -> GatingModel:
    sidecar = _read_sidecar(directory)
    _, groups = tensor_io.load_checkpoint(directory)
    shape = tuple(sidecar["image_shape"])
    methods = tuple(sidecar["methods"])
    network = _restore_network(ConvClassifier(shape[0], _infer_channels(groups), len(methods)), groups)
    return GatingModel(network, methods, shape, sidecar.get("report", {}))


def save_moe(moe: MoEDetector, directory: str) -> dict:
    """experts/<method>/, gating/ and moe.json under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for expert in moe.experts:
        save_expert(expert, os.path.join(directory, "experts", expert.method_kind), moe.threshold)
    if moe.gating is not None:
        save_gating(moe.gating, os.path.join(directory, "gating"))
    summary = {"methods": list(moe.methods), "threshold": moe.threshold, "has_gating": moe.gating is not None}
    with open(os.path.join(directory, "moe.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def load_moe(directory: str) -> MoEDetector:
    path = os.path.join(directory, "moe.json")
    if not os.path.isfile(path):
        raise DataError(f"Detector directory has no moe.json: {directory}")
    with open(path) as f:
        summary = json.load(f)
    experts = tuple(load_expert(os.path.join(directory, "experts", m)) for m in summary["methods"])
    gating = load_gating(os.path.join(directory, "gating")) if summary["has_gating"] else None
    return MoEDetector(experts, gating, summary["threshold"])
