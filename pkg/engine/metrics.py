"""
SEAL Evaluation Metrics
Detection rates, ROC curves, Frechet distance on a frozen feature extractor,
and the method-transfer accuracy matrix.

Accuracy everywhere is (TPR + TNR) / 2.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
from scipy import linalg
from scipy.integrate import trapezoid

from config.parameters import (
    DETECTION_THRESHOLD,
    FID_EPS,
    FID_EXTRACTOR_SEED,
    FID_EXTRACTOR_VERSION,
    FID_FEATURE_DIM,
    ROC_GRID_POINTS,
)
from engine import tensor_io
from engine.errors import DataError, NumericError
from engine.seeds import seeded_init

logger = logging.getLogger(__name__)

Scores = Union[Sequence[float], np.ndarray, torch.Tensor]


def _as_scores(scores: Scores, name: str) -> np.ndarray:
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} is empty; TPR/FPR need at least one score per class")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite scores")
    return arr


# ── Detection rates ───────────────────────────────────────────────


@dataclass(frozen=True)
class DetectionReport:
    tpr: float
    fpr: float
    threshold: float
    pos_scores: np.ndarray = field(repr=False)
    neg_scores: np.ndarray = field(repr=False)

    @property
    def n_pos(self) -> int:
        return int(self.pos_scores.size)

    @property
    def n_neg(self) -> int:
        return int(self.neg_scores.size)

    @property
    def tnr(self) -> float:
        return 1.0 - self.fpr

    @property
    def accuracy(self) -> float:
        return 0.5 * (self.tpr + self.tnr)

    def to_dict(self) -> dict:
        return {
            "tpr": round(self.tpr, 6),
            "fpr": round(self.fpr, 6),
            "accuracy": round(self.accuracy, 6),
            "threshold": self.threshold,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "pos_mean": float(self.pos_scores.mean()),
            "neg_mean": float(self.neg_scores.mean()),
        }


def compute_tpr_fpr(pos_scores: Scores, neg_scores: Scores, threshold: float = DETECTION_THRESHOLD) -> DetectionReport:
    """
    Fraction of positives and of negatives scoring at or above ``threshold``.

    Args:
        pos_scores: Detector scores on images from the watermark-tuned model
        neg_scores: Detector scores on images from the clean-tuned model
        threshold: Decision threshold (score >= threshold means "watermarked")
    """
    pos = _as_scores(pos_scores, "pos_scores")
    neg = _as_scores(neg_scores, "neg_scores")
    return DetectionReport(
        tpr=float(np.mean(pos >= threshold)),
        fpr=float(np.mean(neg >= threshold)),
        threshold=float(threshold),
        pos_scores=pos,
        neg_scores=neg,
    )


def balanced_accuracy(pos_scores: Scores, neg_scores: Scores, threshold: float = DETECTION_THRESHOLD) -> float:
    return compute_tpr_fpr(pos_scores, neg_scores, threshold).accuracy


def roc_sweep(pos_scores: Scores, neg_scores: Scores, grid: Optional[Sequence[float]] = None) -> list[DetectionReport]:
    """One DetectionReport per threshold, thresholds in increasing order."""
    pos = _as_scores(pos_scores, "pos_scores")
    neg = _as_scores(neg_scores, "neg_scores")
    if grid is None:
        grid = np.linspace(0.0, 1.0, ROC_GRID_POINTS)
    thresholds = np.unique(np.asarray(grid, dtype=np.float64))
    if thresholds.size == 0:
        raise ValueError("ROC grid is empty")
    return [compute_tpr_fpr(pos, neg, float(t)) for t in thresholds]


def roc_auc(reports: Sequence[DetectionReport]) -> float:
    """Area under the (FPR, TPR) curve by the trapezoid rule, anchored at (0, 0) and (1, 1)."""
    if not reports:
        raise ValueError("roc_auc needs at least one report")
    points = {(0.0, 0.0), (1.0, 1.0)} | {(r.fpr, r.tpr) for r in reports}
    fpr, tpr = zip(*sorted(points))
    return float(trapezoid(tpr, fpr))


# ── Frechet distance ──────────────────────────────────────────────


@dataclass(frozen=True)
class FidResult:
    value: float
    extractor_id: str
    n_a: int
    n_b: int
    regularized: bool = False

    def to_dict(self) -> dict:
        return {
            "fid": round(self.value, 6),
            "extractor": self.extractor_id,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "regularized": self.regularized,
        }


def _clip_eigenvalues(w: np.ndarray, what: str) -> np.ndarray:
    if w.size and w.min() < -FID_EPS:
        raise NumericError("Covariance product is not positive semi-definite",
                           {"matrix": what, "min_eigenvalue": float(w.min())})
    return np.clip(w, 0.0, None)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(m)
    w = _clip_eigenvalues(w, "covariance")
    return (v * np.sqrt(w)) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    # tr((AB)^1/2) = sum of sqrt eigenvalues of A^1/2 B A^1/2
    sa = _sqrt_psd(a)
    inner = sa @ b @ sa
    w = linalg.eigvalsh(0.5 * (inner + inner.T))
    return float(np.sqrt(_clip_eigenvalues(w, "product")).sum())


def frechet_distance(
    mu_a: np.ndarray,
    sigma_a: np.ndarray,
    mu_b: np.ndarray,
    sigma_b: np.ndarray,
) -> tuple[float, bool]:
    """
    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^1/2).

    A covariance with an eigenvalue below FID_EPS gets FID_EPS * I added to
    both matrices. Returns (distance, regularized).
    """
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ValueError(f"Feature statistics disagree: {mu_a.shape} vs {mu_b.shape}")

    regularized = False
    if min(linalg.eigvalsh(sigma_a).min(), linalg.eigvalsh(sigma_b).min()) < FID_EPS:
        offset = FID_EPS * np.eye(sigma_a.shape[0])
        sigma_a, sigma_b = sigma_a + offset, sigma_b + offset
        regularized = True

    diff = mu_a - mu_b
    # averaged over both orders so the result is exactly symmetric
    tr_sqrt = 0.5 * (_trace_sqrt_product(sigma_a, sigma_b) + _trace_sqrt_product(sigma_b, sigma_a))
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_sqrt)
    if value < -FID_EPS:
        raise NumericError("Negative Frechet distance", {"value": value})
    return max(value, 0.0), regularized


def fid_from_features(features_a: np.ndarray, features_b: np.ndarray, extractor_id: str = "features") -> FidResult:
    """Frechet distance between two (N, D) feature sets."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    a, b = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError(f"FID needs at least 2 images per set, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    value, regularized = frechet_distance(
        a.mean(axis=0), np.cov(a, rowvar=False), b.mean(axis=0), np.cov(b, rowvar=False)
    )
    if regularized:
        logger.debug("FID covariance regularised (%d vs %d samples, %d dims)", a.shape[0], b.shape[0], a.shape[1])
    return FidResult(value, extractor_id, int(a.shape[0]), int(b.shape[0]), regularized)


class FeatureExtractor(nn.Module):
    """Frozen random conv embedder: three conv layers, then spatial mean and std."""

    def __init__(self, in_channels: int = 3, dim: int = FID_FEATURE_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, dim // 2, 3, stride=2, padding=1),
        )
        self.dim = dim
        self.version = FID_EXTRACTOR_VERSION

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3), unbiased=False)], dim=1)


def build_feature_extractor(in_channels: int = 3, dim: int = FID_FEATURE_DIM, seed: int = FID_EXTRACTOR_SEED) -> FeatureExtractor:
    if dim < 2 or dim % 2:
        raise ValueError(f"Feature dim must be an even number >= 2, got {dim}")
    with seeded_init(seed):
        extractor = FeatureExtractor(in_channels, dim)
    for p in extractor.parameters():
        p.requires_grad_(False)
    return extractor.eval()


def load_or_build_extractor(directory: Optional[str] = None, in_channels: int = 3) -> FeatureExtractor:
    """
    Load the versioned extractor checkpoint from ``directory``, or build it
    from FID_EXTRACTOR_SEED and save it there.
    """
    extractor = build_feature_extractor(in_channels)
    if directory is None:
        return extractor
    if os.path.isfile(os.path.join(directory, tensor_io.MANIFEST_NAME)):
        manifest, groups = tensor_io.load_checkpoint(directory)
        if manifest.get("extractor_version") != FID_EXTRACTOR_VERSION:
            raise DataError(
                f"Feature extractor at {directory} is {manifest.get('extractor_version')!r}, "
                f"expected {FID_EXTRACTOR_VERSION!r}"
            )
        state = {k: torch.from_numpy(np.array(v)) for k, v in groups["extractor"].items()}
        extractor.load_state_dict(state)
        return extractor
    tensor_io.save_checkpoint(
        directory,
        {"extractor": {k: v.numpy() for k, v in extractor.state_dict().items()}},
        {"kind": "fid_extractor", "extractor_version": FID_EXTRACTOR_VERSION,
         "in_channels": in_channels, "dim": extractor.dim, "seed": FID_EXTRACTOR_SEED},
    )
    logger.info("Saved FID feature extractor %s to %s", FID_EXTRACTOR_VERSION, directory)
    return extractor


@torch.no_grad()
def extract_features(extractor: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    chunks = [extractor(images[i:i + batch_size].to(torch.float32)) for i in range(0, images.shape[0], batch_size)]
    if not chunks:
        return np.zeros((0, 0))
    return torch.cat(chunks).reshape(images.shape[0], -1).double().numpy()


def compute_fid(
    set_a: torch.Tensor,
    set_b: torch.Tensor,
    extractor: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> FidResult:
    """FID between two image sets (N, C, H, W) on the extractor's features."""
    if set_a.shape[0] < 2 or set_b.shape[0] < 2:
        raise ValueError(f"FID needs at least 2 images per set, got {set_a.shape[0]} and {set_b.shape[0]}")
    if extractor is None:
        extractor = build_feature_extractor(int(set_a.shape[1]))
    extractor_id = getattr(extractor, "version", type(extractor).__name__)
    return fid_from_features(extract_features(extractor, set_a), extract_features(extractor, set_b), extractor_id)


# ── Transferability ───────────────────────────────────────────────


def transfer_matrix(
    scorers: Mapping[str, Callable[[torch.Tensor], torch.Tensor]],
    eval_sets: Mapping[str, tuple[torch.Tensor, torch.Tensor]],
    threshold: float = DETECTION_THRESHOLD,
) -> dict:
    """
    Accuracy of every expert on every method's evaluation set.

    Args:
        scorers: method -> callable returning (N,) watermark scores (expert j)
        eval_sets: method -> (watermark-tuned generations, clean-tuned generations)

    Returns:
        {"methods": [...], "matrix": (M, M) array with entry (i, j) the
        accuracy of expert j on method i's set, "reports": {(i, j): DetectionReport}}
    """
    methods = list(scorers)
    missing = [m for m in methods if m not in eval_sets]
    extra = [m for m in eval_sets if m not in scorers]
    if missing or extra:
        raise ValueError(f"Method universes differ: no eval set for {missing}, no expert for {extra}")
    matrix = np.zeros((len(methods), len(methods)))
    reports = {}
    for i, row in enumerate(methods):
        pos_images, neg_images = eval_sets[row]
        for j, col in enumerate(methods):
            report = compute_tpr_fpr(scorers[col](pos_images), scorers[col](neg_images), threshold)
            matrix[i, j] = report.accuracy
            reports[(row, col)] = report
    return {"methods": methods, "matrix": matrix, "reports": reports}
