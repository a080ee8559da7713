"""SEAL audit stage: score suspected images with the trained mixture detector."""

import json
import logging
import os
import time
from typing import Optional

import torch

from engine.detector import MoEDetector, detect_details, load_moe
from engine.errors import DataError
from engine.metrics import compute_tpr_fpr
from pipeline.common import ProgressCallback, detectors_dir, stage_dir, write_json, write_run_manifest
from pipeline.datasets import DATASET_MANIFEST, read_png

logger = logging.getLogger(__name__)

AUDIT_REPORT = "audit_report.json"


def list_images(path: str) -> list[str]:
    """PNG files of a directory (dataset.json order when present), or a single file."""
    if os.path.isfile(path):
        return [path]
    if not os.path.isdir(path):
        raise DataError(f"Audit input not found: {path}")
    manifest_path = os.path.join(path, DATASET_MANIFEST)
    if os.path.isfile(manifest_path):
        with open(manifest_path) as f:
            return [os.path.join(path, e["file"]) for e in json.load(f)["images"]]
    return [os.path.join(path, name) for name in sorted(os.listdir(path)) if name.lower().endswith(".png")]


def read_labels(path: Optional[str]) -> dict[str, bool]:
    """JSON object mapping image file name (or stem) to 1/true for watermarked."""
    if not path:
        return {}
    if not os.path.isfile(path):
        raise DataError(f"Label file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataError(f"Label file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"Label file {path} must hold a JSON object of name -> label")
    return {str(k): bool(v) for k, v in raw.items()}


def audit_images(moe: MoEDetector, paths: list[str], threshold: float, labels: Optional[dict] = None) -> dict:
    """
    Per-image gating weights, expert scores, mixture score and verdict.

    Unreadable images and resolution mismatches become per-image error
    entries; the rest are scored as one batch.
    """
    labels = labels or {}
    entries, images, scored = [], [], []
    for path in paths:
        name = os.path.basename(path)
        entry = {"image": name}
        try:
            img = read_png(path)
            if tuple(img.shape) != tuple(moe.image_shape):
                raise DataError(f"resolution {tuple(img.shape)} does not match detector {tuple(moe.image_shape)}")
            images.append(img)
            scored.append(len(entries))
        except DataError as exc:
            entry["error"] = str(exc)
            logger.warning("Audit skipped %s: %s", name, exc)
        label = labels.get(name, labels.get(os.path.splitext(name)[0]))
        if label is not None:
            entry["label"] = label
        entries.append(entry)

    if images:
        details = detect_details(moe, torch.stack(images))
        for row, idx in enumerate(scored):
            score = float(details["score"][row])
            entries[idx].update({
                "weights": dict(zip(details["methods"], details["weights"][row].tolist())),
                "expert_scores": dict(zip(details["methods"], details["expert_scores"][row].tolist())),
                "score": score,
                "verdict": "watermarked" if score >= threshold else "clean",
            })

    ok = [e for e in entries if "error" not in e]
    summary = {
        "n_images": len(entries),
        "n_scored": len(ok),
        "n_errors": len(entries) - len(ok),
        "n_flagged": sum(e["verdict"] == "watermarked" for e in ok),
        "threshold": threshold,
    }
    pos = [e["score"] for e in ok if e.get("label") is True]
    neg = [e["score"] for e in ok if e.get("label") is False]
    if pos and neg:
        summary["detection"] = compute_tpr_fpr(pos, neg, threshold).to_dict()
    elif pos or neg:
        summary["detection"] = {"n_pos": len(pos), "n_neg": len(neg),
                                "note": "TPR/FPR need both labelled classes"}
    return {"methods": list(moe.methods), "images": entries, "summary": summary}


def run_audit(
    cfg: dict,
    images: Optional[str] = None,
    labels: Optional[str] = None,
    progress_callback: ProgressCallback = None,
) -> dict:
    """
    Audit a directory (or single PNG) of suspected images and write
    ``<output_root>/audit/audit_report.json``.

    Raises:
        DataError: when every image fails (an empty input is not a failure)
    """

    def progress(stage: int, message: str):
        if progress_callback:
            progress_callback(stage, message)
        print(message)

    t0 = time.time()
    source = images or cfg["audit"]["images"]
    if not source:
        raise DataError("No images to audit: pass --images or set audit.images")
    label_path = labels or cfg["audit"]["labels"]

    progress(1, f"Loading detectors from {detectors_dir(cfg)}...")
    moe = load_moe(detectors_dir(cfg))
    paths = list_images(source)
    progress(2, f"Scoring {len(paths)} image(s)...")
    report = audit_images(moe, paths, cfg["detector"]["threshold"], read_labels(label_path))

    out_dir = stage_dir(cfg, "audit")
    write_json(os.path.join(out_dir, AUDIT_REPORT), report)
    s = report["summary"]
    progress(3, f"Complete: {s['n_flagged']}/{s['n_scored']} flagged as watermarked, {s['n_errors']} error(s)")
    write_run_manifest(out_dir, "audit", cfg, t0,
                       inputs={"images": source, "labels": label_path, "detectors": detectors_dir(cfg)},
                       extra={"summary": s})
    if s["n_images"] and not s["n_scored"]:
        raise DataError(f"All {s['n_images']} audited images failed; see {os.path.join(out_dir, AUDIT_REPORT)}")
    return report
