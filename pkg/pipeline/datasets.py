"""SEAL datasets: synthetic style / object sets, PNG storage and the dataset.json manifest."""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
from PIL import Image

from config.parameters import DATASET_KINDS, FORMAT_VERSION, IDENTIFIER_TOKEN
from engine import tensor_io
from engine.errors import DataError
from engine.seeds import derive_seed
from engine.watermark import quantize_8bit
from pipeline.common import dataset_dir
from pipeline.prompts import (
    BASE_CAPTION,
    OBJECT_CAPTION,
    OBJECT_CLASSES,
    STYLE_CAPTION,
    SUBJECTS,
    VOCAB_SIZE,
    detokenize,
    tokenize,
)

logger = logging.getLogger(__name__)

DATASET_MANIFEST = "dataset.json"

STYLE_NAMES = ("aurelia", "bramwell", "corvin", "delphine", "esker", "fenwick")


@dataclass(frozen=True)
class ImageDataset:
    images: torch.Tensor  # (N, C, H, W) float32 in [0, 1], 8-bit exact
    prompts: torch.Tensor  # (N, L) long
    image_ids: tuple[str, ...]
    kind: str
    name: str
    caption_template: str
    splits: tuple[str, ...] = ()
    file_checksums: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        n = int(self.images.shape[0])
        if self.prompts.shape[0] != n or len(self.image_ids) != n:
            raise DataError(f"Dataset has {n} images, {self.prompts.shape[0]} prompts, {len(self.image_ids)} ids")
        if len(set(self.image_ids)) != n:
            raise DataError("Dataset image ids are not unique")
        if not self.splits:
            object.__setattr__(self, "splits", ("train",) * n)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.images.shape[1:])

    @property
    def checksum(self) -> str:
        """sha256 over the pixel content (independent of file encoding)."""
        return tensor_io.array_checksum(self.images.numpy())

    def replace_images(self, images: torch.Tensor) -> "ImageDataset":
        if tuple(images.shape) != tuple(self.images.shape):
            raise DataError(f"Replacement images {tuple(images.shape)} do not match {tuple(self.images.shape)}")
        return ImageDataset(images, self.prompts, self.image_ids, self.kind, self.name,
                            self.caption_template, self.splits)


# ── Synthetic generators ──────────────────────────────────────────


def _grid(h: int, w: int):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy / max(1, h - 1), xx / max(1, w - 1)


def _style_params(name: str, channels: int) -> dict:
    rng = np.random.default_rng(derive_seed(0, "style", name))
    return {
        "palette": rng.uniform(0.1, 0.9, size=(3, channels)),
        "angle": float(rng.uniform(0, np.pi)),
        "freq": float(rng.uniform(1.5, 3.0)),
    }


def _style_image(rng: np.random.Generator, style: dict, shape) -> np.ndarray:
    c, h, w = shape
    yy, xx = _grid(h, w)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * style["freq"] * (xx * np.cos(style["angle"]) + yy * np.sin(style["angle"])) + phase)
    p = style["palette"]
    img = wave[..., None] * p[0] + (1 - wave[..., None]) * p[1]
    centre = (int(rng.integers(w // 4, 3 * w // 4)), int(rng.integers(h // 4, 3 * h // 4)))
    radius = int(rng.integers(max(1, h // 8), max(2, h // 4)))
    img = np.ascontiguousarray(img.astype(np.float32))
    cv2.circle(img, centre, radius, tuple(float(v) for v in p[2]), thickness=-1)
    return cv2.GaussianBlur(img, (3, 3), 0.8).reshape(h, w, c)


def _object_image(rng: np.random.Generator, cls: str, shape) -> np.ndarray:
    c, h, w = shape
    yy, xx = _grid(h, w)
    a, b = rng.uniform(0.0, 1.0, size=(2, c))
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + 0.5 * (xx * np.cos(theta) + yy * np.sin(theta)) - 0.25, 0, 1)[..., None]
    img = np.ascontiguousarray((ramp * a + (1 - ramp) * b).astype(np.float32))
    colour = np.random.default_rng(derive_seed(0, "object", cls)).uniform(0.2, 0.95, size=c)
    size = int(rng.integers(max(2, h // 5), max(3, h // 3)))
    x0 = int(rng.integers(0, max(1, w - 2 * size)))
    y0 = int(rng.integers(size, max(size + 1, h - size)))
    cv2.rectangle(img, (x0, y0), (x0 + 2 * size - 1, min(h - 1, y0 + size)), tuple(float(v) for v in colour), -1)
    cv2.circle(img, (x0 + size, y0), max(1, size // 2), tuple(float(v) for v in colour[::-1]), -1)
    return img.reshape(h, w, c)


def _generic_image(rng: np.random.Generator, shape) -> np.ndarray:
    c, h, w = shape
    yy, xx = _grid(h, w)
    a, b = rng.uniform(0.0, 1.0, size=(2, c))
    ramp = (xx if rng.random() < 0.5 else yy)[..., None]
    img = np.ascontiguousarray((ramp * a + (1 - ramp) * b).astype(np.float32))
    for _ in range(int(rng.integers(1, 4))):
        colour = tuple(float(v) for v in rng.uniform(0, 1, size=c))
        centre = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        if rng.random() < 0.5:
            cv2.circle(img, centre, int(rng.integers(1, max(2, h // 3))), colour, -1)
        else:
            half = int(rng.integers(1, max(2, h // 4)))
            cv2.rectangle(img, (centre[0] - half, centre[1] - half), (centre[0] + half, centre[1] + half), colour, -1)
    return img.reshape(h, w, c)


def _to_tensor_8bit(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    stacked = torch.from_numpy(np.stack([a.transpose(2, 0, 1) for a in arrays]).astype(np.float32))
    return torch.from_numpy(quantize_8bit(stacked).astype(np.float32) / 255.0)


def make_synthetic_dataset(
    kind: str,
    n: int,
    image_shape: Sequence[int],
    seed: int,
    name: Optional[str] = None,
) -> ImageDataset:
    """
    Desk-scale stand-in for an artist's works (``style``) or photos of one
    object (``object``). Pixels are 8-bit exact, as if loaded from PNG.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"Unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if n < 1:
        raise ValueError(f"Dataset size must be >= 1, got {n}")
    shape = tuple(int(s) for s in image_shape)
    rng = np.random.default_rng(derive_seed(seed, "dataset", kind, name))
    if kind == "style":
        name = name or STYLE_NAMES[seed % len(STYLE_NAMES)]
        style = _style_params(name, shape[0])
        arrays = [_style_image(rng, style, shape) for _ in range(n)]
        prompt = tokenize(STYLE_CAPTION)
        template = " ".join(STYLE_CAPTION)
    else:
        name = name or OBJECT_CLASSES[seed % len(OBJECT_CLASSES)]
        arrays = [_object_image(rng, name, shape) for _ in range(n)]
        prompt = tokenize(OBJECT_CAPTION, cls=name)
        template = " ".join(OBJECT_CAPTION)
    prompts = torch.tensor([prompt] * n, dtype=torch.long)
    ids = tuple(f"{kind}_{i:05d}" for i in range(n))
    return ImageDataset(_to_tensor_8bit(arrays), prompts, ids, kind, name, template)


def make_base_corpus(n: int, image_shape: Sequence[int], seed: int) -> ImageDataset:
    """Generic captioned shapes and gradients for pretraining the public model."""
    shape = tuple(int(s) for s in image_shape)
    rng = np.random.default_rng(derive_seed(seed, "corpus"))
    arrays, prompts = [], []
    for i in range(n):
        arrays.append(_generic_image(rng, shape))
        prompts.append(tokenize(BASE_CAPTION, subject=SUBJECTS[int(rng.integers(len(SUBJECTS)))]))
    ids = tuple(f"corpus_{i:05d}" for i in range(n))
    return ImageDataset(_to_tensor_8bit(arrays), torch.tensor(prompts, dtype=torch.long), ids,
                        "corpus", "generic", " ".join(BASE_CAPTION))


# ── Storage ───────────────────────────────────────────────────────


def write_png(image: torch.Tensor, path: str) -> str:
    """Write a (C, H, W) [0, 1] image as an 8-bit PNG; returns the file sha256."""
    arr = quantize_8bit(image).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    elif arr.shape[2] != 3:
        raise ValueError(f"PNG export supports 1 or 3 channels, got {arr.shape[2]}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return tensor_io.file_checksum(path)


def read_png(path: str) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"Unreadable image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise DataError(f"{path} is not an 8-bit image ({arr.dtype})")
    return torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_dataset(dataset: ImageDataset, directory: str, extra: Optional[dict] = None) -> dict:
    """Write one PNG per image plus dataset.json with checksums and captions."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, image_id in enumerate(dataset.image_ids):
        file = f"{image_id}.png"
        checksum = write_png(dataset.images[i], os.path.join(directory, file))
        tokens = [int(t) for t in dataset.prompts[i]]
        entries.append({
            "id": image_id,
            "file": file,
            "sha256": checksum,
            "caption": detokenize(tokens),
            "tokens": tokens,
            "split": dataset.splits[i],
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": dataset.kind,
        "name": dataset.name,
        "caption_template": dataset.caption_template,
        "image_shape": list(dataset.image_shape),
        "identifier_token": IDENTIFIER_TOKEN,
        "vocab_size": VOCAB_SIZE,
        "pixel_checksum": dataset.checksum,
        "images": entries,
        **(extra or {}),
    }
    with open(os.path.join(directory, DATASET_MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("Wrote %d images to %s", len(entries), directory)
    return manifest


def read_manifest(directory: str) -> dict:
    path = os.path.join(directory, DATASET_MANIFEST)
    if not os.path.isfile(path):
        raise DataError(f"Dataset manifest not found: {path}")
    with open(path) as f:
        return json.load(f)


def load_dataset(directory: str, verify: bool = True) -> ImageDataset:
    """
    Load a dataset directory written by save_dataset.

    Raises:
        DataError: missing manifest or file, checksum mismatch, mixed resolutions.
    """
    manifest = read_manifest(directory)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"Unsupported dataset format {manifest.get('format_version')} in {directory}")
    images, prompts, ids, splits, checksums = [], [], [], [], []
    expected = tuple(manifest["image_shape"])
    for entry in manifest["images"]:
        path = os.path.join(directory, entry["file"])
        if not os.path.isfile(path):
            raise DataError(f"Dataset image missing: {path}")
        checksum = tensor_io.file_checksum(path)
        if verify and checksum != entry["sha256"]:
            raise DataError(f"Checksum mismatch for {path}")
        img = read_png(path)
        if tuple(img.shape) != expected:
            raise DataError(f"{path} has shape {tuple(img.shape)}, dataset declares {expected}")
        images.append(img)
        prompts.append(entry["tokens"])
        ids.append(entry["id"])
        splits.append(entry.get("split", "train"))
        checksums.append(checksum)
    stacked = torch.stack(images) if images else torch.zeros((0, *expected))
    return ImageDataset(stacked, torch.tensor(prompts, dtype=torch.long).reshape(len(ids), -1), tuple(ids),
                        manifest["kind"], manifest["name"], manifest["caption_template"],
                        tuple(splits), tuple(checksums))


def directory_checksum(directory: str) -> str:
    """sha256 over a dataset's per-file checksums in manifest order."""
    manifest = read_manifest(directory)
    h = hashlib.sha256()
    for entry in manifest["images"]:
        h.update(entry["sha256"].encode())
    return h.hexdigest()


def as_8bit(images: torch.Tensor) -> torch.Tensor:
    """Round [0, 1] pixels onto the 8-bit grid, as a PNG round trip would."""
    if images.shape[0] == 0:
        return images.to(torch.float32)
    return torch.from_numpy(quantize_8bit(images).astype(np.float32) / 255.0)


def from_images(images: torch.Tensor, prompts: torch.Tensor, kind: str, name: str, split: str = "train") -> ImageDataset:
    """Wrap generated images (already 8-bit exact) as a dataset for storage."""
    n = int(images.shape[0])
    ids = tuple(f"{name}_{split}_{i:05d}".replace(":", "_") for i in range(n))
    return ImageDataset(images.to(torch.float32), prompts.to(torch.long), ids, kind, name, "", (split,) * n)


def load_or_create_dataset(cfg: dict) -> ImageDataset:
    """
    The protector's clean dataset: ``dataset.path`` when set, otherwise a
    synthetic set written once to ``<output_root>/dataset``.
    """
    ds = cfg["dataset"]
    shape = tuple(ds["image_shape"])
    if ds["path"]:
        dataset = load_dataset(ds["path"])
        if dataset.image_shape != shape:
            raise DataError(f"Dataset {ds['path']} has resolution {dataset.image_shape}, config expects {shape}")
        if len(dataset) < 2:
            raise DataError(f"Dataset {ds['path']} needs at least 2 images, has {len(dataset)}")
        return dataset

    directory = dataset_dir(cfg)
    if os.path.isfile(os.path.join(directory, DATASET_MANIFEST)):
        manifest = read_manifest(directory)
        if (manifest.get("kind") == ds["kind"] and len(manifest.get("images", [])) == ds["size"]
                and tuple(manifest.get("image_shape", ())) == shape and manifest.get("seed") == cfg["seed"]):
            return load_dataset(directory)
    dataset = make_synthetic_dataset(ds["kind"], ds["size"], shape, cfg["seed"])
    save_dataset(dataset, directory, extra={"seed": cfg["seed"], "synthetic": True})
    return dataset
