"""
SEAL Tensor Blob & Checkpoint I/O
Binary tensor blobs, checkpoint directories, checksums and checkpoint diffs.

Blob layout (little-endian):
  16-byte header: magic b"FTSH" | rank (uint32) | element count (uint64)
  rank x uint64 dims
  float32 data, row-major

A checkpoint directory holds ``manifest.json`` plus one ``<group>.bin`` blob per
parameter group; each group blob is the row-major concatenation of the group's
tensors, with names, shapes and offsets recorded in the manifest.
"""

import hashlib
import json
import os
import struct
from typing import Any, Optional

import numpy as np

from config.parameters import BLOB_MAGIC, FORMAT_VERSION
from engine.errors import DataError

_HEADER = struct.Struct("<4sIQ")
MANIFEST_NAME = "manifest.json"


def write_blob(path: str, array) -> str:
    """Write an array as a float32 blob. Returns the file's sha256."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = _HEADER.pack(BLOB_MAGIC, arr.ndim, arr.size)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(dims)
        f.write(arr.tobytes(order="C"))
    return file_checksum(path)


def read_blob(path: str) -> np.ndarray:
    """Read a float32 blob written by write_blob."""
    if not os.path.isfile(path):
        raise DataError(f"Tensor blob not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"Truncated blob header: {path}")
    magic, rank, numel = _HEADER.unpack_from(raw, 0)
    if magic != BLOB_MAGIC:
        raise DataError(f"Bad blob magic {magic!r} in {path}")
    offset = _HEADER.size
    dims = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
    offset += 8 * rank
    expected = int(np.prod(dims)) if rank else 1
    if expected != numel or len(raw) - offset != 4 * numel:
        raise DataError(f"Blob size mismatch in {path}: header says {numel} values")
    data = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset)
    return data.reshape(dims).astype(np.float32)


def file_checksum(path: str) -> str:
    """sha256 hex digest of a file."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_checksum(array) -> str:
    """sha256 of an array's float32 little-endian bytes (shape included)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    directory: str,
    groups: dict[str, dict[str, np.ndarray]],
    metadata: Optional[dict[str, Any]] = None,
) -> dict:
    """
    Save parameter groups to a checkpoint directory.

    Args:
        directory: Target directory (created if missing)
        groups: {group_name: {param_name: array}}
        metadata: Extra manifest keys (schedule constants, shapes, ...)

    Returns:
        The manifest dict that was written.
    """
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "groups": {},
        **(metadata or {}),
    }
    for group_name, params in groups.items():
        entries = []
        flat = []
        offset = 0
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float32)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)})
            flat.append(arr.reshape(-1))
            offset += arr.size
        blob = np.concatenate(flat) if flat else np.zeros(0, dtype=np.float32)
        checksum = write_blob(os.path.join(directory, f"{group_name}.bin"), blob)
        manifest["groups"][group_name] = {"file": f"{group_name}.bin", "sha256": checksum, "params": entries}

    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_checkpoint(directory: str, verify: bool = True) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    """
    Load a checkpoint directory.

    Returns:
        (manifest, groups) where groups mirrors the save_checkpoint input.

    Raises:
        DataError: Missing manifest/blob, wrong format version or checksum mismatch.
    """
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise DataError(f"Checkpoint manifest not found: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"Unsupported checkpoint format {manifest.get('format_version')} in {directory}"
        )

    groups = {}
    for group_name, info in manifest["groups"].items():
        path = os.path.join(directory, info["file"])
        if verify and os.path.isfile(path) and file_checksum(path) != info["sha256"]:
            raise DataError(f"Checksum mismatch for {path}")
        flat = read_blob(path)
        params = {}
        for entry in info["params"]:
            start = entry["offset"]
            params[entry["name"]] = flat[start:start + entry["numel"]].reshape(entry["shape"])
        groups[group_name] = params
    return manifest, groups


def diff_checkpoints(dir_a: str, dir_b: str) -> dict[str, dict[str, dict]]:
    """
    Compare two checkpoints parameter by parameter (bitwise).

    Returns:
        {group: {param: {"changed": n, "rows": sorted changed leading-axis indices,
                         "shape_changed": bool}}}
        Parameters present in only one checkpoint are reported with
        ``"added"`` or ``"removed"`` set.
    """
    _, groups_a = load_checkpoint(dir_a)
    _, groups_b = load_checkpoint(dir_b)
    report: dict[str, dict[str, dict]] = {}

    for group in sorted(set(groups_a) | set(groups_b)):
        params_a = groups_a.get(group, {})
        params_b = groups_b.get(group, {})
        group_report = {}
        for name in sorted(set(params_a) | set(params_b)):
            if name not in params_a:
                group_report[name] = {"added": True, "changed": int(params_b[name].size), "rows": []}
                continue
            if name not in params_b:
                group_report[name] = {"removed": True, "changed": int(params_a[name].size), "rows": []}
                continue
            a, b = params_a[name], params_b[name]
            if a.shape != b.shape:
                group_report[name] = {"shape_changed": True, "changed": int(max(a.size, b.size)), "rows": []}
                continue
            # Bitwise comparison, so -0.0 vs 0.0 or NaN payloads count as changes
            mask = a.view(np.uint32) != b.view(np.uint32)
            changed = int(mask.sum())
            rows = []
            if changed and a.ndim >= 1:
                rows = sorted(int(i) for i in np.unique(np.nonzero(mask)[0]))
            group_report[name] = {"changed": changed, "rows": rows, "shape_changed": False}
        report[group] = group_report
    return report


def footprint_summary(diff: dict[str, dict[str, dict]]) -> dict:
    """Summarise a diff_checkpoints result into changed groups and parameter names."""
    changed_params = {
        group: sorted(name for name, info in params.items() if info["changed"])
        for group, params in diff.items()
    }
    changed_params = {g: names for g, names in changed_params.items() if names}
    return {
        "changed_groups": sorted(changed_params),
        "changed_params": changed_params,
        "changed_values": sum(
            info["changed"] for params in diff.values() for info in params.values()
        ),
    }
