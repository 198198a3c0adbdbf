"""Single-file checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
(sorted keys), then the raw parameter arrays concatenated in header order.
The bytes are a pure function of the content, so retraining with the same
seed reproduces the file exactly. Loading refuses any other format version.

The fingerprint of a checkpoint is the SHA-256 of its parameter blob; it is
what downstream checkpoints record to pin the exact weights they were
trained against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"CYCLEDM1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    kind: str                     # "ddpm" | "conversion" | "extractor"
    arch: dict[str, Any]
    meta: dict[str, Any]
    arrays: dict[str, np.ndarray]
    fingerprint: str              # sha256 hex of the parameter blob


def state_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {
        k[len(prefix):]: torch.from_numpy(np.ascontiguousarray(v))
        for k, v in arrays.items()
        if k.startswith(prefix)
    }
    module.load_state_dict(state)


def blob_fingerprint(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def module_fingerprint(module: torch.nn.Module) -> str:
    return blob_fingerprint(state_arrays(module))


def save_checkpoint(path: str | Path, kind: str, arch: dict[str, Any],
                    meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> str:
    """Write the container and return the parameter fingerprint."""
    names = sorted(arrays)
    index = [
        {"name": n, "dtype": str(arrays[n].dtype), "shape": list(arrays[n].shape)}
        for n in names
    ]
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "meta": meta,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    fingerprint = blob_fingerprint(arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for n in names:
            f.write(np.ascontiguousarray(arrays[n]).tobytes())
    return fingerprint


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a cycledm checkpoint (bad magic)")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {header.get('format_version')!r} "
                f"not supported (expected {FORMAT_VERSION})"
            )
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    return Checkpoint(kind=kind, arch=header["arch"], meta=header["meta"],
                      arrays=arrays, fingerprint=blob_fingerprint(arrays))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
