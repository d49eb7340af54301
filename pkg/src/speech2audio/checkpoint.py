"""Self-describing weight archives.

Layout: one UTF-8 JSON header line, then the raw little-endian array payload
in header order. File bytes are a pure function of (arrays, metadata), so
checkpoint checksums double as determinism probes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .utils import array_checksum
from .validation import ValidationError

FORMAT_NAME = "s2a-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValidationError):
    """Raised on malformed archives or refused pairings."""


def save_checkpoint(
    path,
    arrays: Mapping[str, np.ndarray],
    kind: str,
    config: Mapping,
    upstream: Mapping[str, str] | None = None,
    extra: Mapping | None = None,
) -> str:
    """Write an archive; returns the canonical weight checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    canon = {}
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        canon[name] = arr
    checksum = array_checksum(canon)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "checksum": checksum,
        "upstream": dict(upstream or {}),
        "extra": dict(extra or {}),
        "arrays": [
            {"name": n, "dtype": str(canon[n].dtype), "shape": list(canon[n].shape)}
            for n in names
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(canon[name].tobytes())
    return checksum


def load_checkpoint(path, expect_kind: str | None = None):
    """Read an archive; returns (arrays, header). Verifies the stored checksum."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header in {path}") from exc
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path} is not a {FORMAT_NAME} archive")
        if "version" not in header:
            raise CheckpointError(f"{path} header lacks a version field")
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    if array_checksum(arrays) != header["checksum"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(
            f"{path} holds a '{header.get('kind')}' checkpoint, expected '{expect_kind}'"
        )
    return arrays, header


def state_dict_to_arrays(state_dict: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state_dict.items()}


def arrays_to_state_dict(arrays: Mapping[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}


def require_pairing(header: Mapping, key: str, expected_checksum: str, path="") -> None:
    """Refuse to pair a checkpoint with an upstream module it was not trained against."""
    recorded = header.get("upstream", {}).get(key)
    if recorded != expected_checksum:
        raise CheckpointError(
            f"checkpoint {path or header.get('kind')} was trained against {key}="
            f"{recorded}, refusing to pair with {key}={expected_checksum}"
        )
