"""Shared helpers: seed derivation, checksums, deterministic reductions."""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Mapping

import numpy as np
import torch

_SEED_MODULUS = 2**63 - 1


def derive_seed(global_seed: int, *tags: object) -> int:
    """Derive a stable sub-seed from a global seed and a tag path.

    Uses sha256 so the derivation is identical across processes and runs,
    which keeps parallel and serial corpus builds byte-identical.
    """
    payload = json.dumps([int(global_seed), *[str(t) for t in tags]])
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % _SEED_MODULUS


def seed_everything(seed: int) -> None:
    """Seed torch's global generator; numpy RNGs are passed around explicitly."""
    torch.manual_seed(seed % (2**63))


def config_hash(config: Mapping) -> str:
    """Stable hash of a JSON-serializable config mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def array_checksum(arrays: Mapping[str, np.ndarray]) -> str:
    """Canonical sha256 over named arrays (name-sorted, raw little-endian bytes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(json.dumps(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def state_dict_checksum(state_dict: Mapping[str, torch.Tensor]) -> str:
    """Checksum of a torch state dict, independent of file serialization."""
    return array_checksum({k: v.detach().cpu().numpy() for k, v in state_dict.items()})


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def pairwise_sum(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Tree-structured summation along `dim`.

    Keeps rounding error O(log n) and nearly independent of operand order, so
    permutation-invariance checks hold to tight tolerances. Differentiable.
    """
    x = x.movedim(dim, 0)
    while x.shape[0] > 1:
        n = x.shape[0]
        half = n // 2
        if n % 2:
            x = torch.cat([x[:half] + x[half : 2 * half], x[-1:]], dim=0)
        else:
            x = x[:half] + x[half:]
    return x[0]


def pairwise_mean(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    return pairwise_sum(x, dim=dim) / x.shape[dim]


def f1_score_sets(predicted: Iterable[int], target: Iterable[int]) -> float:
    """F1 between two index sets; 1.0 when both are empty."""
    pred, targ = set(predicted), set(target)
    if not pred and not targ:
        return 1.0
    tp = len(pred & targ)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(targ)
    return 2 * precision * recall / (precision + recall)
