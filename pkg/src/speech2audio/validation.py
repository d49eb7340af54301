"""Input validation helpers shared across estimators and pipeline stages."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates an operation's preconditions."""


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_frames(frames, width: int | None = None, name: str = "frames") -> np.ndarray:
    """Validate a frame matrix (F x d); rejects empty input."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValidationError(f"{name} must be 2-D (F x d), got shape {frames.shape}")
    if frames.shape[0] == 0:
        raise ValidationError(f"{name} has zero frames")
    if width is not None and frames.shape[1] != width:
        raise ValidationError(
            f"{name} has width {frames.shape[1]}, expected {width}"
        )
    return check_finite(frames, name)


def check_waveform(samples, name: str = "samples") -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float32).reshape(-1)
    if samples.size == 0:
        raise ValidationError(f"{name} is empty")
    return check_finite(samples, name)


def check_probability(value: float, name: str, inclusive_high: bool = True) -> float:
    value = float(value)
    high_ok = value <= 1.0 if inclusive_high else value < 1.0
    if not (0.0 <= value and high_ok):
        raise ValidationError(f"{name}={value} outside the unit interval")
    return value


def check_positive(value, name: str):
    if not value > 0:
        raise ValidationError(f"{name}={value} must be positive")
    return value


def check_event_ids(events: Sequence[int], n_classes: int, allow_empty: bool = False) -> tuple[int, ...]:
    """Canonicalize an event-id collection: sorted, deduplicated, range-checked."""
    ids = sorted(set(int(e) for e in events))
    if not ids and not allow_empty:
        raise ValidationError("event set is empty")
    for e in ids:
        if not 0 <= e < n_classes:
            raise ValidationError(f"unknown event id {e} (valid range 0..{n_classes - 1})")
    return tuple(ids)


def check_same_shape(a: np.ndarray, b: np.ndarray, names: str = "operands") -> None:
    if np.shape(a) != np.shape(b):
        raise ValidationError(
            f"{names} shapes differ: {np.shape(a)} vs {np.shape(b)}"
        )
