"""Frame-level speech encoders.

Two pretraining recipes over one trunk (strided conv + transformer blocks):

* semantic: masked-span regression, predicting hidden input frames from
  context. Representations converge on token identity because context is the
  only route to a masked frame.
* acoustic: plain autoencoding through a narrow bottleneck, which rewards
  keeping per-frame detail and has no pressure to abstract over time.

Both estimators freeze after fit; `transform` is pure inference.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .checkpoint import (
    CheckpointError,
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .nn_blocks import EncoderBlock, bucket_batches, sinusoidal_embedding
from .utils import derive_seed, seed_everything, state_dict_checksum
from .validation import ValidationError, check_frames


class EncoderTrunk(nn.Module):
    def __init__(self, d_in: int, width: int, depth: int, heads: int, downsample: int):
        super().__init__()
        self.downsample = downsample
        self.conv = nn.Conv1d(d_in, width, kernel_size=5, stride=downsample, padding=2)
        self.blocks = nn.ModuleList(
            EncoderBlock(width, heads, 2 * width) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(width)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: [B, F, d_in] -> [B, ceil(F/downsample), width]
        x = self.conv(frames.transpose(1, 2)).transpose(1, 2)
        pos = torch.arange(x.shape[1], dtype=x.dtype, device=x.device)
        x = x + sinusoidal_embedding(pos, x.shape[-1])
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class _EncoderBase(BaseEstimator, TransformerMixin):
    """Common fit/transform scaffolding; subclasses define the pretext head."""

    kind = "base"

    def _config(self) -> dict:
        cfg = self.get_params()
        cfg["kind"] = self.kind
        return cfg

    def _build(self) -> None:
        raise NotImplementedError

    def _pretext_loss(self, frames: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        raise NotImplementedError

    def _trainable_modules(self) -> list[nn.Module]:
        raise NotImplementedError

    def _check_config(self) -> None:
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.width < 8:
            raise ValidationError("width must be >= 8")

    def fit(self, X, y=None, validation_data=None):
        """Pretrain on a list of frame matrices; keeps the best-validation epoch."""
        self._check_config()
        seed_everything(derive_seed(self.seed, "encoder", self.kind))
        self._build()
        if validation_data is None:
            n_val = max(1, len(X) // 10)
            X, X_val = X[:-n_val], X[-n_val:]
        else:
            X_val = validation_data
        params = [p for m in self._trainable_modules() for p in m.parameters()]
        opt = torch.optim.Adam(params, lr=self.lr)
        tensors = [torch.from_numpy(np.asarray(x, dtype=np.float32)) for x in X]
        val_tensors = [torch.from_numpy(np.asarray(x, dtype=np.float32)) for x in X_val]
        lengths = [t.shape[0] for t in tensors]
        history = {"train_loss": [], "val_loss": []}
        best = (float("inf"), None)
        history["val_loss"].append(self._validation_loss(val_tensors))
        for epoch in range(self.epochs):
            rng = np.random.default_rng(derive_seed(self.seed, self.kind, "epoch", epoch))
            epoch_losses = []
            for batch_idx in bucket_batches(lengths, self.batch_size, rng):
                batch = torch.stack([tensors[i] for i in batch_idx])
                loss = self._pretext_loss(batch, rng)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"{self.kind} pretraining diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(float(loss.detach()))
            history["train_loss"].append(float(np.mean(epoch_losses)))
            val_loss = self._validation_loss(val_tensors)
            history["val_loss"].append(val_loss)
            if val_loss < best[0]:
                best = (val_loss, {k: v.detach().clone() for k, v in self._state_dict().items()})
        if best[1] is not None and self.epochs > 0:
            self._load_state_dict(best[1])
        self.history_ = history
        self.trunk_.eval()
        self.checksum_ = state_dict_checksum(self.trunk_.state_dict())
        return self

    @torch.no_grad()
    def _validation_loss(self, val_tensors) -> float:
        losses = []
        for i, t in enumerate(val_tensors):
            rng = np.random.default_rng(derive_seed(self.seed, self.kind, "valmask", i))
            losses.append(float(self._pretext_loss(t[None], rng)))
        return float(np.mean(losses))

    def _state_dict(self):
        sd = {}
        for name, module in self._named_modules():
            for k, v in module.state_dict().items():
                sd[f"{name}.{k}"] = v
        return sd

    def _load_state_dict(self, sd):
        for name, module in self._named_modules():
            prefix = f"{name}."
            module.load_state_dict(
                {k[len(prefix):]: v for k, v in sd.items() if k.startswith(prefix)}
            )

    def _named_modules(self):
        raise NotImplementedError

    # -- inference ---------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "trunk_"):
            raise NotFittedError(f"{type(self).__name__} has no trained weights")

    @torch.no_grad()
    def encode_one(self, frames: np.ndarray) -> np.ndarray:
        self._require_fitted()
        frames = check_frames(frames, width=self.d_in)
        self.trunk_.eval()
        out = self.trunk_(torch.from_numpy(frames)[None])
        return out[0].numpy()

    def transform(self, X):
        return [self.encode_one(x) for x in X]

    @property
    def downsample_factor(self) -> int:
        return self.downsample

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> str:
        self._require_fitted()
        return save_checkpoint(
            path,
            state_dict_to_arrays(self._state_dict()),
            kind=f"encoder_{self.kind}",
            config=self._config(),
            extra={"history": getattr(self, "history_", {})},
        )

    def load(self, path):
        arrays, header = load_checkpoint(path, expect_kind=f"encoder_{self.kind}")
        stored = dict(header["config"])
        ours = self._config()
        for key in ours:
            if key in stored and stored[key] != ours[key]:
                raise CheckpointError(
                    f"config mismatch for '{key}': checkpoint has {stored[key]}, "
                    f"estimator has {ours[key]}"
                )
        self._build()
        self._load_state_dict(arrays_to_state_dict(arrays))
        self.trunk_.eval()
        self.history_ = header.get("extra", {}).get("history", {})
        self.checksum_ = state_dict_checksum(self.trunk_.state_dict())
        return self


class SemanticSpeechEncoder(_EncoderBase):
    """Masked-span prediction encoder (context-driven, token-level semantics)."""

    kind = "semantic"

    def __init__(
        self,
        d_in: int = 40,
        width: int = 64,
        depth: int = 2,
        heads: int = 4,
        downsample: int = 2,
        mask_ratio: float = 0.3,
        mask_span: int = 4,
        epochs: int = 40,
        lr: float = 1e-3,
        batch_size: int = 16,
        seed: int = 0,
    ):
        self.d_in = d_in
        self.width = width
        self.depth = depth
        self.heads = heads
        self.downsample = downsample
        self.mask_ratio = mask_ratio
        self.mask_span = mask_span
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _check_config(self):
        super()._check_config()
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie strictly inside (0, 1)")

    def _build(self):
        self.trunk_ = EncoderTrunk(self.d_in, self.width, self.depth, self.heads, self.downsample)
        self.mask_token_ = nn.Parameter(torch.zeros(self.d_in))
        self.head_ = nn.Linear(self.width, self.downsample * self.d_in)

    def _named_modules(self):
        return [("trunk", self.trunk_), ("head", self.head_), ("mask", _Holder(self.mask_token_))]

    def _trainable_modules(self):
        return [self.trunk_, self.head_, _Holder(self.mask_token_)]

    def _pretext_loss(self, frames: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        b, f, d = frames.shape
        n_spans = max(1, int(round(self.mask_ratio * f / self.mask_span)))
        mask = torch.zeros(b, f, dtype=torch.bool)
        for i in range(b):
            starts = rng.integers(0, max(f - self.mask_span, 1), size=n_spans)
            for s in starts:
                mask[i, s : s + self.mask_span] = True
        corrupted = frames.clone()
        corrupted[mask] = self.mask_token_.to(frames.dtype)
        hidden = self.trunk_(corrupted)
        pred = self.head_(hidden).reshape(b, -1, d)[:, :f]
        diff = (pred - frames)[mask]
        return (diff**2).mean()


class AcousticSpeechEncoder(_EncoderBase):
    """Autoencoding encoder: reconstructs frames through a narrow bottleneck."""

    kind = "acoustic"

    def __init__(
        self,
        d_in: int = 40,
        width: int = 64,
        depth: int = 2,
        heads: int = 4,
        downsample: int = 2,
        bottleneck: int = 16,
        epochs: int = 40,
        lr: float = 1e-3,
        batch_size: int = 16,
        seed: int = 0,
    ):
        self.d_in = d_in
        self.width = width
        self.depth = depth
        self.heads = heads
        self.downsample = downsample
        self.bottleneck = bottleneck
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _build(self):
        self.trunk_ = EncoderTrunk(self.d_in, self.width, self.depth, self.heads, self.downsample)
        self.squeeze_ = nn.Linear(self.width, self.bottleneck)
        self.head_ = nn.Linear(self.bottleneck, self.downsample * self.d_in)

    def _named_modules(self):
        return [("trunk", self.trunk_), ("squeeze", self.squeeze_), ("head", self.head_)]

    def _trainable_modules(self):
        return [self.trunk_, self.squeeze_, self.head_]

    def _pretext_loss(self, frames: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        b, f, d = frames.shape
        hidden = self.trunk_(frames)
        pred = self.head_(self.squeeze_(hidden)).reshape(b, -1, d)[:, :f]
        return ((pred - frames) ** 2).mean()


class _Holder(nn.Module):
    """Wraps a bare Parameter so it can ride the module save/step machinery."""

    def __init__(self, param: nn.Parameter):
        super().__init__()
        self.value = param


def load_encoder(path):
    """Open an encoder checkpoint of either kind."""
    _, header = load_checkpoint(path)
    kind = header.get("kind", "")
    cfg = dict(header["config"])
    cfg.pop("kind", None)
    if kind == "encoder_semantic":
        return SemanticSpeechEncoder(**cfg).load(path)
    if kind == "encoder_acoustic":
        return AcousticSpeechEncoder(**cfg).load(path)
    raise CheckpointError(f"{path} is not an encoder checkpoint (kind={kind})")
