"""Bridge networks: map variable-length speech embeddings to fixed-size
sound-event semantics.

Two variants: an MLP head (2-layer per-frame projection, tree-structured mean
pooling, output 1 x D) and a Q-Former (learnable queries cross-attending over
frames, output N_q x D). Output shape never depends on the input frame count.
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
from .nn_blocks import CrossAttention, FeedForward
from .utils import derive_seed, pairwise_mean, seed_everything, state_dict_checksum
from .validation import ValidationError


class MlpBridgeModule(nn.Module):
    def __init__(self, d_in: int, d_out: int, hidden: int):
        super().__init__()
        self.proj = nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        # emb: [B, F', d_in] -> [B, 1, d_out]
        if emb.shape[1] == 0:
            raise ValidationError("bridge input has zero frames")
        projected = self.proj(emb)
        return pairwise_mean(projected, dim=1)[:, None, :]


class QFormerLayer(nn.Module):
    def __init__(self, d_model: int, d_context: int, heads: int):
        super().__init__()
        self.ln_q = nn.LayerNorm(d_model)
        self.cross = CrossAttention(d_model, d_context, heads)
        self.ln_f = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, 2 * d_model)

    def forward(self, q, context, return_attn=False):
        if return_attn:
            delta, attn = self.cross(self.ln_q(q), context, return_attn=True)
        else:
            delta, attn = self.cross(self.ln_q(q), context), None
        q = q + delta
        q = q + self.ffn(self.ln_f(q))
        return q, attn


class QFormerModule(nn.Module):
    """Fixed learnable queries; cross-attention + FFN per layer, final norm.

    No self-attention among queries and no positional encoding over the
    context: all temporal structure must already live in the embeddings.
    """

    def __init__(self, d_in: int, d_out: int, n_queries: int, layers: int, heads: int):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(n_queries, d_out) * 0.02)
        self.layers = nn.ModuleList(
            QFormerLayer(d_out, d_in, heads) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(d_out)

    def forward(self, emb: torch.Tensor, return_attn: bool = False):
        if emb.shape[1] == 0:
            raise ValidationError("bridge input has zero frames")
        b = emb.shape[0]
        q = self.queries[None].expand(b, -1, -1).to(emb.dtype)
        attns = []
        for layer in self.layers:
            q, attn = layer(q, emb, return_attn=return_attn)
            if return_attn:
                attns.append(attn)
        q = self.norm(q)
        if return_attn:
            return q, attns
        return q


class _BridgeBase(BaseEstimator, TransformerMixin):
    kind = "base"

    def _build(self) -> nn.Module:
        raise NotImplementedError

    def init_module(self):
        """Fresh seeded weights (bridges are normally trained by the probe stage)."""
        seed_everything(derive_seed(self.seed, "bridge", self.kind))
        self.module_ = self._build()
        self.module_.eval()
        self.checksum_ = state_dict_checksum(self.module_.state_dict())
        return self

    def adopt_module(self, module: nn.Module, encoder_checksum: str | None = None):
        """Take ownership of an externally trained bridge module."""
        self.module_ = module
        self.module_.eval()
        self.encoder_checksum_ = encoder_checksum
        self.checksum_ = state_dict_checksum(self.module_.state_dict())
        return self

    def fit(self, X, y=None):
        return self.init_module()

    def _require_fitted(self):
        if not hasattr(self, "module_"):
            raise NotFittedError(f"{type(self).__name__} has no weights; fit or load first")

    @torch.no_grad()
    def map_one(self, emb: np.ndarray) -> np.ndarray:
        """One embedding matrix F' x d_in -> semantic matrix N_q x d_out."""
        self._require_fitted()
        emb = np.asarray(emb, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValidationError("embedding must be a nonempty F' x d_in matrix")
        if emb.shape[1] != self.d_in:
            raise ValidationError(f"embedding width {emb.shape[1]} != bridge d_in {self.d_in}")
        self.module_.eval()
        out = self.module_(torch.from_numpy(emb)[None])
        return out[0].numpy()

    def transform(self, X):
        return [self.map_one(x) for x in X]

    def save(self, path, encoder_checksum: str | None = None) -> str:
        self._require_fitted()
        upstream = {}
        checksum = encoder_checksum or getattr(self, "encoder_checksum_", None)
        if checksum:
            upstream["encoder"] = checksum
        return save_checkpoint(
            path,
            state_dict_to_arrays(self.module_.state_dict()),
            kind=f"bridge_{self.kind}",
            config=self.get_params(),
            upstream=upstream,
        )

    def load(self, path, encoder_checksum: str | None = None):
        arrays, header = load_checkpoint(path, expect_kind=f"bridge_{self.kind}")
        for key, val in self.get_params().items():
            if key in header["config"] and header["config"][key] != val:
                raise CheckpointError(
                    f"bridge config mismatch for '{key}': {header['config'][key]} vs {val}"
                )
        recorded = header.get("upstream", {}).get("encoder")
        if encoder_checksum is not None and recorded != encoder_checksum:
            raise CheckpointError(
                f"bridge at {path} was trained against encoder {recorded}; "
                f"refusing to pair with encoder {encoder_checksum}"
            )
        self.module_ = self._build()
        self.module_.load_state_dict(arrays_to_state_dict(arrays))
        self.module_.eval()
        self.encoder_checksum_ = recorded
        self.checksum_ = state_dict_checksum(self.module_.state_dict())
        return self


class MlpBridge(_BridgeBase):
    """Per-frame 2-layer projection followed by mean pooling; one output slot."""

    kind = "mlp"
    n_queries = 1

    def __init__(self, d_in: int = 64, d_out: int = 64, hidden: int = 128, seed: int = 0):
        self.d_in = d_in
        self.d_out = d_out
        self.hidden = hidden
        self.seed = seed

    def _build(self):
        if self.d_out < 8:
            raise ValidationError("d_out must be >= 8")
        return MlpBridgeModule(self.d_in, self.d_out, self.hidden)


class QFormerBridge(_BridgeBase):
    kind = "qformer"

    def __init__(
        self,
        d_in: int = 64,
        d_out: int = 64,
        n_queries: int = 16,
        layers: int = 2,
        heads: int = 4,
        seed: int = 0,
    ):
        self.d_in = d_in
        self.d_out = d_out
        self.n_queries = n_queries
        self.layers = layers
        self.heads = heads
        self.seed = seed

    def _build(self):
        if self.n_queries < 1:
            raise ValidationError("n_queries must be >= 1")
        if self.d_out < 8:
            raise ValidationError("d_out must be >= 8")
        return QFormerModule(self.d_in, self.d_out, self.n_queries, self.layers, self.heads)

    @torch.no_grad()
    def attention_maps(self, emb: np.ndarray) -> list[np.ndarray]:
        """Per-layer softmax maps [heads, N_q, F'] for one embedding matrix."""
        self._require_fitted()
        emb = torch.from_numpy(np.asarray(emb, dtype=np.float32))[None]
        _, attns = self.module_(emb, return_attn=True)
        return [a[0].numpy() for a in attns]


def rep_for_generation(rep: np.ndarray) -> np.ndarray:
    """Adapt a semantic representation to the generator's conditioning input.

    Identity reshape: N_q x D becomes a sequence of N_q condition tokens.
    """
    rep = np.asarray(rep, dtype=np.float32)
    if rep.ndim == 1:
        rep = rep[None, :]
    if rep.ndim != 2:
        raise ValidationError("semantic representation must be 1-D or 2-D")
    return rep


def load_bridge(path, encoder_checksum: str | None = None):
    _, header = load_checkpoint(path)
    kind = header.get("kind", "")
    if kind == "bridge_mlp":
        return MlpBridge(**header["config"]).load(path, encoder_checksum)
    if kind == "bridge_qformer":
        return QFormerBridge(**header["config"]).load(path, encoder_checksum)
    raise CheckpointError(f"{path} is not a bridge checkpoint (kind={kind})")
