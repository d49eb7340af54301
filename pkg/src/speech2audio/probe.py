"""Stage-1 representation probing: multi-label event classification over
bridged representations, scored by mean average precision.

Ranking convention: scores sorted descending with stable tie-breaking by
original index. Classes without a single positive are undefined and excluded
from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .bridge import MlpBridge, QFormerBridge
from .nn_blocks import bucket_batches
from .utils import derive_seed, seed_everything, state_dict_checksum
from .validation import ValidationError


class UndefinedAveragePrecision(ValidationError):
    """AP is undefined for a class with zero positive labels."""


def average_precision(scores, labels) -> float:
    """AP: mean of precision at each positive's rank, descending-score order."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ValidationError("scores and labels must be equal-length and nonempty")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise UndefinedAveragePrecision("no positive labels; AP undefined")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    hits = np.cumsum(sorted_labels == 1)
    ranks = np.arange(1, scores.size + 1)
    precisions = hits[sorted_labels == 1] / ranks[sorted_labels == 1]
    return float(np.sum(precisions) / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray):
    """Unweighted mean AP over classes that have at least one positive.

    Returns (mAP, per_class_AP) where undefined classes hold NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValidationError("score and label matrices must share an n x C shape")
    per_class = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        try:
            per_class[c] = average_precision(scores[:, c], labels[:, c])
        except UndefinedAveragePrecision:
            continue
    if np.all(np.isnan(per_class)):
        raise ValidationError("no class has a positive label; mAP undefined")
    return float(np.nanmean(per_class)), per_class


@dataclass
class ProbeResult:
    mAP: float
    per_class_AP: list[float]
    epochs_run: int
    encoder_kind: str
    bridge_kind: str
    history: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class _ProbeTrainer:
    """BCE training with early stopping on validation mAP."""

    def __init__(self, lr, max_epochs, patience, batch_size, seed):
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def train(self, forward, parameters, batches_of, val_proba, y_train, y_val):
        opt = torch.optim.Adam(parameters, lr=self.lr)
        bce = nn.BCEWithLogitsLoss()
        best_map, best_state, best_epoch = -1.0, None, 0
        history = {"train_loss": [], "val_map": []}
        epochs_run = 0
        for epoch in range(self.max_epochs):
            epochs_run = epoch + 1
            rng = np.random.default_rng(derive_seed(self.seed, "probe_epoch", epoch))
            losses = []
            for idx in batches_of(rng):
                logits = forward(idx)
                loss = bce(logits, torch.from_numpy(y_train[idx]))
                if not torch.isfinite(loss):
                    raise RuntimeError(f"probe training diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            history["train_loss"].append(float(np.mean(losses)))
            val_map, _ = mean_average_precision(val_proba(), y_val)
            history["val_map"].append(val_map)
            if val_map > best_map + 1e-12:
                best_map, best_epoch = val_map, epoch
                best_state = [p.detach().clone() for p in parameters]
            if epoch - best_epoch >= self.patience:
                break
        if best_state is not None:
            with torch.no_grad():
                for p, b in zip(parameters, best_state):
                    p.copy_(b)
        return best_map, epochs_run, history


class EventProbe(BaseEstimator):
    """Trains a bridge plus a linear classifier head on frozen embeddings.

    Defaults: lr 3.2e-3, at most 500 epochs, early stopping patience 20 on
    validation mAP. The embeddings (and the encoder that produced them) are
    never touched.
    """

    def __init__(
        self,
        bridge: str = "qformer",
        d_in: int = 64,
        d_s: int = 64,
        n_queries: int = 16,
        layers: int = 2,
        heads: int = 4,
        mlp_hidden: int = 128,
        lr: float = 3.2e-3,
        max_epochs: int = 500,
        patience: int = 20,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.bridge = bridge
        self.d_in = d_in
        self.d_s = d_s
        self.n_queries = n_queries
        self.layers = layers
        self.heads = heads
        self.mlp_hidden = mlp_hidden
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def _make_bridge(self):
        if self.bridge == "mlp":
            est = MlpBridge(d_in=self.d_in, d_out=self.d_s, hidden=self.mlp_hidden, seed=self.seed)
        elif self.bridge == "qformer":
            est = QFormerBridge(
                d_in=self.d_in,
                d_out=self.d_s,
                n_queries=self.n_queries,
                layers=self.layers,
                heads=self.heads,
                seed=self.seed,
            )
        else:
            raise ValidationError(f"unknown bridge kind '{self.bridge}'")
        return est

    def fit(self, X, y, validation_data=None, encoder_kind: str = "unknown"):
        """X: list of F' x d_in embedding matrices; y: n x C multihot labels."""
        if len(X) == 0:
            raise ValidationError("empty training split")
        y = np.asarray(y, dtype=np.float32)
        if validation_data is None:
            n_val = max(1, len(X) // 5)
            X, X_val = X[:-n_val], X[-n_val:]
            y, y_val = y[:-n_val], y[-n_val:]
        else:
            X_val, y_val = validation_data
            y_val = np.asarray(y_val, dtype=np.float32)
        if len(X_val) == 0:
            raise ValidationError("empty validation split")

        seed_everything(derive_seed(self.seed, "probe", self.bridge))
        bridge_est = self._make_bridge().init_module()
        bridge_module = bridge_est.module_
        n_slots = 1 if self.bridge == "mlp" else self.n_queries
        head = nn.Linear(n_slots * self.d_s, y.shape[1])
        bridge_module.train()

        tensors = [torch.from_numpy(np.asarray(x, dtype=np.float32)) for x in X]
        val_tensors = [torch.from_numpy(np.asarray(x, dtype=np.float32)) for x in X_val]
        lengths = [t.shape[0] for t in tensors]

        def forward(idx):
            batch = torch.stack([tensors[i] for i in idx])
            rep = bridge_module(batch)
            return head(rep.flatten(1))

        @torch.no_grad()
        def val_proba():
            return self._proba_from(bridge_module, head, val_tensors)

        def batches_of(rng):
            return bucket_batches(lengths, self.batch_size, rng)

        params = list(bridge_module.parameters()) + list(head.parameters())
        trainer = _ProbeTrainer(self.lr, self.max_epochs, self.patience, self.batch_size, self.seed)
        best_map, epochs_run, history = trainer.train(
            forward, params, batches_of, val_proba, y, y_val
        )
        bridge_module.eval()
        _, per_class = mean_average_precision(
            self._proba_from(bridge_module, head, val_tensors), y_val
        )
        self.bridge_est_ = bridge_est.adopt_module(bridge_module)
        self.head_ = head
        self.result_ = ProbeResult(
            mAP=best_map,
            per_class_AP=[float(v) for v in per_class],
            epochs_run=epochs_run,
            encoder_kind=encoder_kind,
            bridge_kind=self.bridge,
            history=history,
        )
        self.checksum_ = state_dict_checksum(
            {**{f"bridge.{k}": v for k, v in bridge_module.state_dict().items()},
             **{f"head.{k}": v for k, v in head.state_dict().items()}}
        )
        return self

    @torch.no_grad()
    def _proba_from(self, bridge_module, head, tensors):
        out = np.zeros((len(tensors), head.out_features), dtype=np.float64)
        lengths = [t.shape[0] for t in tensors]
        for idx in bucket_batches(lengths, self.batch_size):
            batch = torch.stack([tensors[i] for i in idx])
            logits = head(bridge_module(batch).flatten(1))
            out[idx] = torch.sigmoid(logits).double().numpy()
        return out

    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "head_"):
            raise NotFittedError("EventProbe is not fitted")
        tensors = [torch.from_numpy(np.asarray(x, dtype=np.float32)) for x in X]
        return self._proba_from(self.bridge_est_.module_, self.head_, tensors)

    def score(self, X, y) -> float:
        m, _ = mean_average_precision(self.predict_proba(X), np.asarray(y))
        return m


class CaptionProbe(BaseEstimator):
    """Topline probe on caption tokens: learned embedding table, mean pooling,
    linear head. Same optimizer, early stopping, and metric as the speech probe."""

    def __init__(
        self,
        vocab_size: int = 64,
        d_s: int = 64,
        lr: float = 3.2e-3,
        max_epochs: int = 500,
        patience: int = 20,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.vocab_size = vocab_size
        self.d_s = d_s
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, validation_data=None):
        """X: list of token-id sequences; y: n x C multihot labels."""
        y = np.asarray(y, dtype=np.float32)
        if validation_data is None:
            n_val = max(1, len(X) // 5)
            X, X_val = X[:-n_val], X[-n_val:]
            y, y_val = y[:-n_val], y[-n_val:]
        else:
            X_val, y_val = validation_data
            y_val = np.asarray(y_val, dtype=np.float32)
        seed_everything(derive_seed(self.seed, "caption_probe"))
        embed = nn.EmbeddingBag(self.vocab_size, self.d_s, mode="mean")
        head = nn.Linear(self.d_s, y.shape[1])

        flat, offsets = _pack_sequences(X)
        flat_val, offsets_val = _pack_sequences(X_val)
        lengths = [len(t) for t in X]

        def forward(idx):
            sub = [X[i] for i in idx]
            f, o = _pack_sequences(sub)
            return head(embed(f, o))

        @torch.no_grad()
        def val_proba():
            return torch.sigmoid(head(embed(flat_val, offsets_val))).double().numpy()

        def batches_of(rng):
            return bucket_batches(lengths, self.batch_size, rng)

        params = list(embed.parameters()) + list(head.parameters())
        trainer = _ProbeTrainer(self.lr, self.max_epochs, self.patience, self.batch_size, self.seed)
        best_map, epochs_run, history = trainer.train(
            forward, params, batches_of, val_proba, y, y_val
        )
        self.embed_ = embed
        self.head_ = head
        self.result_ = ProbeResult(
            mAP=best_map,
            per_class_AP=[],
            epochs_run=epochs_run,
            encoder_kind="caption",
            bridge_kind="embedding_mean",
            history=history,
        )
        return self

    @torch.no_grad()
    def predict_proba(self, X) -> np.ndarray:
        if not hasattr(self, "head_"):
            raise NotFittedError("CaptionProbe is not fitted")
        flat, offsets = _pack_sequences(X)
        return torch.sigmoid(self.head_(self.embed_(flat, offsets))).double().numpy()

    def score(self, X, y) -> float:
        m, _ = mean_average_precision(self.predict_proba(X), np.asarray(y))
        return m


def _pack_sequences(seqs):
    offsets = torch.zeros(len(seqs), dtype=torch.long)
    total = 0
    flat = []
    for i, s in enumerate(seqs):
        offsets[i] = total
        flat.extend(int(t) for t in s)
        total += len(s)
    return torch.tensor(flat, dtype=torch.long), offsets
