"""Reference event classifier on spectral features of real audio.

Backs every generation metric: its sigmoid posteriors feed the KL and
inception-score metrics, its penultimate layer embeds clips for the Fréchet
distance, and thresholded posteriors give per-clip event detections. The
training gate (held-out F1 >= 0.95 on real audio) guarantees the corpus is
separable before any generative result is trusted.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .checkpoint import (
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .utils import derive_seed, f1_score_sets, seed_everything, state_dict_checksum
from .validation import ValidationError, check_waveform

FRAME = 512
HOP = 256
N_BANDS = 24
N_MOD = 8


def spectral_features(samples: np.ndarray, sample_rate: int = 16000) -> np.ndarray:
    """Fixed feature map: log band energies (mean and deviation over frames)
    plus a modulation spectrum of the frame-energy envelope."""
    samples = check_waveform(samples)
    if samples.size < FRAME:
        samples = np.pad(samples, (0, FRAME - samples.size))
    n_frames = 1 + (samples.size - FRAME) // HOP
    window = np.hanning(FRAME)
    idx = np.arange(FRAME)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2  # [n_frames, FRAME//2+1]

    edges = np.unique(
        np.round(np.geomspace(2, power.shape[1] - 1, N_BANDS + 1)).astype(int)
    )
    while len(edges) < N_BANDS + 1:  # guard against merged low bins
        edges = np.append(edges, edges[-1] + 1)
    band = np.stack(
        [power[:, a:b].sum(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1
    )
    log_band = np.log(band + 1e-8)
    feat_mean = log_band.mean(axis=0)
    feat_std = log_band.std(axis=0)

    envelope = power.sum(axis=1)
    envelope = envelope - envelope.mean()
    mod = np.abs(np.fft.rfft(envelope)) ** 2
    frame_rate = sample_rate / HOP
    mod_freqs = np.fft.rfftfreq(envelope.size, d=1.0 / frame_rate)
    mod_edges = np.linspace(1.0, 17.0, N_MOD + 1)
    mod_feat = np.array(
        [
            np.log(mod[(mod_freqs >= a) & (mod_freqs < b)].sum() + 1e-8)
            for a, b in zip(mod_edges[:-1], mod_edges[1:])
        ]
    )
    return np.concatenate([feat_mean, feat_std, mod_feat]).astype(np.float32)


class _OracleNet(nn.Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.body = nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh())
        self.head = nn.Linear(hidden, n_classes)

    def forward(self, x):
        emb = self.body(x)
        return self.head(emb), emb


class OracleEventClassifier(BaseEstimator):
    """Multi-label MLP on spectral features; exposes posteriors and embeddings."""

    def __init__(
        self,
        n_classes: int = 8,
        hidden: int = 32,
        epochs: int = 300,
        lr: float = 1e-2,
        threshold: float = 0.5,
        min_f1: float = 0.95,
        seed: int = 0,
    ):
        self.n_classes = n_classes
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.threshold = threshold
        self.min_f1 = min_f1
        self.seed = seed

    def fit(self, X, y, validation_data=None):
        """X: list of waveforms; y: multihot labels. Aborts if the held-out
        F1 gate is not met (the corpus or training is then misconfigured)."""
        feats = np.stack([spectral_features(x) for x in X])
        y = np.asarray(y, dtype=np.float32)
        if validation_data is None:
            n_val = max(1, len(feats) // 5)
            feats, fv = feats[:-n_val], feats[-n_val:]
            y, yv = y[:-n_val], y[-n_val:]
        else:
            fv = np.stack([spectral_features(x) for x in validation_data[0]])
            yv = np.asarray(validation_data[1], dtype=np.float32)
        self.feat_mean_ = feats.mean(axis=0)
        self.feat_std_ = feats.std(axis=0) + 1e-6
        seed_everything(derive_seed(self.seed, "oracle"))
        self.net_ = _OracleNet(feats.shape[1], self.hidden, self.n_classes)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        bce = nn.BCEWithLogitsLoss()
        xt = torch.from_numpy((feats - self.feat_mean_) / self.feat_std_)
        yt = torch.from_numpy(y)
        for epoch in range(self.epochs):
            logits, _ = self.net_(xt)
            loss = bce(logits, yt)
            if not torch.isfinite(loss):
                raise RuntimeError(f"oracle training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.net_.eval()
        f1 = self.mean_f1(fv, yv)
        self.holdout_f1_ = f1
        if f1 < self.min_f1:
            raise RuntimeError(
                f"oracle classifier reached held-out F1 {f1:.3f} < {self.min_f1}; "
                "corpus or oracle training is misconfigured"
            )
        self.checksum_ = state_dict_checksum(self.net_.state_dict())
        return self

    def mean_f1(self, feats: np.ndarray, y: np.ndarray) -> float:
        proba = self._proba_from_feats(feats)
        scores = []
        for row, labels in zip(proba, y):
            pred = set(np.flatnonzero(row >= self.threshold))
            true = set(np.flatnonzero(labels == 1))
            scores.append(f1_score_sets(pred, true))
        return float(np.mean(scores))

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("oracle classifier is not fitted")

    def _proba_from_feats(self, feats: np.ndarray) -> np.ndarray:
        self._require_fitted()
        x = torch.from_numpy((feats - self.feat_mean_) / self.feat_std_)
        with torch.no_grad():
            logits, _ = self.net_(x.float())
        return torch.sigmoid(logits).double().numpy()

    def featurize(self, waves) -> np.ndarray:
        return np.stack([spectral_features(w) for w in waves])

    def predict_proba(self, waves) -> np.ndarray:
        """Per-class sigmoid posteriors, one row per clip."""
        return self._proba_from_feats(self.featurize(waves))

    def embed(self, waves) -> np.ndarray:
        """Penultimate-layer embeddings for distribution metrics."""
        self._require_fitted()
        feats = self.featurize(waves)
        x = torch.from_numpy((feats - self.feat_mean_) / self.feat_std_)
        with torch.no_grad():
            _, emb = self.net_(x.float())
        return emb.double().numpy()

    def detect_events(self, wave) -> tuple[int, ...]:
        proba = self.predict_proba([wave])[0]
        return tuple(int(i) for i in np.flatnonzero(proba >= self.threshold))

    def save(self, path, upstream: dict | None = None) -> str:
        self._require_fitted()
        arrays = state_dict_to_arrays(self.net_.state_dict())
        arrays["feat_mean"] = self.feat_mean_
        arrays["feat_std"] = self.feat_std_
        return save_checkpoint(
            path,
            arrays,
            kind="oracle",
            config=self.get_params(),
            upstream=upstream or {},
            extra={"holdout_f1": float(self.holdout_f1_)},
        )

    def load(self, path):
        arrays, header = load_checkpoint(path, expect_kind="oracle")
        self.feat_mean_ = arrays.pop("feat_mean")
        self.feat_std_ = arrays.pop("feat_std")
        d_in = self.feat_mean_.shape[0]
        self.net_ = _OracleNet(d_in, self.hidden, self.n_classes)
        self.net_.load_state_dict(arrays_to_state_dict(arrays))
        self.net_.eval()
        self.holdout_f1_ = float(header["extra"]["holdout_f1"])
        self.checksum_ = state_dict_checksum(self.net_.state_dict())
        return self


def load_oracle(path) -> OracleEventClassifier:
    _, header = load_checkpoint(path, expect_kind="oracle")
    return OracleEventClassifier(**header["config"]).load(path)
