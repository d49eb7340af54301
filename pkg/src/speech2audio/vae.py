"""Waveform VAE: compresses audio by a power-of-two ratio into a latent
sequence [z_mu, z_sigma] and reconstructs waveforms from latent samples.

Strided 1-D convolutions over the raw waveform on both sides; latent length
is exactly ceil(T / R). Sigma comes from exp(log_std) clamped to [1e-8, 10].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .checkpoint import (
    CheckpointError,
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .utils import derive_seed, seed_everything, state_dict_checksum
from .validation import ValidationError, check_waveform

SIGMA_MIN, SIGMA_MAX = 1e-8, 10.0


@dataclass
class Latent:
    """Gaussian latent sequence; z_sigma holds standard deviations."""

    z_mu: np.ndarray  # L x D
    z_sigma: np.ndarray  # L x D, strictly positive
    ratio: int
    source_length: int

    @property
    def length(self) -> int:
        return self.z_mu.shape[0]


def kl_standard_normal(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Elementwise KL( N(mu, sigma^2) || N(0, 1) ) = (mu^2 + sigma^2 - 1 - 2 ln sigma) / 2."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValidationError("sigma must be strictly positive")
    return 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma))


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    noise = np.sum((reference - estimate) ** 2)
    if noise == 0:
        return float("inf")
    return float(10.0 * np.log10(np.sum(reference**2) / noise))


def _stride_plan(ratio: int) -> list[int]:
    if ratio < 2 or ratio & (ratio - 1):
        raise ValidationError("compression ratio must be a power of 2, >= 2")
    plan = []
    r = ratio
    while r >= 4:
        plan.append(4)
        r //= 4
    if r == 2:
        plan.append(2)
    return plan


class VaeEncoderNet(nn.Module):
    def __init__(self, ratio: int, d_latent: int, channels: tuple[int, ...]):
        super().__init__()
        strides = _stride_plan(ratio)
        if len(channels) < len(strides):
            raise ValidationError("need one channel width per downsampling stage")
        layers = []
        c_in = 1
        for stride, c_out in zip(strides, channels):
            k, p = (9, 4) if stride == 4 else (7, 3)
            layers += [nn.Conv1d(c_in, c_out, k, stride=stride, padding=p), nn.SiLU()]
            c_in = c_out
        self.stages = nn.Sequential(*layers)
        self.to_latent = nn.Conv1d(c_in, 2 * d_latent, 3, padding=1)
        self.d_latent = d_latent

    def forward(self, wav: torch.Tensor):
        # wav: [B, T] -> mu, log_std each [B, L, D]
        h = self.stages(wav[:, None, :])
        out = self.to_latent(h).transpose(1, 2)
        return out[..., : self.d_latent], out[..., self.d_latent :]


class VaeDecoderNet(nn.Module):
    def __init__(self, ratio: int, d_latent: int, channels: tuple[int, ...]):
        super().__init__()
        strides = list(reversed(_stride_plan(ratio)))
        chans = list(reversed(channels[: len(strides)]))
        self.from_latent = nn.Conv1d(d_latent, chans[0], 3, padding=1)
        layers = []
        for i, stride in enumerate(strides):
            c_in = chans[i]
            c_out = chans[i + 1] if i + 1 < len(chans) else chans[-1]
            k, p = (8, 2) if stride == 4 else (4, 1)
            layers += [nn.ConvTranspose1d(c_in, c_out, k, stride=stride, padding=p), nn.SiLU()]
        self.stages = nn.Sequential(*layers)
        self.to_wave = nn.Conv1d(chans[-1], 1, 9, padding=4)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: [B, L, D] -> [B, L * ratio]
        h = self.from_latent(z.transpose(1, 2))
        h = self.stages(h)
        return self.to_wave(h)[:, 0, :]


class WaveformVae(BaseEstimator):
    """Estimator facade: fit on waveforms, transform to latents, invert back."""

    def __init__(
        self,
        ratio: int = 512,
        d_latent: int = 16,
        kl_weight: float = 0.01,
        channels: tuple[int, ...] = (16, 32, 48, 64, 64),
        epochs: int = 30,
        lr: float = 1e-3,
        batch_size: int = 8,
        seed: int = 0,
    ):
        self.ratio = ratio
        self.d_latent = d_latent
        self.kl_weight = kl_weight
        self.channels = channels
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _check_config(self):
        if self.d_latent < 4:
            raise ValidationError("d_latent must be >= 4")
        if self.kl_weight < 0:
            raise ValidationError("kl_weight must be >= 0")
        _stride_plan(self.ratio)

    def _build(self):
        self.encoder_ = VaeEncoderNet(self.ratio, self.d_latent, tuple(self.channels))
        self.decoder_ = VaeDecoderNet(self.ratio, self.d_latent, tuple(self.channels))

    def fit(self, X, y=None, validation_data=None):
        """X: iterable of equal-length waveforms in [-1, 1]."""
        self._check_config()
        waves = np.stack([check_waveform(x) for x in X])
        if waves.shape[1] < self.ratio:
            raise ValidationError("clips shorter than one compression hop")
        if validation_data is None:
            n_val = max(1, len(waves) // 10)
            waves, val = waves[:-n_val], waves[-n_val:]
        else:
            val = np.stack([check_waveform(x) for x in validation_data])
        seed_everything(derive_seed(self.seed, "vae_init"))
        self._build()
        params = list(self.encoder_.parameters()) + list(self.decoder_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        noise_gen = torch.Generator().manual_seed(derive_seed(self.seed, "vae_noise") % 2**63)
        train_t = torch.from_numpy(waves)
        val_t = torch.from_numpy(val)
        history = {"train_loss": [], "val_recon": [], "val_kl": []}
        recon0, kl0 = self._eval_losses(val_t)
        history["val_recon"].append(recon0)
        history["val_kl"].append(kl0)
        best = (float("inf"), None)
        for epoch in range(self.epochs):
            rng = np.random.default_rng(derive_seed(self.seed, "vae_epoch", epoch))
            order = rng.permutation(len(train_t))
            losses = []
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                x = train_t[idx]
                mu, log_std = self.encoder_(x)
                sigma = torch.clamp(torch.exp(log_std), SIGMA_MIN, SIGMA_MAX)
                eps = torch.randn(mu.shape, generator=noise_gen)
                z = mu + sigma * eps
                recon = self.decoder_(z)[:, : x.shape[1]]
                recon_loss = ((recon - x) ** 2).mean()
                kl = (0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * torch.log(sigma))).mean()
                loss = recon_loss + self.kl_weight * kl
                if not torch.isfinite(loss):
                    raise RuntimeError(f"VAE training diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(params, 1.0)
                opt.step()
                losses.append(float(loss.detach()))
            history["train_loss"].append(float(np.mean(losses)))
            val_recon, val_kl = self._eval_losses(val_t)
            history["val_recon"].append(val_recon)
            history["val_kl"].append(val_kl)
            total = val_recon + self.kl_weight * val_kl
            if total < best[0]:
                best = (total, self._clone_state())
        if best[1] is not None and self.epochs > 0:
            self._load_state(best[1])
        self.encoder_.eval()
        self.decoder_.eval()
        self.history_ = history
        self.checksum_ = self._checksum()
        return self

    @torch.no_grad()
    def _eval_losses(self, val_t: torch.Tensor):
        mu, log_std = self.encoder_(val_t)
        sigma = torch.clamp(torch.exp(log_std), SIGMA_MIN, SIGMA_MAX)
        recon = self.decoder_(mu)[:, : val_t.shape[1]]
        recon_loss = float(((recon - val_t) ** 2).mean())
        kl = float((0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * torch.log(sigma))).mean())
        return recon_loss, kl

    def _state_dict(self):
        sd = {}
        for name, module in (("encoder", self.encoder_), ("decoder", self.decoder_)):
            for k, v in module.state_dict().items():
                sd[f"{name}.{k}"] = v
        return sd

    def _clone_state(self):
        return {k: v.detach().clone() for k, v in self._state_dict().items()}

    def _load_state(self, sd):
        self.encoder_.load_state_dict(
            {k[len("encoder."):]: v for k, v in sd.items() if k.startswith("encoder.")}
        )
        self.decoder_.load_state_dict(
            {k[len("decoder."):]: v for k, v in sd.items() if k.startswith("decoder.")}
        )

    def _checksum(self):
        return state_dict_checksum(self._state_dict())

    def _require_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("WaveformVae has no weights; fit or load first")

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def encode(self, samples: np.ndarray) -> Latent:
        self._require_fitted()
        samples = check_waveform(samples)
        if samples.size < self.ratio:
            raise ValidationError(
                f"clip of {samples.size} samples is shorter than one hop ({self.ratio})"
            )
        self.encoder_.eval()
        mu, log_std = self.encoder_(torch.from_numpy(samples)[None])
        sigma = torch.clamp(torch.exp(log_std), SIGMA_MIN, SIGMA_MAX)
        latent = Latent(
            z_mu=mu[0].numpy(),
            z_sigma=sigma[0].numpy(),
            ratio=self.ratio,
            source_length=samples.size,
        )
        expected = -(-samples.size // self.ratio)
        assert latent.length == expected, "latent length must equal ceil(T / R)"
        return latent

    def sample_latent(self, latent: Latent, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(latent.z_mu.shape).astype(np.float32)
        return latent.z_mu + latent.z_sigma * eps

    @torch.no_grad()
    def decode(self, z: np.ndarray, trim_to: int | None = None) -> np.ndarray:
        self._require_fitted()
        z = np.asarray(z, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.d_latent:
            raise ValidationError(
                f"latent must be L x {self.d_latent}, got {z.shape}"
            )
        self.decoder_.eval()
        wav = self.decoder_(torch.from_numpy(z)[None])[0].numpy()
        assert wav.shape[0] == z.shape[0] * self.ratio
        if trim_to is not None:
            wav = wav[:trim_to]
        return np.clip(wav, -1.0, 1.0)

    def transform(self, X):
        return [self.encode(x) for x in X]

    def inverse_transform(self, Z, trim_to: int | None = None):
        return [self.decode(z, trim_to=trim_to) for z in Z]

    def reconstruct(self, samples: np.ndarray) -> np.ndarray:
        """decode(encode(x).z_mu), trimmed to the input length."""
        latent = self.encode(samples)
        return self.decode(latent.z_mu, trim_to=latent.source_length)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> str:
        self._require_fitted()
        return save_checkpoint(
            path,
            state_dict_to_arrays(self._state_dict()),
            kind="vae",
            config=self.get_params(),
            extra={"history": getattr(self, "history_", {})},
        )

    def load(self, path):
        arrays, header = load_checkpoint(path, expect_kind="vae")
        cfg = dict(header["config"])
        cfg["channels"] = tuple(cfg["channels"])
        if cfg != {**self.get_params(), "channels": tuple(self.channels)}:
            mismatched = {
                k: (cfg.get(k), v)
                for k, v in self.get_params().items()
                if cfg.get(k) != (tuple(v) if k == "channels" else v)
            }
            raise CheckpointError(f"VAE config mismatch: {mismatched}")
        self._build()
        state = arrays_to_state_dict(arrays)
        self._load_state(state)
        self.encoder_.eval()
        self.decoder_.eval()
        self.history_ = header.get("extra", {}).get("history", {})
        self.checksum_ = self._checksum()
        return self


def load_vae(path) -> WaveformVae:
    _, header = load_checkpoint(path, expect_kind="vae")
    cfg = dict(header["config"])
    cfg["channels"] = tuple(cfg["channels"])
    return WaveformVae(**cfg).load(path)
