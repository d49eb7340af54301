"""Conditional flow matching over VAE latents.

Data sits at t=0, noise at t=1: z_t = (1-t) z0 + t z1, and the network
regresses the constant displacement z1 - z0. Sampling integrates the learned
field from t=1 down to t=0 with an Euler solver on a sway-warped timestep
grid, using classifier-free guidance (two network evaluations per step).
"""

from __future__ import annotations

from dataclasses import dataclass

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
from .nn_blocks import CrossAttention, SelfAttention, sinusoidal_embedding
from .utils import derive_seed, seed_everything, state_dict_checksum
from .validation import ValidationError, check_same_shape


# -- path and loss -----------------------------------------------------------


@dataclass
class FlowState:
    z_t: np.ndarray
    t: float


def interpolate(z0, z1, t: float) -> FlowState:
    """Affine path point z_t = (1 - t) z0 + t z1."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    check_same_shape(z0, z1, "z0/z1")
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t={t} outside [0, 1]")
    return FlowState(z_t=(1.0 - t) * z0 + t * z1, t=float(t))


def fm_loss(v_pred, z0, z1) -> float:
    """Mean squared error between the prediction and the target field z1 - z0."""
    v_pred = np.asarray(v_pred, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    check_same_shape(v_pred, z0, "v_pred/z0")
    check_same_shape(z0, z1, "z0/z1")
    return float(np.mean((v_pred - (z1 - z0)) ** 2))


# -- timestep schedule --------------------------------------------------------


@dataclass(frozen=True)
class TimestepSchedule:
    """Strictly decreasing grid from exactly 1 to exactly 0 (noise to data)."""

    timesteps: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.float64)
        if ts.ndim != 1 or ts.size < 2:
            raise ValidationError("schedule needs at least two timesteps")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ValidationError("schedule must run from exactly 1 to exactly 0")
        if not np.all(np.diff(ts) < 0):
            raise ValidationError("schedule must be strictly decreasing")
        object.__setattr__(self, "timesteps", ts)

    @property
    def nfe(self) -> int:
        return self.timesteps.size - 1


def sway_schedule(nfe: int, s: float = -1.0) -> TimestepSchedule:
    """Warp a uniform grid by f(u) = u + s (cos(pi u / 2) - 1 + u), then
    reverse it for noise-to-data integration.

    s in [-1, 0]; s = 0 leaves the grid uniform, s = -1 concentrates steps
    near the noise end where few-step solvers need them.
    """
    if nfe < 1:
        raise ValidationError("nfe must be >= 1")
    if not -1.0 <= s <= 0.0:
        raise ValidationError(f"sway parameter s={s} outside [-1, 0]")
    u = np.linspace(0.0, 1.0, nfe + 1)
    warped = u + s * (np.cos(np.pi * u / 2.0) - 1.0 + u)
    ts = warped[::-1].copy()
    # endpoints are 1 and 0 analytically; pin them against cos(pi/2) rounding
    ts[0], ts[-1] = 1.0, 0.0
    return TimestepSchedule(ts)


@dataclass
class SamplerConfig:
    nfe: int = 20
    guidance_scale: float = 5.0
    sway_s: float = -1.0
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ValidationError("nfe must be >= 1")
        if self.guidance_scale < 0:
            raise ValidationError("guidance scale must be >= 0")


# -- velocity network ---------------------------------------------------------


class DiTBlock(nn.Module):
    """Self-attention + cross-attention + FFN with AdaLN step conditioning.

    The time embedding produces per-block scale/shift/gate for the
    self-attention and FFN branches (gates zero-initialized); conditioning
    enters through plain pre-LN cross-attention.
    """

    def __init__(self, hidden: int, heads: int, cond_width: int):
        super().__init__()
        self.ada = nn.Linear(hidden, 6 * hidden)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)
        self.ln_sa = nn.LayerNorm(hidden, elementwise_affine=False)
        self.attn = SelfAttention(hidden, heads)
        self.ln_ca = nn.LayerNorm(hidden)
        self.cross = CrossAttention(hidden, cond_width, heads)
        self.ln_ff = nn.LayerNorm(hidden, elementwise_affine=False)
        self.ffn = nn.Sequential(
            nn.Linear(hidden, 2 * hidden), nn.GELU(), nn.Linear(2 * hidden, hidden)
        )

    def forward(self, x, t_emb, cond):
        sh_a, sc_a, g_a, sh_f, sc_f, g_f = self.ada(t_emb)[:, None, :].chunk(6, dim=-1)
        h = self.ln_sa(x) * (1 + sc_a) + sh_a
        x = x + g_a * self.attn(h)
        x = x + self.cross(self.ln_ca(x), cond)
        h = self.ln_ff(x) * (1 + sc_f) + sh_f
        x = x + g_f * self.ffn(h)
        return x


class VelocityNet(nn.Module):
    def __init__(
        self,
        d_latent: int,
        hidden: int,
        blocks: int,
        heads: int,
        cond_width: int,
        time_embed: int,
    ):
        super().__init__()
        if hidden % heads:
            raise ValidationError("hidden must be divisible by heads")
        if blocks < 1:
            raise ValidationError("blocks must be >= 1")
        self.cond_width = cond_width
        self.time_embed = time_embed
        self.in_proj = nn.Linear(d_latent, hidden)
        self.time_mlp = nn.Sequential(
            nn.Linear(time_embed, hidden), nn.SiLU(), nn.Linear(hidden, hidden)
        )
        self.null_cond = nn.Parameter(torch.zeros(1, cond_width))
        self.blocks = nn.ModuleList(DiTBlock(hidden, heads, cond_width) for _ in range(blocks))
        self.ln_out = nn.LayerNorm(hidden, elementwise_affine=False)
        self.ada_out = nn.Linear(hidden, 2 * hidden)
        nn.init.zeros_(self.ada_out.weight)
        nn.init.zeros_(self.ada_out.bias)
        self.out_proj = nn.Linear(hidden, d_latent)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None):
        # z_t: [B, L, D]; t: [B]; cond: [B, Nc, cond_width] or None (null condition)
        b, length, _ = z_t.shape
        if cond is None:
            cond = self.null_cond[None].expand(b, -1, -1)
        if cond.shape[-1] != self.cond_width:
            raise ValidationError(
                f"conditioning width {cond.shape[-1]} != expected {self.cond_width}"
            )
        cond = cond.to(z_t.dtype)
        x = self.in_proj(z_t)
        pos = torch.arange(length, dtype=z_t.dtype, device=z_t.device)
        x = x + sinusoidal_embedding(pos, x.shape[-1])
        t_emb = self.time_mlp(sinusoidal_embedding(t.to(z_t.dtype) * 1000.0, self.time_embed))
        for block in self.blocks:
            x = block(x, t_emb, cond)
        sh, sc = self.ada_out(t_emb)[:, None, :].chunk(2, dim=-1)
        return self.out_proj(self.ln_out(x) * (1 + sc) + sh)


# -- estimator ----------------------------------------------------------------


@dataclass
class SampleResult:
    z: np.ndarray
    n_evals: int
    timesteps: np.ndarray


class FlowGenerator(BaseEstimator):
    """Latent flow-matching generator with classifier-free guidance.

    fit() consumes cached latent statistics and per-record conditioning
    sequences (the upstream encoder, bridge, and VAE stay frozen); sample()
    runs the Euler solver on the sway schedule.
    """

    def __init__(
        self,
        d_latent: int = 16,
        hidden: int = 128,
        blocks: int = 4,
        heads: int = 4,
        cond_width: int = 64,
        time_embed: int = 128,
        cond_drop_prob: float = 0.1,
        epochs: int = 100,
        lr: float = 1e-5,
        weight_decay: float = 0.01,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.d_latent = d_latent
        self.hidden = hidden
        self.blocks = blocks
        self.heads = heads
        self.cond_width = cond_width
        self.time_embed = time_embed
        self.cond_drop_prob = cond_drop_prob
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    def _build(self):
        return VelocityNet(
            self.d_latent, self.hidden, self.blocks, self.heads, self.cond_width, self.time_embed
        )

    def init_module(self):
        seed_everything(derive_seed(self.seed, "flow_init"))
        self.net_ = self._build()
        self.latent_scale_ = 1.0
        self.checksum_ = state_dict_checksum(self.net_.state_dict())
        return self

    def _require_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("FlowGenerator has no weights; fit or load first")

    def fit(
        self,
        z_mu,
        z_sigma,
        conds,
        init_from: "FlowGenerator | None" = None,
        extra_params: list[nn.Parameter] | None = None,
        cond_fn=None,
    ):
        """Train the velocity field.

        z_mu, z_sigma: [n, L, D] cached VAE posteriors; the trailing tenth
        serves as the validation slice. conds: [n, Nc, W] conditioning
        sequences, or opaque token data when cond_fn maps a batch of indices
        to conditioning tensors (used for text pretraining where the
        embedding table trains jointly; its parameters ride along via
        extra_params).
        """
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValidationError("cond_drop_prob must lie in [0, 1)")
        z_mu = np.asarray(z_mu, dtype=np.float32)
        z_sigma = np.asarray(z_sigma, dtype=np.float32)
        if init_from is not None:
            init_from._require_fitted()
            self.net_ = self._build()
            self.net_.load_state_dict(
                {k: v.clone() for k, v in init_from.net_.state_dict().items()}
            )
            self.latent_scale_ = float(init_from.latent_scale_)
        else:
            self.init_module()
            self.latent_scale_ = float(np.std(z_mu)) or 1.0
        scale = self.latent_scale_
        mu_t = torch.from_numpy(z_mu / scale)
        sigma_t = torch.from_numpy(z_sigma / scale)
        static_cond = cond_fn is None
        if static_cond:
            cond_t = torch.from_numpy(np.asarray(conds, dtype=np.float32))
        n = mu_t.shape[0]
        n_val = max(1, n // 10)
        val_slice = slice(n - n_val, n)
        train_idx = np.arange(n - n_val)
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "flow_noise") % 2**63)
        params = list(self.net_.parameters()) + list(extra_params or [])
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        history = {"train_loss": [], "val_loss": []}
        best = (float("inf"), None)
        val_ref = self._val_batch(mu_t[val_slice], sigma_t[val_slice])
        val_indices = np.arange(val_slice.start, val_slice.stop)

        def val_loss():
            with torch.no_grad():
                z_t, t, target = val_ref
                cond = cond_t[val_indices] if static_cond else cond_fn(val_indices)
                v = self.net_(z_t, t, cond)
                return float(((v - target) ** 2).mean())

        history["val_loss"].append(val_loss())
        for epoch in range(self.epochs):
            rng = np.random.default_rng(derive_seed(self.seed, "flow_epoch", epoch))
            order = rng.permutation(train_idx)
            losses = []
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size].copy()
                mu, sig = mu_t[idx], sigma_t[idx]
                z0 = mu + sig * torch.randn(mu.shape, generator=gen)
                z1 = torch.randn(mu.shape, generator=gen)
                t = torch.rand(len(idx), generator=gen)
                z_t = (1.0 - t[:, None, None]) * z0 + t[:, None, None] * z1
                cond = cond_t[idx] if static_cond else cond_fn(idx)
                if self.cond_drop_prob > 0:
                    drop = torch.rand(len(idx), generator=gen) < self.cond_drop_prob
                    if drop.any():
                        null_seq = self.net_.null_cond[None].expand(
                            int(drop.sum()), cond.shape[1], -1
                        )
                        cond = cond.clone()
                        cond[drop] = null_seq
                v = self.net_(z_t, t, cond)
                loss = ((v - (z1 - z0)) ** 2).mean()
                if not torch.isfinite(loss):
                    raise RuntimeError(f"flow training diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            history["train_loss"].append(float(np.mean(losses)))
            history["val_loss"].append(val_loss())
            if history["val_loss"][-1] < best[0]:
                best = (history["val_loss"][-1], {
                    k: v.detach().clone() for k, v in self.net_.state_dict().items()
                })
        if best[1] is not None and self.epochs > 0:
            self.net_.load_state_dict(best[1])
        self.net_.eval()
        self.history_ = history
        self.checksum_ = state_dict_checksum(self.net_.state_dict())
        return self

    def _val_batch(self, mu, sigma):
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "flow_val") % 2**63)
        z0 = mu + sigma * torch.randn(mu.shape, generator=gen)
        z1 = torch.randn(mu.shape, generator=gen)
        t = torch.rand(mu.shape[0], generator=gen)
        z_t = (1.0 - t[:, None, None]) * z0 + t[:, None, None] * z1
        return z_t, t, z1 - z0

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def velocity(self, z_t: np.ndarray, t: float, cond: np.ndarray | None) -> np.ndarray:
        """Single-state velocity evaluation; cond None selects the null embedding."""
        self._require_fitted()
        self.net_.eval()
        z = torch.from_numpy(np.asarray(z_t, dtype=np.float32))[None]
        tv = torch.tensor([float(t)], dtype=torch.float32)
        c = None
        if cond is not None:
            c = torch.from_numpy(np.asarray(cond, dtype=np.float32))[None]
        return self.net_(z, tv, c)[0].numpy()

    @torch.no_grad()
    def cfg_velocity(self, z_t: np.ndarray, t: float, cond: np.ndarray, g: float) -> np.ndarray:
        """v_null + g (v_cond - v_null); exactly two velocity evaluations."""
        v_cond = self.velocity(z_t, t, cond)
        v_null = self.velocity(z_t, t, None)
        return v_null + g * (v_cond - v_null)

    @torch.no_grad()
    def sample(self, cond: np.ndarray, sampler: SamplerConfig, length: int) -> SampleResult:
        """Euler-integrate from seeded noise at t=1 down to t=0.

        Runs 2 x nfe network evaluations (conditional + null per step).
        Returns the latent in the VAE's scale.
        """
        self._require_fitted()
        self.net_.eval()
        schedule = sway_schedule(sampler.nfe, sampler.sway_s)
        gen = torch.Generator().manual_seed(derive_seed(sampler.seed, "sample_noise") % 2**63)
        z = torch.randn((length, self.d_latent), generator=gen).numpy()
        n_evals = 0
        ts = schedule.timesteps
        for k in range(sampler.nfe):
            v = self.cfg_velocity(z, ts[k], cond, sampler.guidance_scale)
            n_evals += 2
            if not np.all(np.isfinite(v)) or not np.all(np.isfinite(z)):
                raise RuntimeError(f"non-finite flow state at solver step {k}")
            z = z + (ts[k + 1] - ts[k]) * v
        z = z * self.latent_scale_
        return SampleResult(z=z.astype(np.float32), n_evals=n_evals, timesteps=ts)

    @torch.no_grad()
    def sample_batch(self, conds: np.ndarray, sampler: SamplerConfig, length: int) -> np.ndarray:
        """Vectorized sampling for equal-shape conditioning sequences."""
        self._require_fitted()
        self.net_.eval()
        schedule = sway_schedule(sampler.nfe, sampler.sway_s)
        gen = torch.Generator().manual_seed(derive_seed(sampler.seed, "sample_noise") % 2**63)
        cond = torch.from_numpy(np.asarray(conds, dtype=np.float32))
        b = cond.shape[0]
        z = torch.randn((b, length, self.d_latent), generator=gen)
        ts = schedule.timesteps
        for k in range(sampler.nfe):
            t = torch.full((b,), float(ts[k]))
            v_cond = self.net_(z, t, cond)
            v_null = self.net_(z, t, None)
            v = v_null + sampler.guidance_scale * (v_cond - v_null)
            if not torch.all(torch.isfinite(v)):
                raise RuntimeError(f"non-finite flow state at solver step {k}")
            z = z + float(ts[k + 1] - ts[k]) * v
        return (z * self.latent_scale_).numpy().astype(np.float32)

    # -- persistence ---------------------------------------------------------

    def save(self, path, upstream: dict | None = None) -> str:
        self._require_fitted()
        return save_checkpoint(
            path,
            state_dict_to_arrays(self.net_.state_dict()),
            kind="flow",
            config=self.get_params(),
            upstream=upstream or {},
            extra={
                "latent_scale": float(self.latent_scale_),
                "history": getattr(self, "history_", {}),
            },
        )

    def load(self, path):
        arrays, header = load_checkpoint(path, expect_kind="flow")
        self.net_ = self._build()
        self.net_.load_state_dict(arrays_to_state_dict(arrays))
        self.net_.eval()
        self.latent_scale_ = float(header["extra"]["latent_scale"])
        self.history_ = header.get("extra", {}).get("history", {})
        self.checksum_ = state_dict_checksum(self.net_.state_dict())
        self.upstream_ = header.get("upstream", {})
        return self


def load_flow(path) -> FlowGenerator:
    _, header = load_checkpoint(path, expect_kind="flow")
    return FlowGenerator(**header["config"]).load(path)
