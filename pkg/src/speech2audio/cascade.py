"""Cascaded baseline: toy ASR into text conditioning into the shared generator.

The speech renderer's token-to-frame map is invertible, so ASR decodes by
nearest-pattern matching per frame block and is exact at zero error rates.
Recognition errors (substitutions, deletions) are injected explicitly with a
seeded generator, and a calibrated busy-work loop models ASR decode cost so
the latency benchmark reflects the extra pipeline stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from .corpus import Caption, CorpusGenerator, SpeechUtterance
from .checkpoint import (
    arrays_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_arrays,
)
from .utils import derive_seed
from .validation import ValidationError, check_probability

# fraction of the minimum inter-pattern gap granted above the noise floor
# before a frame block is declared not produced by the renderer
DECODE_REJECT_FACTOR = 0.35


@dataclass
class AsrConfig:
    substitution_rate: float = 0.0
    deletion_rate: float = 0.0
    seed: int = 0
    fixed_overhead_ops: int = 0

    def __post_init__(self):
        check_probability(self.substitution_rate, "substitution_rate")
        check_probability(self.deletion_rate, "deletion_rate")
        if self.substitution_rate + self.deletion_rate > 1.0:
            raise ValidationError("substitution_rate + deletion_rate must be <= 1")
        if self.fixed_overhead_ops < 0:
            raise ValidationError("fixed_overhead_ops must be >= 0")


class ToyAsr:
    """Block-matching decoder over the renderer's fixed token patterns."""

    def __init__(self, generator: CorpusGenerator):
        self.generator = generator
        self.vocab = generator.vocab
        k, d = generator.config.frames_per_token, generator.config.d_speech
        self._flat_patterns = self.vocab.patterns.reshape(self.vocab.size, k * d)
        self._busy_a = np.linspace(-1.0, 1.0, 64 * 64, dtype=np.float32).reshape(64, 64)
        self._busy_b = np.linspace(1.0, -1.0, 64 * 64, dtype=np.float32).reshape(64, 64)
        # distance scale for undecodable-input detection: smallest squared
        # distance between two distinct vocabulary patterns
        diffs = []
        for i in range(self.vocab.size):
            d2 = np.sum((self._flat_patterns - self._flat_patterns[i]) ** 2, axis=1)
            d2[i] = np.inf
            diffs.append(d2.min())
        self._min_pattern_gap = float(min(diffs))

    def decode_tokens(self, frames: np.ndarray) -> list[int]:
        k = self.generator.config.frames_per_token
        d = self.generator.config.d_speech
        if frames.ndim != 2 or frames.shape[1] != d:
            raise ValidationError("frames do not match the renderer's feature width")
        if frames.shape[0] == 0 or frames.shape[0] % k:
            raise ValidationError(
                f"frame count {frames.shape[0]} is not a whole number of {k}-frame blocks"
            )
        blocks = frames.reshape(-1, k * d)
        tokens = []
        # residual beyond the expected noise energy must stay well under the
        # minimum inter-pattern gap, else the block is not renderer output
        noise_floor = (self.generator.config.speech_noise**2) * k * d
        limit = noise_floor + DECODE_REJECT_FACTOR * self._min_pattern_gap
        for block in blocks:
            d2 = np.sum((self._flat_patterns - block) ** 2, axis=1)
            best = int(np.argmin(d2))
            if d2[best] > limit:
                raise ValidationError("frames are not decodable to vocabulary tokens")
            tokens.append(best)
        return tokens

    def _busy_work(self, ops: int) -> None:
        acc = self._busy_a
        for _ in range(ops):
            acc = acc @ self._busy_b
            acc = np.tanh(acc * 1e-4)
        if not np.all(np.isfinite(acc)):  # keeps the loop from being elided
            raise RuntimeError("busy work overflow")

    def transcribe(self, utterance: SpeechUtterance, config: AsrConfig) -> Caption:
        """Decode, then corrupt with seeded substitutions and deletions.

        Runs config.fixed_overhead_ops busy-work units first so decode cost
        is measurable by the latency harness.
        """
        self._busy_work(config.fixed_overhead_ops)
        tokens = self.decode_tokens(np.asarray(utterance.frames, dtype=np.float32))
        rng = np.random.default_rng(derive_seed(config.seed, "asr", len(tokens)))
        out: list[int] = []
        for tok in tokens:
            u = rng.uniform()
            if u < config.deletion_rate:
                continue
            if u < config.deletion_rate + config.substitution_rate:
                repl = int(rng.integers(0, self.vocab.size - 1))
                if repl >= tok:
                    repl += 1
                out.append(repl)
            else:
                out.append(tok)
        events = self._events_from_tokens(out)
        return Caption(tokens=tuple(out), events=events, seed=config.seed)

    def _events_from_tokens(self, tokens: list[int]) -> tuple[int, ...]:
        # nominal event readback (used for bookkeeping, not generation)
        hits = set()
        toks = set(tokens)
        for class_id, template in enumerate(self.vocab.templates):
            if set(template) <= toks:
                hits.add(class_id)
        return tuple(sorted(hits))


class TextConditioner(BaseEstimator):
    """Caption tokens to a single conditioning vector: learned embedding
    table with mean pooling. Out-of-vocabulary tokens map to a reserved UNK
    row so corrupted transcripts flow through instead of failing."""

    def __init__(self, vocab_size: int = 64, width: int = 64, seed: int = 0):
        self.vocab_size = vocab_size
        self.width = width
        self.seed = seed

    def init_module(self):
        torch.manual_seed(derive_seed(self.seed, "text_embed") % 2**63)
        self.embed_ = nn.Embedding(self.vocab_size, self.width)
        return self

    def _require_fitted(self):
        if not hasattr(self, "embed_"):
            raise NotFittedError("TextConditioner has no table; init, fit, or load first")

    def _safe_ids(self, tokens) -> torch.Tensor:
        ids = [int(t) if 0 <= int(t) < self.vocab_size else 0 for t in tokens]
        if not ids:
            ids = [0]
        return torch.tensor(ids, dtype=torch.long)

    def condition(self, caption: Caption) -> np.ndarray:
        """Mean token embedding as a 1-token conditioning sequence [1, width]."""
        with torch.no_grad():
            return self.condition_tensor(caption.tokens).numpy()

    def condition_tensor(self, tokens) -> torch.Tensor:
        self._require_fitted()
        rows = self.embed_(self._safe_ids(tokens))
        return rows.mean(dim=0, keepdim=True)

    def batch_condition(self, token_lists) -> torch.Tensor:
        self._require_fitted()
        return torch.stack([self.condition_tensor(toks) for toks in token_lists])

    def transform(self, X):
        return [self.condition(c) if isinstance(c, Caption) else
                self.condition(Caption(tokens=tuple(c), events=(), seed=0)) for c in X]

    def parameters(self):
        self._require_fitted()
        return list(self.embed_.parameters())

    def save(self, path, upstream: dict | None = None) -> str:
        self._require_fitted()
        return save_checkpoint(
            path,
            state_dict_to_arrays(self.embed_.state_dict()),
            kind="text_conditioner",
            config=self.get_params(),
            upstream=upstream or {},
        )

    def load(self, path):
        arrays, header = load_checkpoint(path, expect_kind="text_conditioner")
        if header["config"] != self.get_params():
            raise ValidationError(
                f"text conditioner config mismatch: {header['config']} vs {self.get_params()}"
            )
        self.init_module()
        self.embed_.load_state_dict(arrays_to_state_dict(arrays))
        return self


def load_text_conditioner(path) -> TextConditioner:
    _, header = load_checkpoint(path, expect_kind="text_conditioner")
    return TextConditioner(**header["config"]).load(path)


def cascade_generate(
    utterance: SpeechUtterance,
    asr: ToyAsr,
    asr_config: AsrConfig,
    conditioner: TextConditioner,
    generator,
    vae,
    sampler,
    latent_length: int,
) -> np.ndarray:
    """ASR -> text condition -> flow sampling -> VAE decode."""
    caption = asr.transcribe(utterance, asr_config)
    cond = conditioner.condition(caption)
    result = generator.sample(cond, sampler, length=latent_length)
    return vae.decode(result.z)
