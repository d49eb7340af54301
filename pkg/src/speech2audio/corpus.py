"""Synthetic paired corpus: event captions, pseudo-speech feature frames, audio clips.

Eight fixed event classes are rendered by four signal families (tones, chirps,
band noise, pulse trains). Captions are token templates over a small
vocabulary; speech is a deterministic token-to-frame rendering plus seeded
noise, so a matched decoder can invert it exactly at zero noise.

Every output is a pure function of (inputs, seed); per-record seeds are
derived by hashing, so parallel and serial builds produce identical bytes.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .utils import derive_seed, config_hash
from .validation import ValidationError, check_event_ids, check_positive

PATTERN_TABLE_SEED = 0x5EED_7AB1E  # fixed at corpus-build time, not user-tunable
AUDIO_PROTO_SEED = 0xA0D10


@dataclass(frozen=True)
class EventClass:
    """One sound event category with a fixed renderer."""

    id: int
    name: str
    renderer: str  # pure_tone | chirp | noise_burst | pulse_train
    params: tuple[float, ...]


DEFAULT_EVENT_CLASSES: tuple[EventClass, ...] = (
    EventClass(0, "tone_low", "pure_tone", (440.0,)),
    EventClass(1, "tone_high", "pure_tone", (880.0,)),
    EventClass(2, "chirp_up", "chirp", (300.0, 1200.0)),
    EventClass(3, "chirp_down", "chirp", (2000.0, 500.0)),
    EventClass(4, "noise_mid", "noise_burst", (500.0, 1500.0)),
    EventClass(5, "noise_high", "noise_burst", (3000.0, 6000.0)),
    EventClass(6, "pulse_slow", "pulse_train", (4.0, 2500.0)),
    EventClass(7, "pulse_fast", "pulse_train", (9.0, 7000.0)),
)


@dataclass(frozen=True)
class Caption:
    """Token rendering of an event set. Events are canonically sorted."""

    tokens: tuple[int, ...]
    events: tuple[int, ...]
    seed: int


@dataclass
class SpeechUtterance:
    """Pseudo-spectral feature frames standing in for a spoken caption."""

    frames: np.ndarray  # F x d_speech float32
    frame_rate: float
    source_caption_id: int = -1


@dataclass
class AudioClip:
    samples: np.ndarray  # float32 in [-1, 1]
    sample_rate: int
    events: tuple[int, ...]


@dataclass
class CorpusConfig:
    n_classes: int = 8
    duration_s: float = 2.0
    sample_rate: int = 16000
    d_speech: int = 40
    frames_per_token: int = 8
    speech_noise: float = 0.6
    max_events: int = 3
    frame_rate: float = 50.0
    # per-class caption template lengths (token count for a single-event caption)
    template_lengths: tuple[int, ...] = (3, 2, 4, 3, 2, 3, 4, 2)

    def __post_init__(self):
        if self.n_classes < 8:
            raise ValidationError("need at least 8 event classes")
        if len(self.template_lengths) != self.n_classes:
            raise ValidationError("template_lengths must cover every class")

    def to_dict(self) -> dict:
        return asdict(self)


class Vocabulary:
    """Token inventory: UNK, connectors, and per-class caption templates.

    Also owns the fixed token-to-pattern table used by the speech renderer.
    Each token's pattern is a distinct permutation of one shared bank of
    per-frame spectral profiles, so a single frame never identifies a token;
    only the frame order within a block does.
    """

    UNK = 0

    def __init__(self, config: CorpusConfig):
        self.config = config
        self.connectors = (1, 2)
        self.templates: list[tuple[int, ...]] = []
        next_token = 3
        for length in config.template_lengths:
            self.templates.append(tuple(range(next_token, next_token + length)))
            next_token += length
        self.size = next_token
        self._patterns = self._build_pattern_table()

    def _build_pattern_table(self) -> np.ndarray:
        k, d = self.config.frames_per_token, self.config.d_speech
        rng = np.random.default_rng(PATTERN_TABLE_SEED)
        # smooth unit-RMS profiles, one per frame slot in a token block
        bank = rng.standard_normal((k, d))
        kernel = np.ones(5) / 5.0
        bank = np.stack([np.convolve(row, kernel, mode="same") for row in bank])
        bank /= np.sqrt(np.mean(bank**2, axis=1, keepdims=True))
        seen: set[tuple[int, ...]] = set()
        patterns = np.zeros((self.size, k, d), dtype=np.float32)
        for token in range(self.size):
            perm = tuple(rng.permutation(k))
            while perm in seen:
                perm = tuple(rng.permutation(k))
            seen.add(perm)
            patterns[token] = bank[list(perm)]
        return patterns

    def template(self, class_id: int) -> tuple[int, ...]:
        return self.templates[class_id]

    def pattern(self, token: int) -> np.ndarray:
        if not 0 <= token < self.size:
            raise ValidationError(f"token {token} outside vocabulary of size {self.size}")
        return self._patterns[token]

    @property
    def patterns(self) -> np.ndarray:
        return self._patterns


def _fade(signal: np.ndarray, sample_rate: int, ms: float = 10.0) -> np.ndarray:
    n = min(len(signal), int(sample_rate * ms / 1000.0))
    if n > 1:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, n))
        signal[:n] *= ramp
        signal[-n:] *= ramp[::-1]
    return signal


def _render_event_prototype(cls: EventClass, n: int, sample_rate: int) -> np.ndarray:
    """Fixed per-class waveform, peak-normalized. Noise realizations are frozen."""
    t = np.arange(n) / sample_rate
    if cls.renderer == "pure_tone":
        (freq,) = cls.params
        sig = np.sin(2 * np.pi * freq * t)
    elif cls.renderer == "chirp":
        f0, f1 = cls.params
        inst = np.linspace(f0, f1, n)
        phase = 2 * np.pi * np.cumsum(inst) / sample_rate
        sig = np.sin(phase)
    elif cls.renderer == "noise_burst":
        low, high = cls.params
        rng = np.random.default_rng(derive_seed(AUDIO_PROTO_SEED, cls.id))
        # looped band-noise: FFT-filtering one short segment makes it
        # circularly periodic, so tiling is seamless and the realization
        # stays fixed and compact
        period = 1024
        white = rng.standard_normal(period)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(period, d=1.0 / sample_rate)
        spec[(freqs < low) | (freqs > high)] = 0.0
        segment = np.fft.irfft(spec, n=period)
        reps = -(-n // period)
        sig = np.tile(segment, reps)[:n]
        sig /= np.max(np.abs(sig)) + 1e-12
    elif cls.renderer == "pulse_train":
        rate, carrier = cls.params
        sig = np.zeros(n)
        pulse_len = int(0.06 * sample_rate)
        tp = np.arange(pulse_len) / sample_rate
        pulse = np.sin(2 * np.pi * carrier * tp) * np.exp(-tp / 0.02)
        step = int(sample_rate / rate)
        for start in range(0, n, step):
            end = min(start + pulse_len, n)
            sig[start:end] += pulse[: end - start]
    else:
        raise ValidationError(f"unknown renderer {cls.renderer}")
    sig = _fade(sig.astype(np.float64), sample_rate)
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig = sig / peak
    return sig.astype(np.float32)


class CorpusGenerator:
    """Deterministic builder for (caption, speech, audio) triples."""

    def __init__(self, config: CorpusConfig | None = None):
        self.config = config or CorpusConfig()
        self.classes = DEFAULT_EVENT_CLASSES[: self.config.n_classes]
        if len(self.classes) < self.config.n_classes:
            raise ValidationError("no renderer definitions beyond 8 classes")
        self.vocab = Vocabulary(self.config)
        self._prototypes: dict[int, np.ndarray] = {}

    # -- caption ---------------------------------------------------------

    def compose_caption(self, events, seed: int) -> Caption:
        """Join per-event templates with seeded connector tokens.

        Events are treated as a set: canonical (sorted) order, duplicates
        ignored. Identical (events, seed) always yields identical tokens.
        """
        ids = check_event_ids(events, self.config.n_classes)
        rng = np.random.default_rng(derive_seed(seed, "caption", *ids))
        tokens: list[int] = []
        for i, class_id in enumerate(ids):
            if i > 0:
                tokens.append(int(rng.choice(self.vocab.connectors)))
            tokens.extend(self.vocab.template(class_id))
        return Caption(tokens=tuple(tokens), events=ids, seed=seed)

    # -- speech ----------------------------------------------------------

    def render_speech(
        self, caption: Caption, seed: int, noise_amp: float | None = None
    ) -> SpeechUtterance:
        """Expand each token to its k-frame pattern block plus seeded noise."""
        if not caption.tokens:
            raise ValidationError("caption has no tokens")
        k = self.config.frames_per_token
        blocks = [self.vocab.pattern(tok) for tok in caption.tokens]
        frames = np.concatenate(blocks, axis=0).astype(np.float32)
        amp = self.config.speech_noise if noise_amp is None else noise_amp
        if amp > 0:
            rng = np.random.default_rng(derive_seed(seed, "speech", caption.tokens))
            frames = frames + amp * rng.standard_normal(frames.shape).astype(np.float32)
        assert frames.shape[0] == k * len(caption.tokens)
        return SpeechUtterance(frames=frames, frame_rate=self.config.frame_rate)

    # -- audio -----------------------------------------------------------

    def event_prototype(self, class_id: int, n_samples: int) -> np.ndarray:
        key = (class_id, n_samples)
        if key not in self._prototypes:
            self._prototypes[key] = _render_event_prototype(
                self.classes[class_id], n_samples, self.config.sample_rate
            )
        return self._prototypes[key]

    def render_audio(self, events, duration_s: float, seed: int) -> AudioClip:
        """Mix per-event prototypes with seeded gains; peak-normalize to 0.9.

        An empty event set renders silence of the exact requested length.
        """
        check_positive(duration_s, "duration_s")
        ids = check_event_ids(events, self.config.n_classes, allow_empty=True)
        n = int(round(duration_s * self.config.sample_rate))
        if not ids:
            return AudioClip(np.zeros(n, dtype=np.float32), self.config.sample_rate, ids)
        rng = np.random.default_rng(derive_seed(seed, "audio", *ids))
        mix = np.zeros(n, dtype=np.float64)
        for class_id in ids:
            gain = rng.uniform(0.7, 1.0)
            mix += gain * self.event_prototype(class_id, n)
        peak = np.max(np.abs(mix))
        if peak > 0:
            mix = mix * (0.9 / peak)
        return AudioClip(mix.astype(np.float32), self.config.sample_rate, ids)

    # -- record sampling ---------------------------------------------------

    def _sample_events(self, rng: np.random.Generator) -> tuple[int, ...]:
        n = int(rng.choice([1, 2, 3], p=[0.4, 0.35, 0.25]))
        n = min(n, self.config.max_events)
        picked = rng.choice(self.config.n_classes, size=n, replace=False)
        return tuple(sorted(int(c) for c in picked))

    def record_events(self, record_id: int, split: str, seed: int) -> tuple[int, ...]:
        """Event set for one record. The first C train records cycle the C
        classes one at a time so every class is covered by construction."""
        if split == "train" and record_id < self.config.n_classes:
            return (record_id % self.config.n_classes,)
        rng = np.random.default_rng(derive_seed(seed, "events", split, record_id))
        return self._sample_events(rng)

    # -- corpus build ------------------------------------------------------

    def build(self, n_train: int, n_val: int, n_test: int, seed: int, out_dir) -> Path:
        """Write WAVs, speech features, manifest, and a provenance header.

        Splits are disjoint by id range. Rebuilding with the same arguments
        produces byte-identical files.
        """
        for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
            if n < 1:
                raise ValidationError(f"{name} must be >= 1")
        out_dir = Path(out_dir)
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
        (out_dir / "speech").mkdir(parents=True, exist_ok=True)
        records = []
        next_id = 0
        for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
            for i in range(count):
                record_id = next_id
                next_id += 1
                rec_seed = derive_seed(seed, "record", record_id)
                events = self.record_events(i, split, seed)
                caption = self.compose_caption(events, rec_seed)
                speech = self.render_speech(caption, rec_seed)
                audio = self.render_audio(events, self.config.duration_s, rec_seed)
                audio_path = f"audio/rec_{record_id:06d}.wav"
                speech_path = f"speech/rec_{record_id:06d}.f32"
                write_wav(out_dir / audio_path, audio.samples, self.config.sample_rate)
                write_features(out_dir / speech_path, speech.frames)
                records.append(
                    {
                        "id": record_id,
                        "split": split,
                        "tokens": list(caption.tokens),
                        "events": list(events),
                        "speech_path": speech_path,
                        "audio_path": audio_path,
                    }
                )
        with open(out_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        meta = {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config.to_dict()),
            "seed": seed,
            "counts": {"train": n_train, "val": n_val, "test": n_test},
            "vocab_size": self.vocab.size,
            "class_names": [c.name for c in self.classes],
        }
        with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
        return out_dir


# -- file formats ----------------------------------------------------------


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Mono 16-bit PCM."""
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValidationError(f"{path} is not mono 16-bit PCM")
        sample_rate = wf.getframerate()
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / 32767.0), sample_rate


def write_features(path, frames: np.ndarray) -> None:
    """Row-major float32 little-endian, with an (F, d) sidecar header line."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(frames.tobytes())
    with open(str(path) + ".hdr", "w", encoding="utf-8") as fh:
        fh.write(f"{frames.shape[0]} {frames.shape[1]}\n")


def read_features(path) -> np.ndarray:
    with open(str(path) + ".hdr", "r", encoding="utf-8") as fh:
        f, d = (int(x) for x in fh.readline().split())
    data = np.fromfile(path, dtype="<f4")
    if data.size != f * d:
        raise ValidationError(f"feature payload of {path} does not match its header")
    return data.reshape(f, d)


# -- corpus loading ----------------------------------------------------------


@dataclass
class CorpusRecord:
    id: int
    split: str
    tokens: tuple[int, ...]
    events: tuple[int, ...]
    speech_path: str
    audio_path: str


class CorpusData:
    """Read-only view over a built corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "meta.json"
        if not meta_path.exists():
            raise ValidationError(f"no corpus at {self.root} (missing meta.json)")
        self.meta = json.loads(meta_path.read_text())
        self.config = CorpusConfig(**self.meta["config"])
        self.records = []
        with open(self.root / "manifest.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                raw = json.loads(line)
                self.records.append(
                    CorpusRecord(
                        id=raw["id"],
                        split=raw["split"],
                        tokens=tuple(raw["tokens"]),
                        events=tuple(raw["events"]),
                        speech_path=raw["speech_path"],
                        audio_path=raw["audio_path"],
                    )
                )

    def split(self, name: str) -> list[CorpusRecord]:
        return [r for r in self.records if r.split == name]

    def load_speech(self, record: CorpusRecord) -> np.ndarray:
        return read_features(self.root / record.speech_path)

    def load_audio(self, record: CorpusRecord) -> np.ndarray:
        samples, _ = read_wav(self.root / record.audio_path)
        return samples

    def label_matrix(self, records) -> np.ndarray:
        y = np.zeros((len(records), self.config.n_classes), dtype=np.float32)
        for i, rec in enumerate(records):
            y[i, list(rec.events)] = 1.0
        return y
