"""Desk-scale end-to-end speech-to-audio generation.

Components: a synthetic paired corpus, masked-prediction and autoencoding
speech encoders, MLP and Q-Former bridge networks, a waveform VAE, a
conditional flow-matching generator with classifier-free guidance, a cascaded
ASR-plus-text baseline, and an evaluation/benchmark harness.
"""

__version__ = "0.1.0"

from .corpus import (
    AudioClip,
    Caption,
    CorpusConfig,
    CorpusData,
    CorpusGenerator,
    EventClass,
    SpeechUtterance,
)
from .encoders import AcousticSpeechEncoder, SemanticSpeechEncoder
from .bridge import MlpBridge, QFormerBridge
from .probe import EventProbe, average_precision, mean_average_precision
from .vae import WaveformVae
from .flowmatch import FlowGenerator, SamplerConfig, fm_loss, interpolate, sway_schedule
from .cascade import AsrConfig, TextConditioner, ToyAsr
from .oracle import OracleEventClassifier

__all__ = [
    "AudioClip",
    "Caption",
    "CorpusConfig",
    "CorpusData",
    "CorpusGenerator",
    "EventClass",
    "SpeechUtterance",
    "SemanticSpeechEncoder",
    "AcousticSpeechEncoder",
    "MlpBridge",
    "QFormerBridge",
    "EventProbe",
    "average_precision",
    "mean_average_precision",
    "WaveformVae",
    "FlowGenerator",
    "SamplerConfig",
    "fm_loss",
    "interpolate",
    "sway_schedule",
    "AsrConfig",
    "ToyAsr",
    "TextConditioner",
    "OracleEventClassifier",
]
