"""gapextract: deterministic toy-LM trace extraction producing trace bundles
and honouring intervention artifacts (calibration, KV merge plans)."""

from .artifacts import (
    ArtifactError,
    CalibrationArtifact,
    MergePlanArtifact,
    load_calibration,
    load_merge_plan,
)
from .dataset import FRAMES_PER_WORD, Item, audio_features, make_items, speech_prompt, text_prompt_ids
from .extract import CAPTURE_KINDS, ExtractionError, ExtractionJob, extract_traces
from .model import Captures, RuntimeInterventions, ToyLM
from .vocab import OPTION_IDS, VOCAB_SIZE, WORDS, decode, encode

__version__ = "0.1.0"

__all__ = [
    "ArtifactError",
    "CalibrationArtifact",
    "MergePlanArtifact",
    "load_calibration",
    "load_merge_plan",
    "FRAMES_PER_WORD",
    "Item",
    "audio_features",
    "make_items",
    "speech_prompt",
    "text_prompt_ids",
    "CAPTURE_KINDS",
    "ExtractionError",
    "ExtractionJob",
    "extract_traces",
    "Captures",
    "RuntimeInterventions",
    "ToyLM",
    "OPTION_IDS",
    "VOCAB_SIZE",
    "WORDS",
    "decode",
    "encode",
    "__version__",
]
