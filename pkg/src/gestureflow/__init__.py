"""Speech-conditioned gesture synthesis with residual-VQ tokens and shortcut
flow-matching sampling."""

from .data import (
    REGIONS,
    REGION_COUPLING,
    REGION_WIDTHS,
    CorpusSample,
    MotionSequence,
    SpeechTrack,
    gen_corpus,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .flow import LossProfile, ShortcutBatchPlan, TimeSampler
from .metrics import MotionFeatureExtractor, beat_constancy, bc_gap, extract_gesture_beats, face_mse, fgd, l1_diversity
from .pipeline import ShortcutGestureModel
from .rvq import ResidualVQCodec
from .sampler import SamplingConfig, batch_generate

__version__ = "0.1.0"

__all__ = [
    "REGIONS",
    "REGION_COUPLING",
    "REGION_WIDTHS",
    "CorpusSample",
    "LossProfile",
    "MotionFeatureExtractor",
    "MotionSequence",
    "ResidualVQCodec",
    "SamplingConfig",
    "ShortcutBatchPlan",
    "ShortcutGestureModel",
    "SpeechTrack",
    "TimeSampler",
    "batch_generate",
    "bc_gap",
    "beat_constancy",
    "extract_gesture_beats",
    "face_mse",
    "fgd",
    "gen_corpus",
    "l1_diversity",
    "read_corpus",
    "split_corpus",
    "write_corpus",
    "__version__",
]
