"""Beat-driven synthetic motion corpus: generation, persistence, splitting.

Each sample couples a speech track (onset envelope + beat frames + token ids)
to four body-region channel groups. Beats trigger critically damped spring
strokes in the upper body; hands fire a coupled, delayed stroke whose
amplitude is tied to the upper stroke through a fixed region-coupling matrix;
the lower body drifts slowly; face channels carry a smoothed copy of the
envelope plus noise. Token ids encode quantized tempo and per-beat amplitude
class, so the "text" stream is informative about the motion.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .container import FORMAT_VERSION, FormatError, read_tensor, write_tensor
from .validation import check_finite, check_motion, check_ratio_sum

__all__ = [
    "REGIONS",
    "REGION_WIDTHS",
    "REGION_COUPLING",
    "TOKEN_VOCAB",
    "BodyRegionSpec",
    "MotionSequence",
    "SpeechTrack",
    "CorpusSample",
    "gen_corpus",
    "write_corpus",
    "read_corpus",
    "split_corpus",
    "phase_shuffled",
    "noise_like",
]

REGIONS = ("upper", "hands", "lower", "face")
REGION_WIDTHS = {"upper": 24, "hands": 48, "lower": 12, "face": 16}
TOKEN_VOCAB = 64
SPLIT_TAGS = ("train", "val", "test", "generated")

# rows are driven regions, columns are sources (order as REGIONS); the
# off-diagonal first column scales how upper-body strokes propagate
REGION_COUPLING = np.array(
    [
        [1.00, 0.0, 0.0, 0.0],
        [1.40, 1.0, 0.0, 0.0],
        [0.25, 0.0, 1.0, 0.0],
        [0.30, 0.0, 0.0, 1.0],
    ]
)

_TEMPO_RANGE = (0.8, 2.0)
_TEMPO_CLASSES = 8
_AMP_CLASSES = 8
_AMP_BASE = 0.5
_AMP_STEP = 0.15
_AMP_JITTER = 0.06
_ENVELOPE_DECAY = 4.0
_DIRECTION_JITTER = 0.3


_STYLE_COUNT = 4
_STYLE_WEIGHT = 0.6


def _direction_dictionary() -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Fixed per-region stroke direction banks.

    The class bank (one unit row per amplitude class) makes strokes
    stereotyped and speech-predictable; the style bank modulates them with a
    per-beat style that is shared across regions but absent from the speech
    channels, so coordinating it requires looking across regions."""
    rng = np.random.default_rng(20240831)
    class_bank = {}
    style_bank = {}
    for region in ("upper", "hands", "lower"):
        raw = rng.normal(size=(_AMP_CLASSES, REGION_WIDTHS[region]))
        class_bank[region] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        raw = rng.normal(size=(_STYLE_COUNT, REGION_WIDTHS[region]))
        style_bank[region] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return class_bank, style_bank


STROKE_DIRECTIONS, STYLE_DIRECTIONS = _direction_dictionary()


@dataclass(frozen=True)
class BodyRegionSpec:
    region_id: str
    width: int

    def __post_init__(self):
        if self.region_id not in REGIONS:
            raise ValueError(f"unknown region {self.region_id!r}")
        if self.width <= 0:
            raise ValueError("region width must be positive")


DEFAULT_REGION_SPECS = tuple(BodyRegionSpec(r, REGION_WIDTHS[r]) for r in REGIONS)
assert sum(s.width for s in DEFAULT_REGION_SPECS) == 100


@dataclass
class MotionSequence:
    """Per-region frame matrices sharing a common length and frame rate."""

    regions: dict[str, np.ndarray]
    frame_rate: int = 30
    seq_id: str = ""

    def __post_init__(self):
        lengths = {r: m.shape[0] for r, m in self.regions.items()}
        if len(set(lengths.values())) != 1:
            raise ValueError(f"regions disagree on length: {lengths}")
        for r, m in self.regions.items():
            self.regions[r] = check_motion(m, REGION_WIDTHS.get(r), name=f"region {r}")

    @property
    def frames(self) -> int:
        return next(iter(self.regions.values())).shape[0]

    def stacked(self) -> np.ndarray:
        """All regions concatenated channel-wise, shape (T, 100) under defaults."""
        return np.concatenate([self.regions[r] for r in REGIONS if r in self.regions], axis=1)


@dataclass
class SpeechTrack:
    envelope: np.ndarray
    beats: np.ndarray
    tokens: np.ndarray

    def __post_init__(self):
        self.envelope = check_finite(np.asarray(self.envelope, dtype=np.float64), "envelope")
        self.beats = np.asarray(self.beats, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        t = self.envelope.shape[0]
        if self.envelope.min() < 0 or self.envelope.max() > 1:
            raise ValueError("envelope must lie in [0, 1]")
        if np.any(np.diff(self.beats) <= 0):
            raise ValueError("beat times must be strictly increasing")
        if self.beats.size and (self.beats[0] < 0 or self.beats[-1] >= t):
            raise ValueError("beat times must lie within [0, T)")
        if self.tokens.shape[0] != t:
            raise ValueError("token track must cover every frame")

    @property
    def frames(self) -> int:
        return self.envelope.shape[0]


@dataclass
class CorpusSample:
    motion: MotionSequence
    speech: SpeechTrack
    split: str = "train"

    def __post_init__(self):
        if self.motion.frames != self.speech.frames:
            raise ValueError("motion and speech must share T")
        if self.split not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split!r}")

    @property
    def frames(self) -> int:
        return self.motion.frames

    def crop(self, start: int, frames: int) -> "CorpusSample":
        """Window [start, start+frames); beats are shifted and filtered."""
        stop = start + frames
        if start < 0 or stop > self.frames:
            raise ValueError("crop window out of range")
        regions = {r: m[start:stop].copy() for r, m in self.motion.regions.items()}
        beats = self.speech.beats
        beats = beats[(beats >= start) & (beats < stop)] - start
        return CorpusSample(
            motion=MotionSequence(regions, self.motion.frame_rate, f"{self.motion.seq_id}[{start}:{stop}]"),
            speech=SpeechTrack(self.speech.envelope[start:stop].copy(), beats,
                               self.speech.tokens[start:stop].copy()),
            split=self.split,
        )


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    if x.ndim == 1:
        return np.convolve(x, kernel, mode="same")
    return np.stack([np.convolve(x[:, c], kernel, mode="same") for c in range(x.shape[1])], axis=1)


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def _stroke_direction(rng: np.random.Generator, region: str, amp_class: int, style: int) -> np.ndarray:
    base = STROKE_DIRECTIONS[region][amp_class] + _STYLE_WEIGHT * STYLE_DIRECTIONS[region][style]
    v = base + _DIRECTION_JITTER * _unit(rng, base.shape[0])
    return v / np.linalg.norm(v)


def _stroke_profile(length: int) -> np.ndarray:
    """Per-frame displacement weights of one damped half-swing: velocity
    rises from zero, peaks, and decays back to zero at arrival, so beats sit
    in symmetric velocity valleys that survive smoothing."""
    x = (np.arange(length) + 0.5) / length
    w = np.sin(np.pi * x) * np.exp(-0.3 * x)
    return w / w.sum()


def _arc_track(frames: int, width: int, events: list[tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Integrate pose arcs: each event moves the pose by ``delta`` over
    [start, end) with the damped half-swing profile, then holds."""
    steps = np.zeros((frames, width))
    for start, end, delta in events:
        length = end - start
        if length < 2:
            continue
        steps[start:end] += _stroke_profile(length)[:, None] * delta[None, :]
    return np.cumsum(steps, axis=0)


def _gen_sample(seed: int, index: int, frames: int, fps: int) -> CorpusSample:
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    tempo = rng.uniform(*_TEMPO_RANGE)
    interval = fps / tempo
    tempo_cls = min(int((tempo - _TEMPO_RANGE[0]) / (_TEMPO_RANGE[1] - _TEMPO_RANGE[0]) * _TEMPO_CLASSES),
                    _TEMPO_CLASSES - 1)

    # beat grid with +-10% interval jitter; an early first beat guarantees at
    # least two beats in any window of >= 64 frames
    beats = [float(rng.uniform(2.0, 8.0))]
    while True:
        nxt = beats[-1] + interval * (1.0 + rng.uniform(-0.1, 0.1))
        if nxt >= frames - 3:
            break
        beats.append(nxt)
    beat_frames = np.array(sorted({int(round(b)) for b in beats}), dtype=np.int64)
    k_beats = beat_frames.size
    # strokes triggered by beat k land exactly on beat k+1; the last stroke
    # ends at a virtual next beat (clipped to the window)
    ends = np.append(beat_frames[1:], min(int(beat_frames[-1] + interval), frames - 1))

    amp_cls = rng.integers(0, _AMP_CLASSES, size=k_beats)
    styles = rng.integers(0, _STYLE_COUNT, size=k_beats)
    amps = _AMP_BASE + (amp_cls + 0.5) * _AMP_STEP + rng.uniform(-_AMP_JITTER, _AMP_JITTER, size=k_beats)
    delays = rng.integers(1, 4, size=k_beats)

    wu, wh, wl = (REGION_WIDTHS[r] for r in ("upper", "hands", "lower"))
    upper_events, hand_events, lower_events = [], [], []
    pose_u = np.zeros(wu)
    pose_h = np.zeros(wh)
    pose_l = np.zeros(wl)
    for k in range(k_beats):
        cls = int(amp_cls[k])
        sty = int(styles[k])
        step_u = amps[k] * _stroke_direction(rng, "upper", cls, sty) - 0.4 * pose_u
        step_h = (REGION_COUPLING[1, 0] * amps[k] * _stroke_direction(rng, "hands", cls, sty)
                  - 0.4 * pose_h)
        step_l = (REGION_COUPLING[2, 0] * amps[k] * _stroke_direction(rng, "lower", cls, sty)
                  - 0.4 * pose_l)
        upper_events.append((int(beat_frames[k]), int(ends[k]), step_u))
        h_start = min(int(beat_frames[k] + delays[k]), frames - 2)
        h_end = min(int(ends[k] + delays[k]), frames - 1)
        hand_events.append((h_start, h_end, step_h))
        lower_events.append((int(beat_frames[k]), int(ends[k]), step_l))
        pose_u += step_u
        pose_h += step_h
        pose_l += step_l

    track = np.concatenate([
        _arc_track(frames, wu, upper_events),
        _arc_track(frames, wh, hand_events),
        _arc_track(frames, wl, lower_events),
    ], axis=1)

    # slow lower-body drift layered on top of its weak coupled strokes
    drift = np.empty((frames, wl))
    state = rng.normal(size=wl) * 0.1
    for f in range(frames):
        state = 0.995 * state + 0.02 * rng.normal(size=wl)
        drift[f] = state
    track[:, wu + wh :] += _smooth(drift, 9)

    envelope = np.zeros(frames)
    for bf in beat_frames:
        tail = np.exp(-(np.arange(frames - bf)) / _ENVELOPE_DECAY)
        envelope[bf:] += tail
    envelope = np.clip(envelope, 0.0, 1.0)

    face_gain = rng.uniform(0.5, 1.5, size=REGION_WIDTHS["face"])
    face = REGION_COUPLING[3, 0] * _smooth(envelope, 5)[:, None] * face_gain[None, :]
    face = face + 0.05 * rng.normal(size=face.shape)

    tokens = np.zeros(frames, dtype=np.int64)
    current = int(amp_cls[0])
    bi = 0
    for f in range(frames):
        while bi < beat_frames.size and beat_frames[bi] <= f:
            current = int(amp_cls[bi])
            bi += 1
        tokens[f] = tempo_cls * _AMP_CLASSES + current

    regions = {
        "upper": np.clip(track[:, :wu], -3.0, 3.0),
        "hands": np.clip(track[:, wu : wu + wh], -3.0, 3.0),
        "lower": np.clip(track[:, wu + wh :], -3.0, 3.0),
        "face": np.clip(face, -3.0, 3.0),
    }
    motion = MotionSequence(regions, frame_rate=fps, seq_id=f"s{seed}-{index:05d}")
    speech = SpeechTrack(envelope, beat_frames, tokens)
    return CorpusSample(motion, speech)


def gen_corpus(seed: int, count: int, frames: int, fps: int = 30) -> list[CorpusSample]:
    """Deterministic corpus: sample ``i`` is a pure function of ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if frames < 64:
        raise ValueError("frames must be >= 64")
    return [_gen_sample(seed, i, frames, fps) for i in range(count)]


# -- persistence -----------------------------------------------------------------

_TAG_BYTES = {t: i for i, t in enumerate(SPLIT_TAGS)}
_BYTE_TAGS = {i: t for t, i in _TAG_BYTES.items()}


def write_corpus(samples: list[CorpusSample], path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            sid = s.motion.seq_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(struct.pack("<B", _TAG_BYTES[s.split]))
            fh.write(struct.pack("<H", s.motion.frame_rate))
            fh.write(struct.pack("<I", s.frames))
            for r in REGIONS:
                write_tensor(fh, s.motion.regions[r])
            write_tensor(fh, s.speech.envelope)
            fh.write(struct.pack("<I", s.speech.beats.size))
            fh.write(s.speech.beats.astype("<u4").tobytes())
            fh.write(struct.pack("<I", s.speech.tokens.size))
            fh.write(s.speech.tokens.astype("<u2").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated corpus file: wanted {n} bytes, got {len(data)}")
    return data


def read_corpus(path) -> list[CorpusSample]:
    samples: list[CorpusSample] = []
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2))
            sid = _read_exact(fh, id_len).decode("utf-8")
            (tag,) = struct.unpack("<B", _read_exact(fh, 1))
            if tag not in _BYTE_TAGS:
                raise FormatError(f"unknown split tag byte {tag}")
            (fps,) = struct.unpack("<H", _read_exact(fh, 2))
            (t,) = struct.unpack("<I", _read_exact(fh, 4))
            regions = {r: read_tensor(fh) for r in REGIONS}
            envelope = read_tensor(fh)
            (nbeats,) = struct.unpack("<I", _read_exact(fh, 4))
            beats = np.frombuffer(_read_exact(fh, 4 * nbeats), dtype="<u4").astype(np.int64)
            (ntok,) = struct.unpack("<I", _read_exact(fh, 4))
            tokens = np.frombuffer(_read_exact(fh, 2 * ntok), dtype="<u2").astype(np.int64)
            if any(m.shape[0] != t for m in regions.values()) or envelope.shape[0] != t:
                raise FormatError("record length fields disagree with tensor shapes")
            samples.append(
                CorpusSample(
                    MotionSequence(regions, frame_rate=fps, seq_id=sid),
                    SpeechTrack(envelope, beats, tokens),
                    split=_BYTE_TAGS[tag],
                )
            )
    return samples


def _id_hash(sample_id: str) -> int:
    digest = hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def split_corpus(samples: list[CorpusSample], ratios=(0.8, 0.1, 0.1)) -> list[CorpusSample]:
    """Assign train/val/test tags by rank order of a stable per-id hash.

    Rank bucketing (rather than independent per-id thresholding) keeps bucket
    sizes within +-1 of the requested ratios while staying a pure function of
    the sample ids.
    """
    arr = check_ratio_sum(ratios)
    if arr.size != 3:
        raise ValueError("ratios must have three entries (train, val, test)")
    n = len(samples)
    order = sorted(range(n), key=lambda i: (_id_hash(samples[i].motion.seq_id), samples[i].motion.seq_id))
    # largest-remainder apportionment of bucket sizes
    raw = arr * n
    sizes = np.floor(raw).astype(int)
    for _ in range(n - sizes.sum()):
        sizes[int(np.argmax(raw - sizes))] += 1
    bounds = np.cumsum(sizes)
    for rank, i in enumerate(order):
        samples[i].split = "train" if rank < bounds[0] else ("val" if rank < bounds[1] else "test")
    return samples


# -- evaluation helpers ------------------------------------------------------------


def phase_shuffled(sample: CorpusSample, offset: int | None = None) -> CorpusSample:
    """Roll all motion channels in time, destroying speech-motion alignment."""
    t = sample.frames
    offset = t // 2 if offset is None else offset % t
    regions = {r: np.roll(m, offset, axis=0) for r, m in sample.motion.regions.items()}
    return CorpusSample(
        MotionSequence(regions, sample.motion.frame_rate, sample.motion.seq_id + "+shuf"),
        sample.speech,
        split=sample.split,
    )


def noise_like(sample: CorpusSample, rng: np.random.Generator) -> CorpusSample:
    """White-noise motion with matched shapes, for metric floor baselines."""
    regions = {r: np.clip(rng.normal(scale=0.5, size=m.shape), -3, 3)
               for r, m in sample.motion.regions.items()}
    return CorpusSample(
        MotionSequence(regions, sample.motion.frame_rate, sample.motion.seq_id + "+noise"),
        sample.speech,
        split=sample.split,
    )
