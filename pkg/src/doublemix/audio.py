"""Synthetic speech-event audio: clip synthesis, splice/overlay composition,
log-magnitude STFT features and 16-bit PCM WAV I/O."""
from __future__ import annotations

import hashlib
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

SAMPLE_RATE = 8000
WINDOW = 200  # 25 ms
HOP = 80  # 10 ms
NUM_BINS = 64
LOG_FLOOR = -10.0
PEAK = 0.9

SEMANTIC = "semantic"
ACOUSTIC = "acoustic"

SEMANTIC_NAMES = ["conflict", "movement", "scenario", "talk", "life", "action",
                  "process", "justice", "contact", "business"]
ACOUSTIC_NAMES = ["nature", "animal", "human", "urban", "domestic"]


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EventLabel:
    kind: str
    class_id: int
    class_name: str = field(default="", compare=False)
    task_id: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in (SEMANTIC, ACOUSTIC):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.task_id < 0:
            raise ValueError("task_id must be non-negative")

    @property
    def key(self) -> str:
        return f"{self.kind[0]}{self.class_id}"

    @classmethod
    def from_key(cls, key: str, **kw) -> "EventLabel":
        kind = {"s": SEMANTIC, "a": ACOUSTIC}[key[0]]
        return cls(kind, int(key[1:]), **kw)


def class_name(kind: str, class_id: int) -> str:
    names = SEMANTIC_NAMES if kind == SEMANTIC else ACOUSTIC_NAMES
    return names[class_id] if class_id < len(names) else f"{kind[:3]}{class_id}"


def sort_labels(labels) -> list[EventLabel]:
    """Semantic first, then acoustic, each by class id."""
    return sorted(labels, key=lambda lab: (lab.kind != SEMANTIC, lab.class_id))


@dataclass(eq=False)
class AudioClip:
    samples: np.ndarray
    labels: frozenset
    sample_rate: int = SAMPLE_RATE
    uid: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = frozenset(self.labels)
        if self.samples.ndim != 1:
            raise ValueError("samples must be mono")
        if np.abs(self.samples).max(initial=0.0) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")
        if not self.labels:
            raise ValueError("a clip needs at least one label")
        kinds = [lab.kind for lab in self.labels]
        if kinds.count(SEMANTIC) > 1 or kinds.count(ACOUSTIC) > 1:
            raise ValueError("at most one semantic and one acoustic label per clip")
        if not self.uid:
            self.uid = hashlib.sha1(self.samples.tobytes()).hexdigest()[:16]

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def semantic(self) -> EventLabel | None:
        return next((lab for lab in self.labels if lab.kind == SEMANTIC), None)

    @property
    def acoustic(self) -> EventLabel | None:
        return next((lab for lab in self.labels if lab.kind == ACOUSTIC), None)


def _peak_normalize(x: np.ndarray, peak: float = PEAK) -> np.ndarray:
    m = np.abs(x).max(initial=0.0)
    return x if m == 0 else x * (peak / m)


def semantic_pattern(class_id: int) -> np.ndarray:
    """Eight on/off slots, distinct per class, at least three slots on."""
    rng = np.random.default_rng(10_007 + class_id)
    while True:
        bits = rng.integers(0, 2, size=8)
        if bits.sum() >= 3:
            return bits


def acoustic_band(class_id: int) -> tuple[float, float]:
    center = 900.0 + (class_id * 730.0) % 2600.0
    return center - 150.0, center + 150.0


def _render_semantic(k: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    carrier = np.sin(2 * np.pi * (400.0 + 40.0 * k) * t + rng.uniform(0, 2 * np.pi))
    slot = np.minimum((np.arange(n) * 8) // n, 7)
    gate = semantic_pattern(k)[slot].astype(np.float64)
    # 5 ms ramps at slot edges keep the motif from clicking
    ramp = max(1, int(0.005 * sr))
    gate = np.convolve(gate, np.ones(ramp) / ramp, mode="same")
    return carrier * gate * rng.uniform(0.8, 1.0)


def _render_acoustic(m: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    tone = np.sin(2 * np.pi * (100.0 + 25.0 * m) * t + rng.uniform(0, 2 * np.pi))
    lo, hi = acoustic_band(m)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    noise = np.fft.irfft(spec, n)
    noise /= np.abs(noise).max(initial=1e-12)
    return tone + 0.5 * noise


def synth_clip(semantic: int | None = None, acoustic: int | None = None,
               duration_s: float = 1.0, seed: int = 0, task_id: int = 0,
               sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Render a clip carrying a semantic pulse-train motif, an acoustic
    texture, or both (mixed at gains 1.0 / 0.5)."""
    if semantic is None and acoustic is None:
        raise ValueError("synth_clip needs a semantic or an acoustic class")
    if not 0.5 <= duration_s <= 4.0:
        raise ValueError("duration_s must lie in [0.5, 4.0]")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(seed)
    x = np.zeros(n)
    labels = []
    if semantic is not None:
        x += _render_semantic(semantic, n, sample_rate, rng)
        labels.append(EventLabel(SEMANTIC, semantic, class_name(SEMANTIC, semantic), task_id))
    if acoustic is not None:
        gain = 0.5 if semantic is not None else 1.0
        x += gain * _render_acoustic(acoustic, n, sample_rate, rng)
        labels.append(EventLabel(ACOUSTIC, acoustic, class_name(ACOUSTIC, acoustic), task_id))
    return AudioClip(_peak_normalize(x), frozenset(labels), sample_rate)


def splice(a: AudioClip, b: AudioClip) -> AudioClip:
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rates differ")
    return AudioClip(np.concatenate([a.samples, b.samples]), a.labels | b.labels, a.sample_rate)


def overlay(a: AudioClip, b: AudioClip) -> AudioClip:
    """Superimpose ``b`` at half gain onto ``a``; the shorter clip is zero-padded."""
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rates differ")
    n = max(len(a.samples), len(b.samples))
    x = np.zeros(n)
    x[: len(a.samples)] += a.samples
    x[: len(b.samples)] += 0.5 * b.samples
    if np.abs(x).max(initial=0.0) > 1.0:
        x = _peak_normalize(x)
    return AudioClip(x, a.labels | b.labels, a.sample_rate)


COMPOSERS = {"splice": splice, "overlay": overlay}


def bin_frequencies(sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2, NUM_BINS)


_DFT_CACHE: dict = {}


def _dft_matrix(sample_rate: int) -> np.ndarray:
    if sample_rate not in _DFT_CACHE:
        n = np.arange(WINDOW)
        basis = np.exp(-2j * np.pi * np.outer(n, bin_frequencies(sample_rate)) / sample_rate)
        _DFT_CACHE[sample_rate] = np.hanning(WINDOW)[:, None] * basis
    return _DFT_CACHE[sample_rate]


@dataclass
class FeatureSeq:
    frames: np.ndarray
    frame_hop_s: float = HOP / SAMPLE_RATE
    frame_len_s: float = WINDOW / SAMPLE_RATE

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def featurize(clip: AudioClip) -> FeatureSeq:
    """Log-magnitude STFT: 25 ms Hann window, 10 ms hop, 64 bins over 0-4 kHz."""
    x = clip.samples
    if len(x) < WINDOW:
        raise ValueError("clip shorter than one analysis window")
    n_frames = 1 + (len(x) - WINDOW) // HOP
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n_frames)[:, None]
    mag = np.abs(x[idx] @ _dft_matrix(clip.sample_rate))
    return FeatureSeq(np.log(np.maximum(mag, np.exp(LOG_FLOOR))).clip(min=LOG_FLOOR))


class Featurizer(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping clips to log-spectrogram frame matrices."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [featurize(clip).frames for clip in X]


def wav_write(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def wav_read(path, labels=frozenset({EventLabel(SEMANTIC, 0)})) -> AudioClip:
    """Read a 16-bit PCM mono WAV. ``labels`` is attached to the clip since
    WAV carries none; manifests supply the real ones."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: only 16-bit PCM mono is supported")
            n = w.getnframes()
            sr = w.getframerate()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: truncated data chunk")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioClip(np.clip(samples, -1.0, 1.0), labels, sr)
