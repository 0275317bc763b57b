"""WAV ingestion, energy VAD, MFCC extraction and random chunk sampling."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

SAMPLE_RATE = 16000


class IngestionError(ValueError):
    pass


class FrontendError(ValueError):
    pass


class SkipUtterance(Exception):
    """Raised when an utterance has too few frames to yield a chunk."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.size == 0:
            raise FrontendError("empty waveform")

    def __len__(self):
        return len(self.samples)


@dataclass
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    win_length: int = 400       # 25 ms
    hop_length: int = 160       # 10 ms
    n_fft: int = 512
    n_mels: int = 30
    n_ceps: int = 30
    f_min: float = 20.0
    f_max: float = 7600.0
    preemphasis: float = 0.97
    vad_offset: float = -4.0
    vad_floor_dbfs: float = -70.0   # absolute frame-RMS floor; rejects dithered silence
    min_frames: int = 200
    max_frames: int = 400


@dataclass
class FeatureChunk:
    frames: np.ndarray          # (T, F)
    utterance_id: str = ""
    speaker_label: str | None = None

    @property
    def num_frames(self):
        return self.frames.shape[0]


def load_wav(path) -> Waveform:
    path = Path(path)
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise IngestionError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise IngestionError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit samples")
        if f.getframerate() != SAMPLE_RATE:
            raise IngestionError(f"{path}: expected sample rate {SAMPLE_RATE}, got {f.getframerate()}")
        if f.getcomptype() != "NONE":
            raise IngestionError(f"{path}: compressed encoding {f.getcomptype()!r} not supported")
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise IngestionError(f"{path}: no samples")
    return Waveform(pcm.astype(np.float32) / 32768.0, SAMPLE_RATE)


def save_wav(path, w: Waveform | np.ndarray, sample_rate=SAMPLE_RATE):
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def num_frames(n_samples, cfg: FrontendConfig = FrontendConfig()):
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def frame_signal(x: np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    n = num_frames(len(x), cfg)
    if n == 0:
        raise FrontendError(f"signal of {len(x)} samples is shorter than one {cfg.win_length}-sample frame")
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(n)[:, None]
    return x[idx]


def log_energy(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    frames = frame_signal(w.samples.astype(np.float64), cfg)
    return np.log((frames ** 2).sum(axis=1) + 1e-10)


def energy_vad(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Keep frames whose log-energy exceeds the utterance mean plus ``cfg.vad_offset``.

    Frames whose RMS falls below ``cfg.vad_floor_dbfs`` are dropped as well.
    """
    e = log_energy(w, cfg)
    floor = np.log(cfg.win_length * 10.0 ** (cfg.vad_floor_dbfs / 10.0))
    keep = (e > e.mean() + cfg.vad_offset) & (e > floor)
    if not keep.any():
        raise FrontendError("energy VAD removed every frame")
    return keep


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels=30, n_fft=512, sample_rate=SAMPLE_RATE, f_min=20.0, f_max=7600.0):
    """Triangular filters on a mel scale, shape (n_mels, n_fft // 2 + 1)."""
    mel_pts = np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mfcc(w: Waveform | np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> np.ndarray:
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float32)
    if len(samples) < cfg.win_length:
        raise FrontendError(f"need at least {cfg.win_length} samples for MFCC, got {len(samples)}")
    x = samples.astype(np.float64)
    x = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    frames = frame_signal(x, cfg) * np.hamming(cfg.win_length)
    power = np.abs(np.fft.rfft(frames, cfg.n_fft)) ** 2
    fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)
    logmel = np.log(power @ fb.T + 1e-10)
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, :cfg.n_ceps]
    return ceps.astype(np.float32)


def mean_normalize(frames: np.ndarray) -> np.ndarray:
    frames = frames.astype(np.float64)
    return (frames - frames.mean(axis=0, keepdims=True)).astype(np.float32)


def sample_chunk(features: np.ndarray, rng: np.random.Generator, cfg: FrontendConfig = FrontendConfig(),
                 length: int | None = None, utterance_id="", speaker_label=None) -> FeatureChunk:
    """Draw a contiguous window of ``cfg.min_frames``..``cfg.max_frames`` frames.

    ``length`` fixes the requested window size (used to give every chunk in a
    mini-batch the same length); it is still clipped to the available frames.
    """
    total = features.shape[0]
    if total < cfg.min_frames:
        raise SkipUtterance(f"{utterance_id or 'utterance'}: {total} frames < {cfg.min_frames}")
    if length is None:
        length = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    length = min(length, total)
    start = int(rng.integers(0, total - length + 1))
    chunk = mean_normalize(features[start:start + length])
    return FeatureChunk(chunk, utterance_id, speaker_label)


def read_manifest(path):
    """Parse ``utterance_id<TAB>speaker_id_or_-<TAB>wav_path`` lines.

    Relative wav paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        utt, spk, wav = parts
        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        entries.append((utt, None if spk == "-" else spk, wav_path))
    return entries


def write_manifest(path, entries):
    with open(path, "w") as f:
        for utt, spk, wav in entries:
            f.write(f"{utt}\t{spk if spk is not None else '-'}\t{wav}\n")
