"""Waveform (reverb + additive noise) and feature-level (warp + mask) augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .frontend import SAMPLE_RATE, FeatureChunk, Waveform, load_wav

NOISE_CLASSES = ("noise", "music", "babble")
CLIP_KNEE = 3.0


class AugmentationError(ValueError):
    pass


@dataclass
class AugmentCorpus:
    rirs: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    music: list = field(default_factory=list)
    babble: list = field(default_factory=list)

    def pool(self, kind):
        return getattr(self, kind)

    @classmethod
    def from_manifest(cls, path):
        """Load a ``class<TAB>wav_path`` manifest (class in rir/noise/music/babble)."""
        path = Path(path)
        corpus = cls()
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                kind, wav = line.split("\t")
            except ValueError:
                raise AugmentationError(f"{path}:{lineno}: expected 'class<TAB>wav_path'") from None
            if kind not in ("rir",) + NOISE_CLASSES:
                raise AugmentationError(f"{path}:{lineno}: unknown class {kind!r}")
            wav_path = Path(wav) if Path(wav).is_absolute() else path.parent / wav
            pool = corpus.rirs if kind == "rir" else corpus.pool(kind)
            pool.append(load_wav(wav_path))
        return corpus


@dataclass
class WavAugConfig:
    reverb_prob: float = 0.8
    noise_prob: float = 1.0
    snr_noise: tuple = (0, 5, 10, 15)
    snr_music: tuple = (5, 8, 10, 15)
    snr_babble: tuple = (13, 15, 17, 20)
    noise_class_probs: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        for p in (self.reverb_prob, self.noise_prob, *self.noise_class_probs):
            if not 0.0 <= p <= 1.0:
                raise AugmentationError(f"probability {p} outside [0, 1]")
        if not (self.snr_noise and self.snr_music and self.snr_babble):
            raise AugmentationError("SNR lists must be non-empty")

    def snrs(self, kind):
        return {"noise": self.snr_noise, "music": self.snr_music, "babble": self.snr_babble}[kind]


@dataclass
class SpecAugConfig:
    warp_window: int = 10
    max_time_mask: int = 5
    max_freq_mask: int = 3
    n_time_masks: int = 2
    n_freq_masks: int = 2


def soft_clip(x: np.ndarray) -> np.ndarray:
    """Identity inside +-3, then saturates smoothly toward +-4."""
    over = np.abs(x) > CLIP_KNEE
    if not over.any():
        return x
    y = x.copy()
    y[over] = np.sign(x[over]) * (CLIP_KNEE + np.tanh(np.abs(x[over]) - CLIP_KNEE))
    return y


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def add_reverb(w: Waveform, rir: Waveform) -> Waveform:
    h = np.asarray(rir.samples, dtype=np.float64)
    if h.size == 0 or not np.any(h):
        raise AugmentationError("empty impulse response")
    x = w.samples.astype(np.float64)
    peak = int(np.argmax(np.abs(h)))
    y = fftconvolve(x, h, mode="full")[peak:peak + len(x)]
    out_rms = _rms(y)
    if out_rms > 0:
        y *= _rms(x) / out_rms
    return Waveform(soft_clip(y), w.sample_rate)


def fit_length(noise: np.ndarray, n: int, offset: int = 0) -> np.ndarray:
    """Loop or crop ``noise`` to ``n`` samples starting at ``offset``."""
    reps = -(-(offset + n) // len(noise))
    return np.tile(noise, reps)[offset:offset + n]


def noise_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_sig = float(np.mean(np.asarray(signal, dtype=np.float64) ** 2))
    p_noise = float(np.mean(np.asarray(noise, dtype=np.float64) ** 2))
    if p_noise <= 0:
        raise AugmentationError("noise has zero power")
    if not np.isfinite(snr_db):
        raise AugmentationError("SNR must be finite; omit the noise instead of passing inf")
    return float(np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0))))


def add_noise(w: Waveform, noise: Waveform, snr_db: float, offset: int = 0) -> Waveform:
    x = w.samples.astype(np.float64)
    n = fit_length(noise.samples.astype(np.float64), len(x), offset)
    g = noise_gain(x, n, snr_db)
    return Waveform(soft_clip(x + g * n), w.sample_rate)


@dataclass
class WavAugDraw:
    reverb: bool
    rir_index: int
    noise_class: str | None
    noise_index: int
    snr_db: float
    offset: int


def sample_wavaug_draw(rng: np.random.Generator, corpus: AugmentCorpus, cfg: WavAugConfig) -> WavAugDraw:
    reverb = bool(rng.random() < cfg.reverb_prob) and bool(corpus.rirs)
    rir_index = int(rng.integers(len(corpus.rirs))) if corpus.rirs else -1
    kind, idx, snr, offset = None, -1, 0.0, 0
    if rng.random() < cfg.noise_prob:
        probs = np.asarray(cfg.noise_class_probs, dtype=np.float64)
        kind = NOISE_CLASSES[int(rng.choice(3, p=probs / probs.sum()))]
        pool = corpus.pool(kind)
        if not pool:
            raise AugmentationError(f"augmentation corpus has no {kind} files")
        idx = int(rng.integers(len(pool)))
        snr = float(rng.choice(cfg.snrs(kind)))
        offset = int(rng.integers(len(pool[idx])))
    return WavAugDraw(reverb, rir_index, kind, idx, snr, offset)


def wavaug_view(w: Waveform, corpus: AugmentCorpus, cfg: WavAugConfig, rng: np.random.Generator,
                draw: WavAugDraw | None = None, return_draw=False):
    """Progressive augmentation: optional reverb, then one noise class at a listed SNR.

    The SNR is set against the (possibly reverberated) signal.  ``draw`` pins
    the random choices; otherwise they come from ``rng``.
    """
    if draw is None:
        draw = sample_wavaug_draw(rng, corpus, cfg)
    out = w
    if draw.reverb:
        out = add_reverb(out, corpus.rirs[draw.rir_index])
    if draw.noise_class is not None:
        out = add_noise(out, corpus.pool(draw.noise_class)[draw.noise_index], draw.snr_db, draw.offset)
    return (out, draw) if return_draw else out


@dataclass
class SpecAugDraw:
    centre: int
    shift: int
    time_masks: list    # (start, width) pairs
    freq_masks: list


def sample_specaug_draw(shape, cfg: SpecAugConfig, rng: np.random.Generator) -> SpecAugDraw:
    T, F = shape
    if T <= 2 * cfg.warp_window + 2 or T <= cfg.max_time_mask or F <= cfg.max_freq_mask:
        raise AugmentationError(f"chunk {shape} too small for SpecAug settings")
    centre = int(rng.integers(cfg.warp_window + 1, T - cfg.warp_window - 1))
    shift = int(rng.integers(-cfg.warp_window, cfg.warp_window + 1))
    time_masks, freq_masks = [], []
    for _ in range(cfg.n_time_masks):
        width = int(rng.integers(0, cfg.max_time_mask + 1))
        time_masks.append((int(rng.integers(0, T - width + 1)), width))
    for _ in range(cfg.n_freq_masks):
        width = int(rng.integers(0, cfg.max_freq_mask + 1))
        freq_masks.append((int(rng.integers(0, F - width + 1)), width))
    return SpecAugDraw(centre, shift, time_masks, freq_masks)


def specaug(chunk: FeatureChunk, cfg: SpecAugConfig, rng: np.random.Generator,
            draw: SpecAugDraw | None = None) -> FeatureChunk:
    """Sparse time warp, then time and frequency masks filled with the per-coefficient chunk mean."""
    if draw is None:
        draw = sample_specaug_draw(chunk.frames.shape, cfg, rng)
    x = time_warp(chunk.frames.astype(np.float64), draw.centre, draw.shift)
    fill = x.mean(axis=0)
    for start, width in draw.time_masks:
        x[start:start + width, :] = fill
    for start, width in draw.freq_masks:
        x[:, start:start + width] = fill[start:start + width]
    return FeatureChunk(x.astype(np.float32), chunk.utterance_id, chunk.speaker_label)


def time_warp(x: np.ndarray, centre: int, shift: int) -> np.ndarray:
    """Move frame ``centre`` to ``centre + shift`` with piecewise-linear resampling."""
    T = x.shape[0]
    if shift == 0:
        return x.copy()
    target = centre + shift
    out_idx = np.arange(T, dtype=np.float64)
    src = np.where(out_idx <= target,
                   out_idx * centre / target,
                   centre + (out_idx - target) * (T - 1 - centre) / (T - 1 - target))
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = (src - lo)[:, None]
    return x[lo] * (1 - frac) + x[hi] * frac


# ---------------------------------------------------------------- synthetic corpora

def synth_rir(rng: np.random.Generator, sample_rate=SAMPLE_RATE, rt60=None, length_s=0.5,
              density=0.25) -> Waveform:
    """Direct path plus sparse taps with exponential energy decay."""
    rt60 = float(rng.uniform(0.2, 0.8)) if rt60 is None else rt60
    n = int(length_s * sample_rate)
    t = np.arange(n) / sample_rate
    envelope = 10.0 ** (-3.0 * t / rt60)
    taps = (rng.random(n) < density) * rng.standard_normal(n) * envelope * 0.5
    pre_delay = int(rng.integers(40, 160))
    taps[:pre_delay] = 0.0
    taps[0] = 1.0
    return Waveform(taps.astype(np.float32), sample_rate)


def synth_noise(rng: np.random.Generator, n, sample_rate=SAMPLE_RATE) -> Waveform:
    """Gaussian noise with a random spectral tilt."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    tilt = rng.uniform(-1.0, 0.5)
    spec *= (np.maximum(f, 50.0) / 1000.0) ** (tilt / 2)
    x = np.fft.irfft(spec, n)
    return Waveform((0.1 * x / _rms(x)).astype(np.float32), sample_rate)


def synth_music(rng: np.random.Generator, n, sample_rate=SAMPLE_RATE) -> Waveform:
    """A sequence of harmonic notes with decaying partials."""
    out = np.zeros(n)
    pos = 0
    while pos < n:
        dur = int(rng.uniform(0.15, 0.5) * sample_rate)
        f0 = 110.0 * 2.0 ** (rng.integers(0, 36) / 12.0)
        t = np.arange(min(dur, n - pos)) / sample_rate
        note = sum((0.6 ** k) * np.sin(2 * np.pi * f0 * (k + 1) * t) for k in range(6) if f0 * (k + 1) < 7000)
        out[pos:pos + len(t)] += note * np.exp(-3.0 * t)
        pos += dur
    return Waveform((0.1 * out / _rms(out)).astype(np.float32), sample_rate)
