"""Synthetic speaker corpus for desk-scale training and acceptance runs.

Each speaker is a source-filter voice: a harmonic glottal source at a
speaker-specific pitch drives formant resonators whose vowel targets are
scaled by a speaker-specific vocal-tract factor.  Pitch centres and tract
factors sit on interleaved grids, so any two speakers are separated by at
least one grid step in both (see ``SyntheticSpeakerSpec.f0_range`` and
``tract_range``).  Every recording then passes through a random room and
background-noise condition, which is the nuisance the models must ignore.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .augment import add_noise, add_reverb, synth_music, synth_noise, synth_rir
from .frontend import SAMPLE_RATE, Waveform, save_wav, write_manifest
from .metrics import Trial, write_trials

# (F1, F2, F3) in Hz
VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [300, 870, 2240],
    [530, 1840, 2480],
    [570, 840, 2410],
    [660, 1720, 2410],
    [440, 1020, 2240],
    [390, 1990, 2550],
], dtype=np.float64)
BANDWIDTHS = np.array([90.0, 110.0, 170.0, 250.0])


@dataclass
class SyntheticSpeakerSpec:
    n_train_speakers: int = 20
    n_eval_speakers: int = 10
    train_utts: int = 20
    eval_utts: int = 10
    duration: tuple = (3.0, 5.0)
    f0_range: tuple = (85.0, 255.0)
    tract_range: tuple = (0.82, 1.22)
    f0_halfwidth: float = 0.35        # fraction of the grid step covered by one speaker's f0 range
    vowel_spread: float = 0.08        # log-sd of each speaker's personal formant offsets
    reverb_prob: float = 0.7
    snr_range: tuple = (0.0, 20.0)
    baked_classes: tuple = ("noise", "music", "babble")   # background types baked into recordings
    n_rirs: int = 24
    n_noise: int = 8
    n_music: int = 8
    n_babble: int = 8
    aug_seconds: float = 6.0
    seed: int = 0

    @property
    def n_speakers(self):
        return self.n_train_speakers + self.n_eval_speakers


@dataclass
class Voice:
    f0: float
    f0_lo: float
    f0_hi: float
    tract: float
    vowel_warp: np.ndarray      # per-vowel, per-formant multiplicative offsets
    rate: float
    tilt: float
    breath: float


def make_voices(spec: SyntheticSpeakerSpec, n: int, rng: np.random.Generator) -> list[Voice]:
    f0_grid = np.geomspace(*spec.f0_range, n)
    tract_grid = np.linspace(*spec.tract_range, n)
    f0_order = rng.permutation(n)
    tract_order = rng.permutation(n)
    step = (spec.f0_range[1] / spec.f0_range[0]) ** (1.0 / max(n - 1, 1))
    voices = []
    for k in range(n):
        f0 = f0_grid[f0_order[k]]
        half = step ** spec.f0_halfwidth
        voices.append(Voice(
            f0=f0, f0_lo=f0 / half, f0_hi=f0 * half,
            tract=tract_grid[tract_order[k]],
            vowel_warp=np.exp(rng.normal(0.0, spec.vowel_spread, size=(len(VOWELS), 3))),
            rate=float(rng.uniform(0.75, 1.3)),
            tilt=float(rng.uniform(0.8, 1.6)),
            breath=float(rng.uniform(0.02, 0.15)),
        ))
    return voices


def _resonator(freq, bw, fs=SAMPLE_RATE):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def synth_utterance(voice: Voice, duration: float, rng: np.random.Generator, fs=SAMPLE_RATE) -> np.ndarray:
    """Syllable-by-syllable source-filter synthesis with short pauses."""
    n_total = int(duration * fs)
    out = np.zeros(n_total + fs)
    pos = int(rng.uniform(0.05, 0.2) * fs)
    while pos < n_total:
        if rng.random() < 0.12:
            pos += int(rng.uniform(0.05, 0.2) * fs)
            continue
        dur = int(rng.uniform(0.12, 0.28) * voice.rate * fs)
        t = np.arange(dur) / fs
        f0_a, f0_b = rng.uniform(voice.f0_lo, voice.f0_hi, size=2)
        f0 = np.linspace(f0_a, f0_b, dur)
        phase = 2 * np.pi * np.cumsum(f0) / fs + rng.uniform(0, 2 * np.pi)
        n_harm = int(7000 // max(f0_a, f0_b))
        h = np.arange(1, n_harm + 1)
        source = (np.sin(np.outer(phase, h)) / h ** voice.tilt).sum(axis=1)
        source += voice.breath * rng.standard_normal(dur)
        v = int(rng.integers(len(VOWELS)))
        formants = np.append(VOWELS[v] * voice.vowel_warp[v], 3500.0) * voice.tract
        y = source
        for f, bw in zip(formants, BANDWIDTHS):
            if f < fs / 2 - 200:
                b, a = _resonator(f, bw * voice.tract)
                y = lfilter(b, a, y)
        env = np.sin(np.pi * np.clip(t / t[-1], 0, 1)) ** 0.6
        y = y * env
        out[pos:pos + dur] += y
        pos += int(dur * rng.uniform(0.85, 1.0))
    out = out[:n_total]
    out *= 0.08 / max(np.sqrt(np.mean(out ** 2)), 1e-9)
    out += rng.normal(0.0, 2e-4, n_total)
    return out


def record(clean: np.ndarray, spec: SyntheticSpeakerSpec, rirs, noises, rng: np.random.Generator) -> np.ndarray:
    """Apply one random room and one random background to a clean utterance."""
    w = Waveform(clean)
    if rng.random() < spec.reverb_prob:
        w = add_reverb(w, rirs[int(rng.integers(len(rirs)))])
    noise = noises[int(rng.integers(len(noises)))]
    w = add_noise(w, noise, float(rng.uniform(*spec.snr_range)), int(rng.integers(len(noise))))
    gain = 10 ** (rng.uniform(-6, 3) / 20)
    return np.clip(w.samples * gain, -0.99, 0.99)


def balanced_trials(utts_by_speaker: dict, rng: np.random.Generator) -> list[Trial]:
    """All same-speaker pairs plus an equal number of random different-speaker pairs."""
    targets = [Trial(True, a, b) for utts in utts_by_speaker.values() for a, b in combinations(utts, 2)]
    speakers = list(utts_by_speaker)
    seen = set()
    nontargets = []
    while len(nontargets) < len(targets):
        s1, s2 = rng.choice(len(speakers), size=2, replace=False)
        a = rng.choice(utts_by_speaker[speakers[s1]])
        b = rng.choice(utts_by_speaker[speakers[s2]])
        if (a, b) in seen or (b, a) in seen:
            continue
        seen.add((a, b))
        nontargets.append(Trial(False, str(a), str(b)))
    trials = targets + nontargets
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def generate_toy_corpus(spec: SyntheticSpeakerSpec, out_dir) -> dict:
    """Write WAVs, train/eval manifests, an augmentation manifest and a trial list.

    Returns the paths written.  Output is byte-identical for a fixed ``spec.seed``.
    """
    out = Path(out_dir)
    for sub in ("train", "eval", "aug"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    voice_ss, cond_ss, aug_ss, utt_ss, trial_ss = root.spawn(5)

    voices = make_voices(spec, spec.n_speakers + spec.n_babble, np.random.default_rng(voice_ss))
    babble_voices = voices[spec.n_speakers:]
    voices = voices[:spec.n_speakers]

    # recording conditions baked into the corpus; independent of the augmentation corpus
    crng = np.random.default_rng(cond_ss)
    n_aug = int(spec.aug_seconds * SAMPLE_RATE)
    cond_rirs = [synth_rir(crng) for _ in range(spec.n_rirs)]
    cond_noise = {"noise": [synth_noise(crng, n_aug) for _ in range(spec.n_noise)],
                  "music": [synth_music(crng, n_aug) for _ in range(spec.n_music)],
                  "babble": [Waveform(synth_utterance(babble_voices[i % len(babble_voices)], spec.aug_seconds, crng))
                             for i in range(spec.n_babble)]}
    cond_noise = [w for kind in spec.baked_classes for w in cond_noise[kind]]

    arng = np.random.default_rng(aug_ss)
    aug_entries = []
    for kind, count in (("rir", spec.n_rirs), ("noise", spec.n_noise), ("music", spec.n_music),
                        ("babble", spec.n_babble)):
        for i in range(count):
            if kind == "rir":
                w = synth_rir(arng)
                w = Waveform(0.9 * w.samples / np.abs(w.samples).max())
            elif kind == "noise":
                w = synth_noise(arng, n_aug)
            elif kind == "music":
                w = synth_music(arng, n_aug)
            else:
                w = Waveform(synth_utterance(babble_voices[i % len(babble_voices)], spec.aug_seconds, arng))
            rel = f"aug/{kind}_{i:03d}.wav"
            save_wav(out / rel, w)
            aug_entries.append((kind, rel))
    with open(out / "aug.list", "w") as f:
        for kind, rel in aug_entries:
            f.write(f"{kind}\t{rel}\n")

    utt_rngs = iter(utt_ss.spawn(spec.n_train_speakers * spec.train_utts
                                 + spec.n_eval_speakers * spec.eval_utts))
    train_entries, eval_entries = [], []
    eval_by_speaker = {}
    for s, voice in enumerate(voices):
        is_train = s < spec.n_train_speakers
        spk = f"spk{s:03d}"
        n_utts = spec.train_utts if is_train else spec.eval_utts
        for u in range(n_utts):
            rng = np.random.default_rng(next(utt_rngs))
            clean = synth_utterance(voice, float(rng.uniform(*spec.duration)), rng)
            noisy = record(clean, spec, cond_rirs, cond_noise, rng)
            utt = f"{spk}-{u:03d}"
            rel = f"{'train' if is_train else 'eval'}/{utt}.wav"
            save_wav(out / rel, noisy)
            if is_train:
                train_entries.append((utt, spk, rel))
            else:
                eval_entries.append((utt, spk, rel))
                eval_by_speaker.setdefault(spk, []).append(utt)
    write_manifest(out / "train.list", train_entries)
    write_manifest(out / "eval.list", eval_entries)
    trials = balanced_trials(eval_by_speaker, np.random.default_rng(trial_ss))
    write_trials(out / "trials.txt", trials)
    return {
        "train_manifest": out / "train.list",
        "eval_manifest": out / "eval.list",
        "aug_manifest": out / "aug.list",
        "trials": out / "trials.txt",
        "voices": voices,
    }
