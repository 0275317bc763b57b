import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkcon.augment import (AugmentationError, AugmentCorpus, SpecAugConfig, SpecAugDraw, WavAugConfig,
                            WavAugDraw, add_noise, add_reverb, fit_length, noise_gain, sample_specaug_draw,
                            sample_wavaug_draw,
                            soft_clip, specaug, synth_music, synth_noise, synth_rir, time_warp, wavaug_view)
from spkcon.frontend import FeatureChunk, Waveform

SR = 16000


def _speech_like(rng, n=SR):
    return Waveform(0.1 * rng.standard_normal(n) * np.sin(np.linspace(0, 20, n)) ** 2)


def _snr(clean, mixed):
    noise = mixed.astype(np.float64) - clean.astype(np.float64)
    return 10 * np.log10(np.mean(clean.astype(np.float64) ** 2) / np.mean(noise ** 2))


@pytest.fixture(scope="module")
def corpus():
    rng = np.random.default_rng(0)
    return AugmentCorpus(rirs=[synth_rir(rng) for _ in range(4)],
                         noise=[synth_noise(rng, SR) for _ in range(3)],
                         music=[synth_music(rng, SR) for _ in range(3)],
                         babble=[synth_noise(rng, SR) for _ in range(3)])


class TestReverb:
    def test_unit_impulse_is_identity(self):
        w = _speech_like(np.random.default_rng(1))
        out = add_reverb(w, Waveform(np.r_[1.0, np.zeros(99)]))
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-6)

    def test_scaled_impulse_is_identity_after_rescale(self):
        w = _speech_like(np.random.default_rng(2))
        out = add_reverb(w, Waveform(np.r_[0.5, np.zeros(99)]))
        np.testing.assert_allclose(out.samples, w.samples, atol=1e-6)

    def test_echo_lands_50ms_later(self):
        x = np.zeros(SR)
        x[1000] = 0.5
        rir = np.zeros(SR // 10)
        rir[0], rir[800] = 1.0, 0.5
        out = add_reverb(Waveform(x), Waveform(rir)).samples
        peaks = np.argsort(np.abs(out))[-2:]
        assert sorted(peaks.tolist()) == [1000, 1800]
        assert out[1800] / out[1000] == pytest.approx(0.5, rel=1e-5)

    def test_aligns_at_peak_tap(self):
        w = _speech_like(np.random.default_rng(3))
        delayed = np.zeros(300)
        delayed[120] = 1.0
        np.testing.assert_allclose(add_reverb(w, Waveform(delayed)).samples, w.samples, atol=1e-6)

    def test_empty_rir_rejected(self):
        with pytest.raises(AugmentationError):
            add_reverb(_speech_like(np.random.default_rng(0)), Waveform(np.zeros(10)))


class TestNoise:
    def test_zero_db_unit_power_gain_is_one(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal(10000)
        n = rng.standard_normal(10000)
        s /= np.sqrt(np.mean(s ** 2))
        n /= np.sqrt(np.mean(n ** 2))
        assert noise_gain(s, n, 0.0) == pytest.approx(1.0)

    @pytest.mark.parametrize("snr", sorted({0, 5, 10, 15, 8, 13, 17, 20}))
    def test_realized_snr(self, snr, corpus):
        w = _speech_like(np.random.default_rng(snr))
        for noise in corpus.noise + corpus.music:
            out = add_noise(w, noise, snr, offset=123)
            assert abs(_snr(w.samples, out.samples) - snr) < 0.1

    def test_zero_power_noise_rejected(self):
        with pytest.raises(AugmentationError):
            add_noise(_speech_like(np.random.default_rng(0)), Waveform(np.zeros(100)), 10.0)

    def test_infinite_snr_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(AugmentationError):
            add_noise(_speech_like(rng), synth_noise(rng, 100), float("inf"))

    def test_loops_short_noise(self):
        n = np.arange(5.0)
        np.testing.assert_array_equal(fit_length(n, 12, offset=3), [3, 4, 0, 1, 2, 3, 4, 0, 1, 2, 3, 4])


class TestWavAug:
    def test_forced_music_without_reverb(self, corpus):
        w = _speech_like(np.random.default_rng(5))
        draw = WavAugDraw(reverb=False, rir_index=0, noise_class="music", noise_index=1, snr_db=8.0, offset=0)
        out = wavaug_view(w, corpus, WavAugConfig(), np.random.default_rng(0), draw=draw)
        assert abs(_snr(w.samples, out.samples) - 8.0) < 0.1

    def test_reverb_rate(self, corpus):
        rng = np.random.default_rng(6)
        cfg = WavAugConfig()
        hits = sum(sample_wavaug_draw(rng, corpus, cfg).reverb for _ in range(10000))
        assert abs(hits / 10000 - 0.8) < 0.015

    def test_snr_drawn_from_class_list(self, corpus):
        rng = np.random.default_rng(7)
        cfg = WavAugConfig()
        seen = {k: set() for k in ("noise", "music", "babble")}
        for _ in range(2000):
            d = sample_wavaug_draw(rng, corpus, cfg)
            seen[d.noise_class].add(d.snr_db)
        assert seen["noise"] == {0, 5, 10, 15}
        assert seen["music"] == {5, 8, 10, 15}
        assert seen["babble"] == {13, 15, 17, 20}

    def test_same_seed_same_output(self, corpus):
        w = _speech_like(np.random.default_rng(8))
        a = wavaug_view(w, corpus, WavAugConfig(), np.random.default_rng(42))
        b = wavaug_view(w, corpus, WavAugConfig(), np.random.default_rng(42))
        assert np.array_equal(a.samples, b.samples)

    def test_independent_streams_differ(self, corpus):
        w = _speech_like(np.random.default_rng(9))
        a = wavaug_view(w, corpus, WavAugConfig(), np.random.default_rng([1, 0]))
        b = wavaug_view(w, corpus, WavAugConfig(), np.random.default_rng([1, 1]))
        assert not np.array_equal(a.samples, b.samples)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 10.0))
    @settings(max_examples=30, deadline=None)
    def test_outputs_bounded(self, corpus, seed, amp):
        rng = np.random.default_rng(seed)
        w = Waveform(amp * rng.standard_normal(2000))
        out = wavaug_view(w, corpus, WavAugConfig(), rng)
        assert np.all(np.isfinite(out.samples)) and np.abs(out.samples).max() <= 4.0

    def test_missing_class_is_an_error(self):
        rng = np.random.default_rng(0)
        bare = AugmentCorpus(rirs=[synth_rir(rng)], noise=[synth_noise(rng, 100)])
        cfg = WavAugConfig(noise_class_probs=(0.0, 1.0, 0.0))
        with pytest.raises(AugmentationError, match="music"):
            wavaug_view(_speech_like(rng), bare, cfg, rng)


def test_soft_clip():
    x = np.array([-100.0, -3.0, 0.0, 2.9, 3.5, 1e6])
    y = soft_clip(x)
    assert np.array_equal(y[1:4], x[1:4])
    assert np.all(np.abs(y) <= 4.0) and 3.0 < y[4] < 3.5


class TestSpecAug:
    def _chunk(self, seed=0, T=300):
        return FeatureChunk(np.random.default_rng(seed).normal(size=(T, 30)).astype(np.float32), "u")

    def test_noop_draw(self):
        c = self._chunk()
        draw = SpecAugDraw(centre=100, shift=0, time_masks=[(0, 0), (50, 0)], freq_masks=[(3, 0), (7, 0)])
        out = specaug(c, SpecAugConfig(), None, draw=draw)
        np.testing.assert_allclose(out.frames, c.frames, atol=1e-6)

    def test_time_mask_fills_with_mean(self):
        c = self._chunk(1)
        draw = SpecAugDraw(centre=100, shift=0, time_masks=[(100, 5)], freq_masks=[])
        out = specaug(c, SpecAugConfig(), None, draw=draw).frames
        np.testing.assert_allclose(out[100:105], np.broadcast_to(c.frames.mean(0), (5, 30)), atol=1e-6)
        np.testing.assert_allclose(out[:100], c.frames[:100], atol=1e-6)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(30, 400))
    @settings(max_examples=50, deadline=None)
    def test_masked_cell_bound(self, seed, T):
        rng = np.random.default_rng(seed)
        cfg = SpecAugConfig()
        c = FeatureChunk(rng.normal(size=(T, 30)), "u")
        draw = sample_specaug_draw(c.frames.shape, cfg, rng)
        draw.shift = 0
        out = specaug(c, cfg, rng, draw=draw).frames
        changed = int((np.abs(out - c.frames) > 1e-6).sum())
        assert changed <= 2 * 5 * 30 + 2 * 3 * T

    def test_warp_moves_centre(self):
        x = np.arange(100, dtype=np.float64)[:, None]
        y = time_warp(x, centre=40, shift=5)
        assert y[45, 0] == pytest.approx(40.0)
        assert y[0, 0] == 0 and y[-1, 0] == pytest.approx(99.0)
        assert np.all(np.diff(y[:, 0]) > 0)

    def test_too_small_chunk(self):
        with pytest.raises(AugmentationError):
            sample_specaug_draw((20, 30), SpecAugConfig(), np.random.default_rng(0))


def test_corpus_manifest(tmp_path):
    from spkcon.frontend import save_wav
    rng = np.random.default_rng(0)
    lines = []
    for kind in ("rir", "noise", "music", "babble"):
        save_wav(tmp_path / f"{kind}.wav", synth_noise(rng, 800).samples)
        lines.append(f"{kind}\t{kind}.wav")
    (tmp_path / "aug.list").write_text("\n".join(lines) + "\n")
    c = AugmentCorpus.from_manifest(tmp_path / "aug.list")
    assert [len(c.rirs), len(c.noise), len(c.music), len(c.babble)] == [1, 1, 1, 1]
    (tmp_path / "bad.list").write_text("speech\tnoise.wav\n")
    with pytest.raises(AugmentationError, match="unknown class"):
        AugmentCorpus.from_manifest(tmp_path / "bad.list")
