import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkcon.metrics import (DCFConfig, EvaluationError, Trial, eer, export_embeddings, min_dcf,
                            read_embeddings, read_trials, score_trials, write_trials)


def sweep_oracle(scores, labels, cfg=DCFConfig()):
    """O(n^2) sweep: accept when score >= threshold, thresholds at -inf, midpoints and +inf."""
    scores = [float(s) for s in scores]
    labels = [bool(x) for x in labels]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    distinct = sorted(set(scores))
    thresholds = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [np.inf]
    points = []
    for th in thresholds:
        miss = sum(1 for s, y in zip(scores, labels) if y and s < th)
        fa = sum(1 for s, y in zip(scores, labels) if not y and s >= th)
        points.append((miss / n_t, fa / n_n))
    eer_value = None
    for k, (frr, far) in enumerate(points):
        if frr >= far:
            if frr == far or k == 0:
                eer_value = far
            else:
                frr0, far0 = points[k - 1]
                d0, d1 = far0 - frr0, frr - far
                eer_value = far0 + d0 / (d0 + d1) * (far - far0)
            break
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    dcf = min((cfg.c_miss * cfg.p_target * frr + cfg.c_fa * (1 - cfg.p_target) * far) / norm
              for frr, far in points)
    return eer_value, dcf


def _random_trials(rng):
    n = int(rng.integers(2, 200))
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse grid so ties occur often
    scores = np.round(rng.normal(labels * rng.uniform(0, 2), 1.0), int(rng.integers(1, 4)))
    return scores, labels


class TestEer:
    def test_perfect(self):
        assert eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0

    def test_inverted(self):
        assert eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 1.0

    def test_hand_case(self):
        scores = [0.6, 0.4, 0.8, 0.5, 0.3, 0.2]
        labels = [1, 1, 1, 0, 0, 0]
        value, th = eer(scores, labels)
        assert value == pytest.approx(1 / 3, abs=1e-15)
        assert 0.4 < th <= 0.5
        assert (value, min_dcf(scores, labels)[0]) == sweep_oracle(scores, labels)

    @pytest.mark.parametrize("chunk", range(10))
    def test_matches_sweep_oracle(self, chunk):
        rng = np.random.default_rng(chunk)
        for _ in range(100):
            scores, labels = _random_trials(rng)
            cfg = DCFConfig(p_target=float(rng.uniform(0.001, 0.5)))
            want_eer, want_dcf = sweep_oracle(scores, labels, cfg)
            assert eer(scores, labels)[0] == want_eer
            assert min_dcf(scores, labels, cfg)[0] == want_dcf

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_monotone_invariance(self, seed):
        scores, labels = _random_trials(np.random.default_rng(seed))
        for f in (np.exp, lambda s: 3.0 * s - 7.0, np.arctan):
            assert eer(f(scores), labels)[0] == eer(scores, labels)[0]
            assert min_dcf(f(scores), labels)[0] == min_dcf(scores, labels)[0]

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_symmetry(self, seed):
        scores, labels = _random_trials(np.random.default_rng(seed))
        assert eer(-scores, ~labels)[0] == pytest.approx(eer(scores, labels)[0], abs=1e-12)

    @pytest.mark.parametrize("labels", [[1, 1, 1], [0, 0]])
    def test_single_class(self, labels):
        with pytest.raises(EvaluationError):
            eer(np.zeros(len(labels)), labels)
        with pytest.raises(EvaluationError):
            min_dcf(np.zeros(len(labels)), labels)

    def test_non_finite(self):
        with pytest.raises(EvaluationError):
            eer([np.nan, 0.1], [1, 0])


class TestMinDcf:
    def test_perfect(self):
        assert min_dcf([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_reject_all_bound(self, seed):
        scores, labels = _random_trials(np.random.default_rng(seed))
        assert 0.0 <= min_dcf(scores, labels)[0] <= 1.0

    def test_config_validation(self):
        with pytest.raises(EvaluationError):
            DCFConfig(p_target=1.0)
        with pytest.raises(EvaluationError):
            DCFConfig(c_fa=0.0)


class TestScoring:
    def test_cosine_cases(self):
        emb = {"a": np.array([1.0, 0]), "b": np.array([2.0, 0]), "c": np.array([0, 3.0]), "d": np.array([-1.0, 0])}
        trials = [Trial(True, "a", "b"), Trial(False, "a", "c"), Trial(False, "a", "d")]
        np.testing.assert_allclose(score_trials(trials, emb), [1.0, 0.0, -1.0], atol=1e-15)

    def test_missing_ids_listed(self):
        with pytest.raises(EvaluationError, match="x, y"):
            score_trials([Trial(True, "x", "a"), Trial(False, "y", "a")], {"a": np.ones(2)})

    def test_trial_file_round_trip(self, tmp_path):
        trials = [Trial(True, "u1", "u2"), Trial(False, "u1", "u3")]
        write_trials(tmp_path / "t.txt", trials)
        assert read_trials(tmp_path / "t.txt") == trials
        assert (tmp_path / "t.txt").read_text() == "1 u1 u2\n0 u1 u3\n"

    def test_bad_trial_line(self, tmp_path):
        (tmp_path / "t.txt").write_text("yes u1 u2\n")
        with pytest.raises(EvaluationError):
            read_trials(tmp_path / "t.txt")


class TestEmbeddingFile:
    def test_round_trip_and_size(self, tmp_path):
        rng = np.random.default_rng(0)
        emb = {f"utt{i:03d}-ü": rng.standard_normal(7).astype(np.float32) for i in range(5)}
        path = export_embeddings(emb, tmp_path / "e.spke")
        back = read_embeddings(path)
        assert list(back) == list(emb)
        assert all(np.array_equal(back[k], v) for k, v in emb.items())
        expected = 12 + sum(4 + len(k.encode()) + 4 * 7 for k in emb)
        assert path.stat().st_size == expected
        assert path.read_bytes()[:4] == b"SPKE"

    def test_empty_map(self, tmp_path):
        with pytest.raises(EvaluationError):
            export_embeddings({}, tmp_path / "e.spke")

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(EvaluationError, match="nowhere"):
            export_embeddings({"a": np.ones(2)}, tmp_path / "nowhere" / "e.spke")

    def test_not_an_embedding_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(EvaluationError):
            read_embeddings(tmp_path / "x")
