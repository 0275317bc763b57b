"""Verification scoring: trial lists, cosine scores, EER, minDCF and embedding files."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EMB_MAGIC = b"SPKE"


class EvaluationError(ValueError):
    pass


@dataclass
class DCFConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise EvaluationError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise EvaluationError("costs must be positive")


@dataclass
class Trial:
    target: bool
    enroll: str
    test: str


def read_trials(path) -> list[Trial]:
    """Parse ``1|0 enroll_id test_id`` lines (1 = same speaker)."""
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise EvaluationError(f"{path}:{lineno}: expected '1|0 enroll_id test_id'")
        trials.append(Trial(parts[0] == "1", parts[1], parts[2]))
    return trials


def write_trials(path, trials):
    with open(path, "w") as f:
        for t in trials:
            f.write(f"{int(t.target)} {t.enroll} {t.test}\n")


def score_trials(trials, embeddings: dict) -> np.ndarray:
    """Cosine score per trial, aligned with ``trials``."""
    missing = sorted({i for t in trials for i in (t.enroll, t.test) if i not in embeddings})
    if missing:
        raise EvaluationError(f"no embedding for ids: {', '.join(missing[:20])}"
                              + (" ..." if len(missing) > 20 else ""))
    scores = np.empty(len(trials))
    for k, t in enumerate(trials):
        a = np.asarray(embeddings[t.enroll], dtype=np.float64)
        b = np.asarray(embeddings[t.test], dtype=np.float64)
        scores[k] = a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12)
    return np.clip(scores, -1.0, 1.0)


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise EvaluationError("scores and labels must align")
    if not labels.any() or labels.all():
        raise EvaluationError("need at least one target and one nontarget trial")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError("scores must be finite")
    return scores, labels


def operating_points(scores, labels):
    """Miss and false-alarm counts at every distinct decision threshold.

    A trial is accepted when its score is >= the threshold.  Thresholds are
    -inf, the midpoints between consecutive distinct scores, and +inf, so the
    result has one more entry than there are distinct scores.
    """
    scores, labels = _split(scores, labels)
    order = np.argsort(scores, kind="stable")
    s, lab = scores[order], labels[order]
    distinct, starts = np.unique(s, return_index=True)
    ends = np.append(starts[1:], len(s))
    tgt_per = np.add.reduceat(lab.astype(np.int64), starts)
    non_per = (ends - starts) - tgt_per
    misses = np.concatenate([[0], np.cumsum(tgt_per)])
    fas = int((~lab).sum()) - np.concatenate([[0], np.cumsum(non_per)])
    thresholds = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2, [np.inf]])
    return thresholds, misses, fas


def eer_from_counts(misses, fas, n_tgt, n_non):
    """Equal error rate from operating-point counts ordered by increasing threshold."""
    misses = np.asarray(misses)
    fas = np.asarray(fas)
    for k in range(len(misses)):
        frr = misses[k] / n_tgt
        far = fas[k] / n_non
        if frr >= far:
            if frr == far or k == 0:
                return far, k
            frr0, far0 = misses[k - 1] / n_tgt, fas[k - 1] / n_non
            d0 = far0 - frr0
            d1 = frr - far
            t = d0 / (d0 + d1)
            return far0 + t * (far - far0), k
    raise EvaluationError("FRR never reaches FAR")   # unreachable: last point has FRR=1, FAR=0


def eer(scores, labels):
    """Return (eer, threshold) with EER as a fraction in [0, 1]."""
    thresholds, misses, fas = operating_points(scores, labels)
    labels = np.asarray(labels, dtype=bool)
    value, k = eer_from_counts(misses, fas, int(labels.sum()), int((~labels).sum()))
    return float(value), float(thresholds[k])


def dcf_from_counts(misses, fas, n_tgt, n_non, cfg: DCFConfig):
    misses = np.asarray(misses, dtype=np.float64)
    fas = np.asarray(fas, dtype=np.float64)
    cost = cfg.c_miss * cfg.p_target * (misses / n_tgt) + cfg.c_fa * (1 - cfg.p_target) * (fas / n_non)
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    return cost / norm


def min_dcf(scores, labels, cfg: DCFConfig | None = None):
    """Return (normalized minimum detection cost, threshold)."""
    cfg = cfg or DCFConfig()
    thresholds, misses, fas = operating_points(scores, labels)
    labels = np.asarray(labels, dtype=bool)
    dcf = dcf_from_counts(misses, fas, int(labels.sum()), int((~labels).sum()), cfg)
    k = int(np.argmin(dcf))
    return float(dcf[k]), float(thresholds[k])


# ---------------------------------------------------------------- embedding files

def export_embeddings(embeddings: dict, path):
    """Binary layout: magic, u32 count, u32 dim, then per record u32 id length, id bytes, f32 vector."""
    if not embeddings:
        raise EvaluationError("refusing to export an empty embedding map")
    dims = {np.asarray(v).shape for v in embeddings.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise EvaluationError(f"embeddings must share one 1-D shape, got {sorted(dims)}")
    dim = next(iter(dims))[0]
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(EMB_MAGIC + struct.pack("<II", len(embeddings), dim))
            for key, vec in embeddings.items():
                raw = key.encode("utf-8")
                f.write(struct.pack("<I", len(raw)) + raw)
                f.write(np.asarray(vec, dtype="<f4").tobytes())
    except OSError as e:
        raise EvaluationError(f"cannot write embeddings to {path}: {e}") from e
    return path


def read_embeddings(path) -> dict:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise EvaluationError(f"cannot read embeddings from {path}: {e}") from e
    if data[:4] != EMB_MAGIC:
        raise EvaluationError(f"{path}: not an embedding file")
    count, dim = struct.unpack_from("<II", data, 4)
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        key = data[pos:pos + n].decode("utf-8")
        pos += n
        out[key] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).copy()
        pos += 4 * dim
    return out
