"""Training loop, embedding extraction and the evaluation pipeline."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .augment import AugmentCorpus, SpecAugConfig, WavAugConfig, specaug, wavaug_view
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .contrastive import UNLABELED, Batch, NegativeQueue, moco_loss, semi_loss, simclr_loss
from .encoder import Encoder, ema_update, preset
from .frontend import (FeatureChunk, FrontendConfig, FrontendError, SkipUtterance, Waveform, energy_vad,
                       load_wav, mean_normalize, mfcc, read_manifest)
from .metrics import DCFConfig, eer, min_dcf, read_trials, score_trials
from .numerics import CosineSchedule, OptimizerState, TrainingError, cosine_lr, sgd_step
from .prototypes import PrototypeBank, ProtoConfig, joint_loss, kmeans

log = logging.getLogger(__name__)

REVERB_CONTEXT = 50     # frames of audio kept ahead of a chunk before augmenting


def _single_thread(enabled):
    if not enabled:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(1)


@dataclass
class Utterance:
    utt_id: str
    speaker: str | None
    samples: object        # Waveform
    vad: np.ndarray
    clean_feats: np.ndarray


def load_utterances(manifest, fe: FrontendConfig, min_frames=None):
    """Read a manifest; drop utterances the front-end cannot use."""
    utts = []
    min_frames = fe.min_frames if min_frames is None else min_frames
    for utt_id, spk, path in read_manifest(manifest):
        w = load_wav(path)
        try:
            vad = energy_vad(w, fe)
        except FrontendError as e:
            log.warning("skipping %s: %s", utt_id, e)
            continue
        feats = mfcc(w, fe)[vad]
        if len(feats) < min_frames:
            log.warning("skipping %s: %d voiced frames < %d", utt_id, len(feats), min_frames)
            continue
        utts.append(Utterance(utt_id, spk, w, vad, feats))
    return utts


class Trainer:
    def __init__(self, cfg: RunConfig, utterances=None, corpus=None):
        self.cfg = cfg
        self.fe = FrontendConfig(min_frames=cfg.chunk_min_frames, max_frames=cfg.chunk_max_frames)
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out / "metrics.log"
        self.utts = utterances if utterances is not None else load_utterances(cfg.data_train_manifest, self.fe)
        if len(self.utts) < 2:
            raise TrainingError("need at least two usable training utterances")
        self.corpus = corpus
        if cfg.augment_wavaug and self.corpus is None:
            self.corpus = AugmentCorpus.from_manifest(cfg.data_aug_manifest)
        self.wavaug_cfg = WavAugConfig(reverb_prob=cfg.augment_reverb_prob, noise_prob=cfg.augment_noise_prob)
        self.specaug_cfg = SpecAugConfig()
        self.labels = self._assign_labels()

        arch = preset(cfg.model_preset)
        self.query = Encoder(arch, np.random.default_rng([cfg.train_seed, 0xE1]))
        self.key = self.query.copy(requires_grad=False)
        self.queue = NegativeQueue(cfg.queue_size, arch.proj_dims[-1])
        self.opt = OptimizerState(momentum=cfg.train_sgd_momentum, current_lr=cfg.train_lr_start)
        self.bank: PrototypeBank | None = None
        self.proto_cfg = ProtoConfig(num_clusters=cfg.proto_clusters, num_negatives=cfg.proto_negatives,
                                     warmup_epochs=cfg.proto_warmup_epochs, alpha=cfg.loss_alpha,
                                     eps=cfg.proto_eps)
        self.step = 0
        self.epoch = 0       # next epoch to run
        self.steps_per_epoch = len(self._epoch_batches(0))
        self.schedule = CosineSchedule(cfg.train_lr_start, cfg.train_lr_end,
                                       max(1, cfg.train_epochs * self.steps_per_epoch))
        self._pool = ThreadPoolExecutor(cfg.train_workers) if cfg.train_workers > 0 else None

    # ------------------------------------------------------------ data

    def _assign_labels(self):
        """Integer speaker ids, UNLABELED where the manifest or the labeled-speaker fraction says so."""
        speakers = sorted({u.speaker for u in self.utts if u.speaker is not None})
        if self.cfg.data_labeled_speakers < 1.0:
            rng = np.random.default_rng([self.cfg.train_seed, 0x1AB])
            keep = max(1, int(round(self.cfg.data_labeled_speakers * len(speakers)))) if speakers else 0
            speakers = sorted(rng.choice(speakers, size=keep, replace=False).tolist())
        index = {s: i for i, s in enumerate(speakers)}
        return np.array([index.get(u.speaker, UNLABELED) for u in self.utts], dtype=np.int64)

    def _epoch_batches(self, epoch):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.train_seed, epoch, 0xBA])
        B = cfg.train_batch_size
        if cfg.loss_kind != "semi":
            order = rng.permutation(len(self.utts))
            batches = [order[i:i + B] for i in range(0, len(order), B)]
            return [b for b in batches if len(b) >= 2]
        labeled = np.flatnonzero(self.labels != UNLABELED)
        unlabeled = rng.permutation(np.flatnonzero(self.labels == UNLABELED))
        n_lab = int(round(cfg.train_labeled_fraction * B)) if labeled.size else 0
        per = B - n_lab
        n_batches = -(-len(unlabeled) // per) if per and len(unlabeled) else -(-len(labeled) // max(n_lab, 1))
        # labeled samples cycle through fresh permutations of the labeled pool
        stream = np.concatenate([rng.permutation(labeled) for _ in range(-(-n_batches * n_lab // max(len(labeled), 1)) + 1)])
        batches = []
        for k in range(n_batches):
            u = unlabeled[k * per:(k + 1) * per] if per else unlabeled[:0]
            batch = np.concatenate([stream[k * n_lab:(k + 1) * n_lab], u]).astype(np.int64)
            if len(batch) >= 2:
                batches.append(batch)
        return batches

    def _view(self, idx, epoch, view, length):
        """One training view: pick the chunk on the clean VAD frames, then augment only that span.

        The waveform is cropped to the chunk plus ``REVERB_CONTEXT`` frames of lead-in,
        so the reverb tail entering the chunk is still simulated.
        """
        utt = self.utts[idx]
        rng = np.random.default_rng([self.cfg.train_seed, epoch, idx, view])
        kept = np.flatnonzero(utt.vad)
        total = len(kept)
        if total < self.fe.min_frames:
            raise SkipUtterance(f"{utt.utt_id}: {total} frames < {self.fe.min_frames}")
        length = min(length, total)
        start = int(rng.integers(0, total - length + 1))
        if self.cfg.augment_wavaug:
            sel = kept[start:start + length]
            first = max(0, int(sel[0]) - REVERB_CONTEXT)
            hop, win = self.fe.hop_length, self.fe.win_length
            seg = Waveform(utt.samples.samples[first * hop:int(sel[-1]) * hop + win])
            seg = wavaug_view(seg, self.corpus, self.wavaug_cfg, rng)
            frames = mfcc(seg, self.fe)[sel - first]
        else:
            frames = utt.clean_feats[start:start + length]
        chunk = FeatureChunk(mean_normalize(frames), utt.utt_id)
        if self.cfg.augment_specaug:
            chunk = specaug(chunk, self.specaug_cfg, rng)
        return chunk.frames

    def _batch_arrays(self, idx, epoch, batch_no):
        rng = np.random.default_rng([self.cfg.train_seed, epoch, batch_no, 0xC4])
        length = int(rng.integers(self.fe.min_frames, self.fe.max_frames + 1))
        length = min([length] + [len(self.utts[i].clean_feats) for i in idx])
        jobs = [(int(i), epoch, v, length) for v in (0, 1) for i in idx]
        if self._pool is not None:
            frames = list(self._pool.map(lambda a: self._view(*a), jobs))
        else:
            frames = [self._view(*a) for a in jobs]
        n = len(idx)
        return np.stack(frames[:n]), np.stack(frames[n:])

    # ------------------------------------------------------------ phases

    def in_proto_phase(self, epoch):
        return self.cfg.loss_kind == "proto" and epoch >= self.cfg.proto_warmup_epochs

    def dataset_projections(self):
        enc = self.key if self.cfg.proto_encoder == "key" else self.query
        out = []
        for u in self.utts:
            _, proj = enc.forward(mean_normalize(u.clean_feats)[None], train=False)
            out.append(proj.data[0])
        return np.stack(out)

    def recluster(self, epoch):
        rng = np.random.default_rng([self.cfg.train_seed, epoch, 0x9C])
        self.bank = kmeans(self.dataset_projections(), self.cfg.proto_clusters, rng, self.proto_cfg)
        self.bank.epoch = epoch
        self._log(event="cluster", epoch=epoch, clusters=self.bank.num_clusters,
                  inertia=self.bank.inertia_history[-1], phi_mean=float(self.bank.concentrations.mean()))

    # ------------------------------------------------------------ step

    def compute_loss(self, xa, xb, idx, epoch, batch_no):
        cfg = self.cfg
        parts = {}
        if cfg.loss_kind == "simclr":
            _, proj = self.query.forward(np.concatenate([xa, xb]), train=True)
            n = len(xa)
            loss = simclr_loss(Batch(proj[:n], proj[n:]), cfg.loss_tau)
            return loss, parts, None
        _, q = self.query.forward(xa, train=True)
        _, k = self.key.forward(xb, train=False)
        k = k.detach()
        if cfg.loss_kind == "moco" or (cfg.loss_kind == "proto" and not self.in_proto_phase(epoch)):
            loss = moco_loss(q, k, self.queue, cfg.loss_tau)
        elif cfg.loss_kind == "proto":
            rng = np.random.default_rng([cfg.train_seed, epoch, batch_no, 0x9E])
            loss, parts = joint_loss(q, k, self.queue, self.bank, self.bank.assignments[idx], cfg.loss_tau,
                                     cfg.loss_alpha, cfg.proto_negatives, rng, return_parts=True)
        else:
            labels = self.labels[idx]
            loss, parts = semi_loss(Batch(q, k, labels), self.queue,
                                    _loss_cfg(cfg), return_parts=True)
            parts["labeled"] = int((labels != UNLABELED).sum())
        return loss, parts, k

    def train_step(self, idx, epoch, batch_no):
        xa, xb = self._batch_arrays(idx, epoch, batch_no)
        self.query.zero_grad()
        loss, parts, keys = self.compute_loss(xa, xb, idx, epoch, batch_no)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch} step {self.step}")
        loss.backward()
        self.opt.current_lr = cosine_lr(min(self.step, self.schedule.total_steps), self.schedule)
        sgd_step(self.query.params, self.opt)
        if keys is not None:
            ema_update(self.key, self.query, self.cfg.moco_momentum)
            self.queue.push(keys.data)
        self.step += 1
        self._log(epoch=epoch, step=self.step, phase="proto" if self.in_proto_phase(epoch) else "warmup"
                  if self.cfg.loss_kind == "proto" else "main", loss=value, lr=self.opt.current_lr,
                  queue_fill=len(self.queue), **parts)
        return value

    def run_epoch(self, epoch):
        cfg = self.cfg
        if self.in_proto_phase(epoch):
            if epoch == cfg.proto_warmup_epochs:
                self._log(event="phase_switch", epoch=epoch, phase="proto")
            if self.bank is None or (epoch - cfg.proto_warmup_epochs) % cfg.proto_cluster_every_n == 0:
                self.recluster(epoch)
            elif epoch - self.bank.epoch > 1:
                log.warning("prototype bank is %d epochs old", epoch - self.bank.epoch)
        losses = [self.train_step(b, epoch, k) for k, b in enumerate(self._epoch_batches(epoch))]
        mean_loss = float(np.mean(losses))
        self._log(event="epoch_end", epoch=epoch, mean_loss=mean_loss)
        self.epoch = epoch + 1
        return mean_loss

    def train(self, epochs=None):
        """Run until ``cfg.train_epochs`` (or ``epochs`` more); checkpoint after each epoch."""
        end = self.cfg.train_epochs if epochs is None else min(self.cfg.train_epochs, self.epoch + epochs)
        history = []
        with _single_thread(self.cfg.train_deterministic):
            for epoch in range(self.epoch, end):
                try:
                    history.append(self.run_epoch(epoch))
                except TrainingError as e:
                    self._log(event="abort", epoch=epoch, reason=str(e).replace(" ", "_"))
                    raise
                self.save(self.out / f"ckpt-epoch{epoch:03d}.spkc")
                self._prune_checkpoints()
        return history

    # ------------------------------------------------------------ persistence

    def _log(self, **kv):
        with open(self.log_path, "a") as f:
            f.write(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()) + "\n")

    def _prune_checkpoints(self):
        ckpts = sorted(self.out.glob("ckpt-epoch*.spkc"))
        for old in ckpts[:-self.cfg.train_keep_checkpoints]:
            old.unlink()

    def checkpoint(self) -> Checkpoint:
        state = {f"key/{k}": v for k, v in self.key.state().items()}
        state["queue/entries"] = self.queue.entries
        state["queue/meta"] = np.array([self.queue.ptr, self.queue.fill_count], dtype=np.int64)
        if self.bank is not None:
            state["bank/centroids"] = self.bank.centroids
            state["bank/concentrations"] = self.bank.concentrations
            state["bank/assignments"] = self.bank.assignments.astype(np.int64)
            state["bank/epoch"] = np.array([self.bank.epoch], dtype=np.int64)
        return Checkpoint(step=self.step, epoch=self.epoch, params=self.query.state(),
                          momentum=self.opt.momentum, lr=self.opt.current_lr,
                          velocity=dict(self.opt.velocity), state=state, meta=self.cfg.to_text())

    def save(self, path):
        return save_checkpoint(path, self.checkpoint())

    def restore(self, path):
        ck = load_checkpoint(path)
        self.query.load_state(ck.params)
        self.key.load_state({k[4:]: v for k, v in ck.state.items() if k.startswith("key/")})
        self.opt.velocity = {k: v.astype(np.float32) for k, v in ck.velocity.items()}
        self.opt.current_lr = float(ck.lr)
        self.queue.entries = ck.state["queue/entries"].astype(np.float32)
        self.queue.ptr, self.queue.fill_count = (int(v) for v in ck.state["queue/meta"])
        if "bank/centroids" in ck.state:
            a = ck.state["bank/assignments"]
            M = len(ck.state["bank/centroids"])
            self.bank = PrototypeBank(ck.state["bank/centroids"].astype(np.float64),
                                      ck.state["bank/concentrations"].astype(np.float64), a,
                                      np.bincount(a, minlength=M), int(ck.state["bank/epoch"][0]))
        self.step, self.epoch = ck.step, ck.epoch
        return ck


def _loss_cfg(cfg: RunConfig):
    from .contrastive import LossConfig
    return LossConfig(tau=cfg.loss_tau, semi_weight=cfg.loss_lambda, proto_weight=cfg.loss_alpha)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def read_metrics_log(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        row = {}
        for item in line.split():
            k, _, v = item.partition("=")
            row[k] = v
        rows.append(row)
    return rows


# ---------------------------------------------------------------- extraction and evaluation

def encoder_from_checkpoint(path):
    ck = load_checkpoint(path)
    cfg = parse_config(ck.meta, env={})
    enc = Encoder(preset(cfg.model_preset))
    enc.load_state(ck.params)
    return enc, cfg


def extract_embeddings(entries, encoder: Encoder, fe: FrontendConfig | None = None, which="embedding"):
    """Embed every full post-VAD utterance; returns ``{utt_id: unit vector}``.

    ``entries`` is a manifest path or a list of ``(utt_id, speaker, wav_path)``.
    """
    fe = fe or FrontendConfig()
    if isinstance(entries, (str, Path)):
        entries = read_manifest(entries)
    out = {}
    for utt_id, _, path in entries:
        w = load_wav(path)
        try:
            feats = mfcc(w, fe)[energy_vad(w, fe)]
        except FrontendError as e:
            log.warning("skipping %s: %s", utt_id, e)
            continue
        if len(feats) < encoder.cfg.receptive_field:
            log.warning("skipping %s: %d frames shorter than receptive field", utt_id, len(feats))
            continue
        emb, proj = encoder.forward(mean_normalize(feats)[None], train=False)
        v = (emb if which == "embedding" else proj).data[0].astype(np.float64)
        out[utt_id] = (v / max(np.linalg.norm(v), 1e-12)).astype(np.float32)
    return out


def score_report(trials, embeddings, dcf=None) -> dict:
    dcf = dcf or DCFConfig()
    scores = score_trials(trials, embeddings)
    labels = np.array([t.target for t in trials])
    e, e_thr = eer(scores, labels)
    d, d_thr = min_dcf(scores, labels, dcf)
    return {"eer": e, "eer_threshold": e_thr, "min_dcf": d, "dcf_threshold": d_thr,
            "p_target": dcf.p_target, "n_trials": len(trials), "n_target": int(labels.sum())}


def evaluate(encoder: Encoder, manifest, trials_path, which="embedding", report_path=None) -> dict:
    trials = read_trials(trials_path)
    report = score_report(trials, extract_embeddings(manifest, encoder, which=which))
    if report_path is not None:
        write_report(report_path, report)
    return report


def write_report(path, report: dict):
    with open(path, "w") as f:
        for k, v in report.items():
            f.write(f"{k}={_fmt(float(v)) if isinstance(v, float) else v}\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = int(v) if k.startswith("n_") else float(v)
    return out


def format_report(report: dict) -> str:
    rows = [("EER (%)", f"{100 * report['eer']:.2f}"),
            (f"minDCF (p={report['p_target']:g})", f"{report['min_dcf']:.4f}"),
            ("trials", f"{report['n_trials']} ({report['n_target']} target)")]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
