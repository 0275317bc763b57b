"""Toy-corpus training variants shared by the trend script and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .encoder import Encoder, preset
from .frontend import FrontendConfig
from .toy import SyntheticSpeakerSpec, generate_toy_corpus
from .train import Trainer, evaluate, load_utterances

VARIANTS = {
    "moco-noaug": dict(loss_kind="moco", augment_wavaug=False),
    "moco-wavaug": dict(loss_kind="moco"),
    "moco-wavaug-proto": dict(loss_kind="proto"),
    "simclr-wavaug": dict(loss_kind="simclr"),
    "semi-wavaug": dict(loss_kind="semi", data_labeled_speakers=0.15),
}


@dataclass
class RunResult:
    name: str
    seed: int
    report: dict
    seconds: float
    out_dir: Path
    epoch_losses: list

    @property
    def eer(self):
        return self.report["eer"]


class ToyBench:
    """A generated toy corpus plus its decoded training utterances, reused across runs."""

    def __init__(self, root, spec: SyntheticSpeakerSpec | None = None):
        self.root = Path(root)
        if not (self.root / "trials.txt").exists():
            generate_toy_corpus(spec or SyntheticSpeakerSpec(), self.root)
        self.utts = load_utterances(self.root / "train.list", FrontendConfig())

    def config(self, out_dir, **overrides) -> RunConfig:
        return RunConfig.toy(data_train_manifest=str(self.root / "train.list"),
                             data_eval_manifest=str(self.root / "eval.list"),
                             data_trials=str(self.root / "trials.txt"),
                             data_aug_manifest=str(self.root / "aug.list"),
                             out_dir=str(out_dir), **overrides)

    def evaluate(self, encoder, which="embedding", report_path=None) -> dict:
        return evaluate(encoder, self.root / "eval.list", self.root / "trials.txt", which, report_path)

    def untrained_eer(self, seed=0) -> float:
        return self.evaluate(Encoder(preset("tdnn-tiny"), np.random.default_rng([seed, 0xE1])))["eer"]

    def run(self, name, out_root, seed=0, **overrides) -> RunResult:
        out = Path(out_root) / f"{name}-s{seed}"
        cfg = self.config(out, train_seed=seed, **{**VARIANTS[name], **overrides})
        t0 = time.time()
        trainer = Trainer(cfg, utterances=self.utts)
        losses = trainer.train()
        report = self.evaluate(trainer.query, cfg.eval_embedding, out / "report.txt")
        return RunResult(name, seed, report, time.time() - t0, out, losses)
