"""Run configuration and its flat ``key = value`` file format.

Grammar: one ``section.key = value`` pair per line; ``#`` starts a comment;
blank lines are ignored.  Booleans are ``true``/``false``; lists are
comma-separated.  Keys map onto ``RunConfig`` fields by replacing the dot
with an underscore (``loss.tau`` -> ``loss_tau``).  ``SPKCON_SEED`` in the
environment overrides ``train.seed``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

LOSS_KINDS = ("simclr", "moco", "proto", "semi")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_train_manifest: str = ""
    data_eval_manifest: str = ""
    data_trials: str = ""
    data_aug_manifest: str = ""
    data_labeled_speakers: float = 1.0     # fraction of training speakers whose labels are kept
    out_dir: str = "runs/default"

    model_preset: str = "tdnn-paper"

    loss_kind: str = "moco"
    loss_tau: float = 0.1
    loss_lambda: float = 9.0
    loss_alpha: float = 0.25

    queue_size: int = 10000
    moco_momentum: float = 0.999

    proto_clusters: int = 5000
    proto_negatives: int = 10000
    proto_warmup_epochs: int = 60
    proto_eps: float = 1e-2
    proto_cluster_every_n: int = 1
    proto_encoder: str = "key"             # encoder used to embed the dataset for clustering

    train_epochs: int = 150
    train_batch_size: int = 4096
    train_lr_start: float = 1e-1
    train_lr_end: float = 1e-4
    train_sgd_momentum: float = 0.9
    train_seed: int = 0
    train_labeled_fraction: float = 0.1
    train_deterministic: bool = True
    train_workers: int = 0
    train_keep_checkpoints: int = 3

    chunk_min_frames: int = 200
    chunk_max_frames: int = 400

    augment_wavaug: bool = True
    augment_specaug: bool = False
    augment_reverb_prob: float = 0.8
    augment_noise_prob: float = 1.0

    eval_embedding: str = "embedding"      # "embedding" (pre-head) or "projection"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.train_batch_size < 2:
            raise ConfigError("train.batch_size must be at least 2")
        if self.loss_tau <= 0:
            raise ConfigError("loss.tau must be positive")
        if self.eval_embedding not in ("embedding", "projection"):
            raise ConfigError("eval.embedding must be 'embedding' or 'projection'")
        if self.proto_encoder not in ("key", "query"):
            raise ConfigError("proto.encoder must be 'key' or 'query'")
        if not 0.0 <= self.train_labeled_fraction <= 1.0:
            raise ConfigError("train.labeled_fraction must lie in [0, 1]")

    def check_paths(self):
        for key in ("data_train_manifest", "data_aug_manifest"):
            value = getattr(self, key)
            if key == "data_aug_manifest" and not self.augment_wavaug:
                continue
            if not value or not Path(value).exists():
                raise ConfigError(f"{dotted(key)} = {value!r} does not exist")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale preset for the synthetic 20-speaker corpus."""
        base = dict(model_preset="tdnn-tiny", train_batch_size=64, queue_size=512, proto_clusters=20,
                    proto_negatives=64, train_epochs=30, proto_warmup_epochs=12,
                    moco_momentum=0.9)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{dotted(f.name)} = {v}")
        return "\n".join(lines) + "\n"


def dotted(name: str) -> str:
    section, _, rest = name.partition("_")
    return f"{section}.{rest}"


def _coerce(raw: str, typ, key):
    try:
        if typ in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str, base: RunConfig | None = None, env=None) -> RunConfig:
    known = {dotted(f.name): f for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        f = known[key]
        values[f.name] = _coerce(raw, f.type, key)
    env = os.environ if env is None else env
    if env.get("SPKCON_SEED"):
        values["train_seed"] = _coerce(env["SPKCON_SEED"], int, "SPKCON_SEED")
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(), env=env)
    # relative data paths resolve against the config file's directory
    changes = {}
    for name in ("data_train_manifest", "data_eval_manifest", "data_trials", "data_aug_manifest", "out_dir"):
        value = getattr(cfg, name)
        if value and not Path(value).is_absolute():
            changes[name] = str(path.parent / value)
    return cfg.replace(**changes)
