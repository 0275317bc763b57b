"""Command-line entry point: ``spkcon {gen-toy,train,extract,score,eval}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .metrics import EvaluationError, export_embeddings, read_embeddings, read_trials
from .numerics import TrainingError
from .toy import SyntheticSpeakerSpec, generate_toy_corpus
from .train import (Trainer, encoder_from_checkpoint, evaluate, extract_embeddings, format_report,
                    score_report, write_report)

log = logging.getLogger("spkcon")


def cmd_gen_toy(args):
    spec = SyntheticSpeakerSpec(n_train_speakers=args.train_speakers, n_eval_speakers=args.eval_speakers,
                                train_utts=args.train_utts, eval_utts=args.eval_utts, seed=args.seed)
    paths = generate_toy_corpus(spec, args.out)
    for key in ("train_manifest", "eval_manifest", "aug_manifest", "trials"):
        print(f"{key}={paths[key]}")


def cmd_train(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.deterministic:
        overrides.update(train_deterministic=True, train_workers=0)
    if args.out:
        overrides["out_dir"] = args.out
    cfg = cfg.replace(**overrides)
    cfg.check_paths()
    trainer = Trainer(cfg)
    if args.resume:
        trainer.restore(args.resume)
        log.info("resumed from %s at epoch %d", args.resume, trainer.epoch)
    trainer.train(args.epochs)
    final = Path(cfg.out_dir) / "final.spkc"
    trainer.save(final)
    print(f"checkpoint={final}")
    if cfg.data_eval_manifest and cfg.data_trials:
        report = evaluate(trainer.query, cfg.data_eval_manifest, cfg.data_trials, cfg.eval_embedding,
                          Path(cfg.out_dir) / "report.txt")
        print(format_report(report))


def cmd_extract(args):
    encoder, cfg = encoder_from_checkpoint(args.ckpt)
    emb = extract_embeddings(args.manifest, encoder, which=args.which or cfg.eval_embedding)
    export_embeddings(emb, args.out)
    print(f"wrote {len(emb)} embeddings to {args.out}")


def _finish(report, path):
    print(format_report(report))
    if path:
        write_report(path, report)


def cmd_score(args):
    report = score_report(read_trials(args.trials), read_embeddings(args.emb))
    _finish(report, args.report)


def cmd_eval(args):
    encoder, cfg = encoder_from_checkpoint(args.ckpt)
    manifest = args.manifest or cfg.data_eval_manifest
    if not manifest:
        raise ConfigError("no eval manifest: pass --manifest or set data.eval_manifest in the run config")
    trials = read_trials(args.trials)
    emb = extract_embeddings(manifest, encoder, which=args.which or cfg.eval_embedding)
    _finish(score_report(trials, emb), args.report)


def build_parser():
    ap = argparse.ArgumentParser(prog="spkcon", description="Contrastive speaker embeddings")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="write the synthetic toy corpus")
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-speakers", type=int, default=20)
    p.add_argument("--eval-speakers", type=int, default=10)
    p.add_argument("--train-utts", type=int, default=20)
    p.add_argument("--eval-utts", type=int, default=10)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train an encoder from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="run at most this many more epochs")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="embed every utterance in a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=("embedding", "projection"))
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", help="score a trial list against an embedding file")
    p.add_argument("--emb", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--report", help="write key=value report here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="extract, score and report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--manifest", help="defaults to the run config's eval manifest")
    p.add_argument("--which", choices=("embedding", "projection"))
    p.add_argument("--report", help="write key=value report here")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, EvaluationError, TrainingError, OSError, ValueError) as e:
        print(f"spkcon {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
