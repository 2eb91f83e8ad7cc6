"""Command line runner: generate -> train -> evaluate, or all of it via ``reproduce``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import model as M
from . import synthdata as S
from .config import ExperimentConfig, load_config
from .evaluation import (
    EvalReport,
    System,
    build_trials,
    emit_report,
    evaluate_systems,
    write_trial_list,
)
from .plotting import plot_eer_grid, plot_score_histograms
from .trainer import train

log = logging.getLogger("segagg")

SYSTEM_FILE = "system.txt"


class MissingArtifact(FileNotFoundError):
    pass


def cmd_generate(cfg: ExperimentConfig) -> S.CorpusManifest:
    manifest = S.generate_corpus(cfg.corpus.to_corpus_config(), cfg.corpus_dir)
    log.info("wrote %d utterances to %s", len(manifest.entries), cfg.corpus_dir)
    return manifest


def _load_corpus(cfg: ExperimentConfig) -> S.CorpusManifest:
    try:
        return S.load_manifest(cfg.corpus_dir)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None


def teacher_path(cfg: ExperimentConfig) -> Path:
    if cfg.paths.teacher_checkpoint:
        return cfg.resolve(cfg.paths.teacher_checkpoint)
    return cfg.checkpoint_dir / "baseline" / "best.ckpt"


def cmd_train(cfg: ExperimentConfig, regime: Optional[str] = None) -> Path:
    """Train one regime; returns the directory holding best.ckpt and final.ckpt."""
    settings = cfg.train_settings(regime)
    teacher = None
    if settings.regime == "sa_ts":
        path = teacher_path(cfg)
        if not path.exists():
            raise MissingArtifact(
                f"regime sa_ts needs the teacher checkpoint {path}; train the baseline regime first"
            )
        teacher = M.load_checkpoint(path)
    manifest = _load_corpus(cfg)
    train_waves, train_ids = S.load_split(manifest, "train")
    speakers = manifest.speakers("train")
    index = {s: i for i, s in enumerate(speakers)}
    val_waves, val_ids = S.load_split(manifest, "val")

    model_config = cfg.model.to_model_config(len(speakers))
    out_dir = cfg.checkpoint_dir / settings.regime
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "train.log", "w") as log_file:
        result = train(
            settings, model_config, train_waves, [index[s] for s in train_ids],
            val_waves, val_ids, cfg.eval_conditions(), teacher=teacher,
            checkpoint_dir=out_dir, log_file=log_file,
        )
    seg = settings.eval_segment_length(model_config)
    (out_dir / SYSTEM_FILE).write_text(
        f"name={settings.regime}\nsegment_length={seg or 0}\n"
        f"overlap_fraction={settings.overlap_fraction!r}\npre_emphasis={settings.pre_emphasis!r}\n"
    )
    log.info("%s: best step %d (val EER %.2f%%), final loss %.4f",
             settings.regime, result.best_step, result.best_val_eer, result.final_loss)
    return out_dir


def load_system(checkpoint) -> System:
    """A checkpoint plus the inference settings recorded beside it."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise MissingArtifact(f"checkpoint {checkpoint} does not exist")
    model = M.load_checkpoint(checkpoint)
    meta = {"name": checkpoint.parent.name or checkpoint.stem, "segment_length": "0",
            "overlap_fraction": "0.1", "pre_emphasis": "0.97"}
    sidecar = checkpoint.parent / SYSTEM_FILE
    if sidecar.exists():
        meta.update(line.split("=", 1) for line in sidecar.read_text().splitlines() if "=" in line)
    return System(meta["name"], model, int(meta["segment_length"]) or None,
                  float(meta["overlap_fraction"]), float(meta["pre_emphasis"]))


def cmd_evaluate(cfg: ExperimentConfig, checkpoints: Sequence) -> EvalReport:
    """Score every checkpoint at every duration condition and write the report files."""
    if not checkpoints:
        raise MissingArtifact("evaluate needs at least one --checkpoint")
    systems = [load_system(c) for c in checkpoints]
    names = [s.name for s in systems]
    for i, s in enumerate(systems):
        if names.count(s.name) > 1:
            s.name = f"{s.name}{i}"
    manifest = _load_corpus(cfg)
    entries = manifest.split("test")
    waves, speakers = S.load_split(manifest, "test")
    n = cfg.eval.trials or None
    trials = build_trials(speakers, n, np.random.default_rng(cfg.eval.seed))
    conditions = cfg.eval_conditions()
    report, dumps = evaluate_systems(systems, waves, trials, conditions, cfg.model.input_length)

    path = emit_report(report, cfg.report_path, dumps)
    write_trial_list(trials, [e.path for e in entries], path.parent / "trials.txt")
    plot_eer_grid(report, path.with_suffix(".png"), cfg.model.input_length)
    plot_score_histograms(dumps, min(conditions), path.parent / f"scores_d{min(conditions)}.png")
    log.info("report written to %s", path)
    return report


def cmd_reproduce(cfg: ExperimentConfig) -> EvalReport:
    cmd_generate(cfg)
    dirs = {}
    for regime in cfg.training.systems:
        dirs[regime] = cmd_train(cfg, regime)
    return cmd_evaluate(cfg, [dirs[r] / "best.ckpt" for r in cfg.training.systems])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segagg", description="Segment-aggregation speaker verification experiments."
    )
    parser.add_argument("command", choices=["generate", "train", "evaluate", "reproduce"])
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--checkpoint", action="append", default=[],
                        help="checkpoint to evaluate (repeatable; order sets report rows)")
    parser.add_argument("--regime", choices=["baseline", "sa", "sa_ts"],
                        help="override training.regime for the train command")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        # single BLAS thread: bit-reproducible checkpoints
        with threadpool_limits(limits=1):
            cfg = load_config(args.config)
            if args.command == "generate":
                cmd_generate(cfg)
            elif args.command == "train":
                cmd_train(cfg, args.regime)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.checkpoint)
                print(cfg.report_path.read_text(), end="")
            else:
                cmd_reproduce(cfg)
                print(cfg.report_path.read_text(), end="")
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"segagg {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
