"""Training loop: step budget, periodic validation EER, best/final checkpoints."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, TextIO

import numpy as np

from . import model as M
from .evaluation import System, build_trials, compute_eer, score_trials
from .segmentation import SegmentSpec, draw_segment_length, segment_count
from .training import DEFAULT_W, AMSGrad, BatchSpec, make_batch, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainSettings:
    regime: str = "baseline"
    W: Optional[float] = None
    segment_policy: str = "fixed"
    segment_length: int = 2187
    segment_min: int = 2187
    segment_max: int = 4374
    overlap_fraction: float = 0.1
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    pre_emphasis: float = 0.97
    seed: int = 0
    eval_every: int = 100
    val_trials: int = 400

    @property
    def weight(self) -> float:
        return DEFAULT_W[self.regime] if self.W is None else self.W

    def eval_segment_length(self, model_config: M.ModelConfig) -> Optional[int]:
        """Segment length used at inference; None means the whole crop."""
        if self.regime == "baseline":
            return None
        if self.segment_policy == "fixed":
            return self.segment_length
        factor = model_config.downsampling
        return max(factor, -(-self.segment_min // factor) * factor)

    def max_segments(self, crop_length: int, factor: int) -> int:
        if self.regime == "baseline":
            return 0
        lengths = [self.segment_length] if self.segment_policy == "fixed" else [
            c for c in range(factor, self.segment_max + 1, factor) if c >= self.segment_min
        ]
        return max(segment_count(crop_length, SegmentSpec(c, self.overlap_fraction)) for c in lengths)


@dataclass
class TrainResult:
    model: M.Model
    best_step: int
    best_val_eer: float
    final_loss: float
    history: List[dict]


def validation_eer(
    system: System,
    waves: Sequence[np.ndarray],
    trials,
    conditions: Sequence[int],
    enrol_duration: int,
) -> float:
    eers = [compute_eer(score_trials(system, waves, trials, enrol_duration, c))[0] for c in conditions]
    return float(np.mean(eers))


def train(
    settings: TrainSettings,
    model_config: M.ModelConfig,
    train_waves: Sequence[np.ndarray],
    train_labels: Sequence[int],
    val_waves: Sequence[np.ndarray] = (),
    val_speakers: Sequence[int] = (),
    val_conditions: Sequence[int] = (),
    teacher: Optional[M.Model] = None,
    checkpoint_dir=None,
    log_file: Optional[TextIO] = None,
) -> TrainResult:
    """Train one system for ``settings.steps`` mini-batches.

    When validation data is given, the parameters with the lowest mean
    validation EER over ``val_conditions`` are kept (ties keep the earlier
    step) and returned; otherwise the final parameters are returned.
    """
    if settings.regime == "sa_ts" and teacher is None:
        raise ValueError("regime sa_ts needs a trained teacher (baseline) checkpoint")
    crop = model_config.input_length
    factor = model_config.downsampling
    config = replace(model_config, num_segment_output_layers=settings.max_segments(crop, factor)
                     if settings.weight > 0 else 0)
    model = M.build(config, seed=settings.seed)
    if teacher is not None:
        teacher.freeze()
        if teacher.config.embedding_dim != config.embedding_dim:
            raise ValueError("teacher and student embedding sizes differ")

    rng = np.random.default_rng([settings.seed, 1])
    opt = AMSGrad(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    batch_spec = BatchSpec(settings.batch_size, crop, config.num_speakers)
    seg_len = settings.eval_segment_length(config)
    system = System(settings.regime, model, seg_len, settings.overlap_fraction, settings.pre_emphasis)

    do_val = len(val_waves) > 0 and len(val_conditions) > 0
    trials = build_trials(val_speakers, settings.val_trials, np.random.default_rng([settings.seed, 2])) if do_val else None
    best = (np.inf, -1, None)
    history: List[dict] = []
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    t0 = time.perf_counter()
    loss_value = float("nan")

    for step in range(1, settings.steps + 1):
        waves, labels = make_batch(list(train_waves), train_labels, batch_spec, rng, settings.pre_emphasis)
        spec = None
        if settings.regime != "baseline":
            length = settings.segment_length
            if settings.segment_policy == "random":
                length = draw_segment_length(settings.segment_min, settings.segment_max, rng, factor)
            spec = SegmentSpec(length, settings.overlap_fraction)
        model.train()
        loss, terms = total_loss(settings.regime, model, waves, labels, spec, settings.weight, teacher)
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_value = loss.item()
        record = {"step": step, **terms, "time": time.perf_counter() - t0}
        if log_file is not None:
            log_file.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                    for k, v in record.items()) + "\n")
        if do_val and (step % settings.eval_every == 0 or step == settings.steps):
            val = validation_eer(system, val_waves, trials, val_conditions, crop)
            record["val_eer"] = val
            log.info("%s step %d loss %.4f val EER %.2f", settings.regime, step, loss_value, val)
            if log_file is not None:
                log_file.write(f"step={step} val_eer={val:.6g}\n")
            if val < best[0]:
                best = (val, step, M.checkpoint_bytes(model))
        history.append(record)

    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        M.save_checkpoint(model, checkpoint_dir / "final.ckpt")
        (checkpoint_dir / "best.ckpt").write_bytes(best[2] if best[2] is not None else M.checkpoint_bytes(model))
    if best[2] is not None:
        chosen = M.load_checkpoint_bytes(best[2])
    else:
        chosen = model
    return TrainResult(chosen, best[1] if best[2] is not None else settings.steps,
                       float(best[0]), loss_value, history)
