"""Duration-conditioned verification: trials, cosine scoring, EER and the report grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .model import Model
from .segmentation import SegmentSpec, segment_batch
from .training import crop, pre_emphasize


@dataclass(frozen=True)
class Trial:
    enrol: int
    test: int
    is_target: bool


@dataclass
class TrialSet:
    trials: List[Trial]
    duration_condition: Optional[int] = None

    @property
    def num_target(self) -> int:
        return sum(t.is_target for t in self.trials)

    @property
    def num_impostor(self) -> int:
        return len(self.trials) - self.num_target


@dataclass
class ScoreSet:
    target_scores: np.ndarray
    impostor_scores: np.ndarray
    labels: np.ndarray = field(default=None)  # per-trial, in trial order
    scores: np.ndarray = field(default=None)

    @classmethod
    def from_trials(cls, scores, labels) -> "ScoreSet":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=bool)
        return cls(scores[labels], scores[~labels], labels, scores)


@dataclass
class System:
    """A trained extractor plus its inference-time segmentation (None = whole crop)."""

    name: str
    model: Model
    segment_length: Optional[int] = None
    overlap_fraction: float = 0.1
    pre_emphasis: float = 0.97

    @property
    def spec(self) -> SegmentSpec:
        return SegmentSpec(self.segment_length or self.model.config.input_length, self.overlap_fraction)


# -- trials ----------------------------------------------------------------------

def build_trials(
    speakers: Sequence[int],
    num_trials: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrialSet:
    """Target/impostor pairs over utterances labelled by ``speakers``.

    ``num_trials=None`` enumerates every unordered pair; otherwise half the
    trials are drawn from target pairs and half from impostor pairs, without
    replacement (capped by what exists).
    """
    speakers = list(speakers)
    counts: Dict[int, int] = {}
    for s in speakers:
        counts[s] = counts.get(s, 0) + 1
    if len(counts) < 2 or sum(c >= 2 for c in counts.values()) < 2:
        raise ValueError("trials need at least 2 speakers with at least 2 utterances each")

    target, impostor = [], []
    for i, j in itertools.combinations(range(len(speakers)), 2):
        (target if speakers[i] == speakers[j] else impostor).append(Trial(i, j, speakers[i] == speakers[j]))
    if num_trials is None:
        return TrialSet(sorted(target + impostor, key=lambda t: (t.enrol, t.test)))

    rng = rng if rng is not None else np.random.default_rng(0)
    n_tar = min(num_trials // 2, len(target))
    n_imp = min(num_trials - num_trials // 2, len(impostor))
    chosen = [target[i] for i in rng.choice(len(target), n_tar, replace=False)]
    chosen += [impostor[i] for i in rng.choice(len(impostor), n_imp, replace=False)]
    return TrialSet(sorted(chosen, key=lambda t: (t.enrol, t.test)))


# -- embedding and scoring --------------------------------------------------------

def embed_utterances(system: System, waves: Sequence[np.ndarray], duration: int, chunk: int = 64) -> np.ndarray:
    """Aggregated embeddings ``[N, D]`` of the first ``duration`` samples of each utterance."""
    batch = pre_emphasize(np.stack([crop(w, duration) for w in waves]), system.pre_emphasis)
    segments, k = segment_batch(batch, system.spec)
    model = system.model
    was_training = model.training
    model.eval()
    try:
        with nx.no_grad():
            emb = np.concatenate([
                model.forward_embedding(segments[i:i + chunk]).data
                for i in range(0, len(segments), chunk)
            ])
    finally:
        model.training = was_training
    return emb.reshape(len(waves), k, -1).mean(axis=1)


def cosine_scores(enrol: np.ndarray, test: np.ndarray, trials: TrialSet) -> np.ndarray:
    scores = np.empty(len(trials.trials))
    for n, t in enumerate(trials.trials):
        a, b = enrol[t.enrol], test[t.test]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError(f"trial {n} ({t.enrol} vs {t.test}): degenerate zero embedding")
        scores[n] = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return scores


def score_trials(
    system: System,
    waves: Sequence[np.ndarray],
    trials: TrialSet,
    enrol_duration: int,
    test_duration: int,
) -> ScoreSet:
    """Cosine score of each trial: full enrolment crop vs. shortened test crop."""
    used = sorted({t.enrol for t in trials.trials} | {t.test for t in trials.trials})
    pos = {u: n for n, u in enumerate(used)}
    sub = [waves[u] for u in used]
    enrol = embed_utterances(system, sub, enrol_duration)
    test = enrol if test_duration == enrol_duration else embed_utterances(system, sub, test_duration)
    remapped = TrialSet([Trial(pos[t.enrol], pos[t.test], t.is_target) for t in trials.trials])
    scores = cosine_scores(enrol, test, remapped)
    return ScoreSet.from_trials(scores, [t.is_target for t in trials.trials])


# -- EER ---------------------------------------------------------------------------

def candidate_thresholds(target, impostor) -> np.ndarray:
    pooled = np.unique(np.concatenate([target, impostor]))
    mids = (pooled[:-1] + pooled[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def _eer_from_counts(thresholds, fa_counts, fr_counts, n_imp, n_tar) -> Tuple[float, float]:
    """Shared crossing rule over integer counts, evaluated exactly with fractions."""
    far = [Fraction(int(c), n_imp) for c in fa_counts]
    frr = [Fraction(int(c), n_tar) for c in fr_counts]
    diff = [a - r for a, r in zip(far, frr)]
    best = min(range(len(diff)), key=lambda i: (abs(diff[i]), i))
    if diff[best] == 0:
        return float(100 * far[best]), float(thresholds[best])
    # FAR - FRR falls from +1 at -inf to -1 at +inf; interpolate across the sign change
    b = next(i for i, d in enumerate(diff) if d < 0)
    a = b - 1
    t = diff[a] / (diff[a] - diff[b])
    eer = far[a] + t * (far[b] - far[a])
    return float(100 * eer), float(thresholds[best])


def compute_eer(scores: ScoreSet) -> Tuple[float, float]:
    """Equal error rate in percent and its operating threshold.

    FAR(th) counts impostor scores >= th, FRR(th) counts target scores < th,
    evaluated at -inf, +inf and every midpoint between adjacent distinct
    pooled scores.
    """
    tar = np.asarray(scores.target_scores, dtype=np.float64)
    imp = np.asarray(scores.impostor_scores, dtype=np.float64)
    if tar.size == 0 or imp.size == 0:
        raise ValueError("EER needs at least one target and one impostor score")
    th = candidate_thresholds(tar, imp)
    fa = imp.size - np.searchsorted(np.sort(imp), th, side="left")
    fr = np.searchsorted(np.sort(tar), th, side="left")
    return _eer_from_counts(th, fa, fr, imp.size, tar.size)


# -- reporting ---------------------------------------------------------------------

@dataclass
class EvalCell:
    eer: float
    threshold: float
    num_target: int
    num_impostor: int


@dataclass
class EvalReport:
    systems: List[str]
    conditions: List[int]
    cells: Dict[Tuple[str, int], EvalCell]

    def eer(self, system: str, condition: int) -> float:
        return self.cells[(system, condition)].eer


def format_grid(report: EvalReport) -> str:
    lines = ["system," + ",".join(f"d{c}" for c in report.conditions)]
    for name in report.systems:
        lines.append(name + "," + ",".join(f"{report.eer(name, c):.4f}" for c in report.conditions))
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> Dict[str, Dict[int, float]]:
    rows = [line.split(",") for line in text.strip().splitlines()]
    conditions = [int(h[1:]) for h in rows[0][1:]]
    return {r[0]: {c: float(v) for c, v in zip(conditions, r[1:])} for r in rows[1:]}


def emit_report(
    report: EvalReport,
    path,
    score_dumps: Optional[Dict[Tuple[str, int], ScoreSet]] = None,
) -> Path:
    """Write the CSV grid to ``path`` and ``label score`` dumps beside it."""
    if not report.cells:
        raise ValueError("report has no cells")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_grid(report))
    for (name, cond), s in (score_dumps or {}).items():
        dump = path.parent / f"scores_{name}_d{cond}.txt"
        dump.write_text("".join(f"{int(l)} {v:.17g}\n" for l, v in zip(s.labels, s.scores)))
    return path


def write_trial_list(trials: TrialSet, paths: Sequence[str], out) -> None:
    Path(out).write_text("".join(
        f"{int(t.is_target)} {paths[t.enrol]} {paths[t.test]}\n" for t in trials.trials
    ))


def read_trial_list(path, paths: Sequence[str]) -> TrialSet:
    index = {p: i for i, p in enumerate(paths)}
    trials = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            label, a, b = line.split()
            trials.append(Trial(index[a], index[b], label == "1"))
    return TrialSet(trials)


def evaluate_systems(
    systems: Sequence[System],
    waves: Sequence[np.ndarray],
    trials: TrialSet,
    conditions: Sequence[int],
    enrol_duration: int,
) -> Tuple[EvalReport, Dict[Tuple[str, int], ScoreSet]]:
    cells, dumps = {}, {}
    for system in systems:
        for cond in conditions:
            s = score_trials(system, waves, trials, enrol_duration, cond)
            eer, th = compute_eer(s)
            cells[(system.name, cond)] = EvalCell(eer, th, len(s.target_scores), len(s.impostor_scores))
            dumps[(system.name, cond)] = s
    return EvalReport([s.name for s in systems], list(conditions), cells), dumps
