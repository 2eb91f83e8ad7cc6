import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segagg import model as M
from segagg.evaluation import (
    EvalCell,
    EvalReport,
    ScoreSet,
    System,
    Trial,
    TrialSet,
    build_trials,
    compute_eer,
    cosine_scores,
    embed_utterances,
    emit_report,
    evaluate_systems,
    format_grid,
    parse_grid,
    read_trial_list,
    score_trials,
    write_trial_list,
)


def brute_force_eer(target, impostor):
    """Operating points at every threshold between each pair of adjacent pooled
    sorted scores (duplicates included) plus both infinities; plain loops."""
    pooled = sorted(list(target) + list(impostor))
    thresholds = [-math.inf] + [(a + b) / 2 for a, b in zip(pooled, pooled[1:])] + [math.inf]
    thresholds = sorted(thresholds)
    points = []
    for th in thresholds:
        far = Fraction(sum(1 for s in impostor if s >= th), len(impostor))
        frr = Fraction(sum(1 for s in target if s < th), len(target))
        points.append((far, frr))
    gaps = [abs(a - r) for a, r in points]
    smallest = min(gaps)
    if smallest == 0:
        far, _ = points[gaps.index(0)]
        return float(100 * far)
    for (fa0, fr0), (fa1, fr1) in zip(points, points[1:]):
        d0, d1 = fa0 - fr0, fa1 - fr1
        if d0 > 0 and d1 < 0:
            t = d0 / (d0 - d1)
            return float(100 * (fa0 + t * (fa1 - fa0)))
    raise AssertionError("no crossing")


class TestTrials:
    def test_two_by_two(self):
        trials = build_trials([0, 0, 1, 1])
        assert (trials.num_target, trials.num_impostor) == (2, 4)
        assert {(t.enrol, t.test) for t in trials.trials if t.is_target} == {(0, 1), (2, 3)}

    def test_no_self_pairs_and_labels(self):
        rng = np.random.default_rng(0)
        speakers = list(rng.integers(0, 5, 40))
        for trials in (build_trials(speakers), build_trials(speakers, 50, np.random.default_rng(1))):
            for t in trials.trials:
                assert t.enrol != t.test
                assert t.is_target == (speakers[t.enrol] == speakers[t.test])

    def test_balanced_and_deterministic(self):
        speakers = [s for s in range(6) for _ in range(5)]
        a = build_trials(speakers, 40, np.random.default_rng(3))
        b = build_trials(speakers, 40, np.random.default_rng(3))
        assert a.trials == b.trials
        assert (a.num_target, a.num_impostor) == (20, 20)
        assert len(set(a.trials)) == 40

    def test_exhaustive_count(self):
        speakers = [s for s in range(4) for _ in range(3)]
        trials = build_trials(speakers)
        assert len(trials.trials) == math.comb(12, 2)
        assert trials.num_target == 4 * math.comb(3, 2)

    @pytest.mark.parametrize("speakers", [[0, 0, 0], [0, 1, 2, 3], [0, 0, 1]])
    def test_insufficient(self, speakers):
        with pytest.raises(ValueError):
            build_trials(speakers)

    def test_trial_file_round_trip(self, tmp_path):
        trials = build_trials([0, 0, 1, 1, 2])
        paths = [f"test/u{i}.swav" for i in range(5)]
        write_trial_list(trials, paths, tmp_path / "t.txt")
        first = (tmp_path / "t.txt").read_text().splitlines()[0]
        assert first == "1 test/u0.swav test/u1.swav"
        assert read_trial_list(tmp_path / "t.txt", paths).trials == trials.trials


class TestEER:
    def test_perfect_separation(self):
        eer, _ = compute_eer(ScoreSet([0.9, 0.8], [0.7, 0.1]))
        assert eer == 0.0

    def test_one_third(self):
        eer, th = compute_eer(ScoreSet([0.9, 0.8, 0.4], [0.5, 0.2, 0.1]))
        assert eer == pytest.approx(100 / 3, abs=1e-9)
        assert 0.4 < th <= 0.5

    def test_total_overlap(self):
        eer, _ = compute_eer(ScoreSet([0.5, 0.5], [0.5, 0.5]))
        assert eer == 50.0

    def test_interpolated_crossing(self):
        # FAR-FRR jumps from +1/2 to -1/2 across one threshold
        assert compute_eer(ScoreSet([0.6, 0.2], [0.4, 0.1]))[0] == pytest.approx(50.0)
        assert compute_eer(ScoreSet([0.6, 0.2], [0.4, 0.1]))[0] == brute_force_eer([0.6, 0.2], [0.4, 0.1])

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_eer(ScoreSet([], [0.1]))
        with pytest.raises(ValueError):
            compute_eer(ScoreSet([0.1], []))

    def test_random_sets_match_oracle(self):
        rng = np.random.default_rng(123)
        for n in range(200):
            nt, ni = rng.integers(1, 51, 2)
            if n % 3 == 0:
                # coarse grid forces ties within and across lists
                t, i = rng.integers(0, 8, nt) / 8.0, rng.integers(0, 8, ni) / 8.0
            else:
                t, i = rng.normal(0.5, 0.3, nt), rng.normal(0.0, 0.3, ni)
            assert compute_eer(ScoreSet(t, i))[0] == brute_force_eer(t, i), n

    @settings(max_examples=100, deadline=None)
    @given(
        t=st.lists(st.integers(-50, 50), min_size=1, max_size=30),
        i=st.lists(st.integers(-50, 50), min_size=1, max_size=30),
    )
    def test_monotone_transform(self, t, i):
        t, i = np.array(t) / 50.0, np.array(i) / 50.0
        base = compute_eer(ScoreSet(t, i))[0]
        for f in (lambda x: np.exp(3 * x), lambda x: x ** 3 + 2 * x, np.arctan):
            assert compute_eer(ScoreSet(f(t), f(i)))[0] == base

    @settings(max_examples=100, deadline=None)
    @given(
        t=st.lists(st.integers(-50, 50), min_size=1, max_size=30),
        i=st.lists(st.integers(-50, 50), min_size=1, max_size=30),
    )
    def test_mirror_swap(self, t, i):
        t, i = np.array(t) / 64.0, np.array(i) / 64.0
        m = 0.25
        swapped = ScoreSet(2 * m - i, 2 * m - t)
        assert compute_eer(swapped)[0] == compute_eer(ScoreSet(t, i))[0]

    @settings(max_examples=100, deadline=None)
    @given(
        t=st.lists(st.floats(-1, 1), min_size=1, max_size=30),
        i=st.lists(st.floats(-1, 1), min_size=1, max_size=30),
    )
    def test_bounded(self, t, i):
        eer, _ = compute_eer(ScoreSet(t, i))
        assert 0.0 <= eer <= 100.0

    def test_higher_target_mean_does_not_bound_eer(self):
        # the mean alone does not control ranking: 4/7 here, worked by hand
        eer, _ = compute_eer(ScoreSet([0.0, 0.0, 1.0], [0.0, 0.5]))
        assert eer == pytest.approx(400 / 7)

    @settings(max_examples=200, deadline=None)
    @given(pairs=st.lists(st.tuples(st.integers(-40, 40), st.integers(0, 40)), min_size=1, max_size=30))
    def test_dominating_targets_at_most_half(self, pairs):
        # each target is an impostor shifted up, so P(T >= th) >= P(I >= th) everywhere
        i = np.array([a for a, _ in pairs]) / 40.0
        t = i + np.array([d for _, d in pairs]) / 40.0
        assert compute_eer(ScoreSet(t, i))[0] <= 50.0


@pytest.fixture
def tiny_system(tiny_config):
    model = M.build(tiny_config, seed=0)
    model.forward_embedding(np.random.default_rng(0).standard_normal((6, 81)))
    return System("sa", model, segment_length=27)


def _waves(n=6, length=81, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(length + i) for i in range(n)]


class TestScoring:
    def test_identical_audio_scores_one(self, tiny_system):
        w = _waves(1)[0]
        scores = score_trials(tiny_system, [w, w.copy()], TrialSet([Trial(0, 1, True)]), 81, 81)
        assert scores.scores[0] == pytest.approx(1.0, abs=1e-9)

    def test_range_and_symmetry(self, tiny_system):
        waves = _waves()
        trials = build_trials([0, 0, 1, 1, 2, 2])
        fwd = score_trials(tiny_system, waves, trials, 81, 81)
        rev = score_trials(tiny_system, waves, TrialSet([Trial(t.test, t.enrol, t.is_target) for t in trials.trials]),
                           81, 81)
        assert np.all(np.abs(fwd.scores) <= 1.0)
        np.testing.assert_allclose(fwd.scores, rev.scores, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("duration,expected", [(81, 4), (60, 3), (40, 2), (20, 1)])
    def test_segment_count_per_condition(self, tiny_system, duration, expected, monkeypatch):
        rows = []
        original = tiny_system.model.forward_embedding
        monkeypatch.setattr(tiny_system.model, "forward_embedding", lambda x: rows.append(len(x)) or original(x))
        embed_utterances(tiny_system, _waves(3), duration)
        # hop 27 - round(2.7) = 24; K = ceil((F - C) / hop) + 1 or 1 when F <= C
        k = 1 if duration <= 27 else math.ceil((duration - 27) / 24) + 1
        assert k == expected
        assert sum(rows) == 3 * expected

    def test_desk_quarter_condition_single_segment(self):
        from segagg.segmentation import SegmentSpec, segment_count
        assert segment_count(6561 // 4, SegmentSpec(2187, 0.1)) == 1
        assert segment_count(6561 // 2, SegmentSpec(2187, 0.1)) == 2

    def test_baseline_embeds_whole_padded_crop(self, tiny_config):
        model = M.build(tiny_config, seed=0)
        model.forward_embedding(np.random.default_rng(0).standard_normal((4, 81)))
        system = System("baseline", model)
        w = _waves(1)[0]
        got = embed_utterances(system, [w], 40)
        model.eval()
        from segagg.training import pre_emphasize
        padded = np.concatenate([pre_emphasize(w[:40]), np.zeros(41)])
        np.testing.assert_allclose(got[0], model.forward_embedding(padded[None]).data[0], atol=1e-15)

    def test_enrol_side_uses_full_crop(self, tiny_system):
        waves = _waves(4)
        trials = build_trials([0, 0, 1, 1])
        s = score_trials(tiny_system, waves, trials, 81, 20)
        enrol = embed_utterances(tiny_system, waves, 81)
        test = embed_utterances(tiny_system, waves, 20)
        np.testing.assert_allclose(s.scores, cosine_scores(enrol, test, trials), atol=1e-15)

    def test_zero_embedding_names_trial(self):
        with pytest.raises(ValueError, match="trial 1"):
            cosine_scores(np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones((2, 2)),
                          TrialSet([Trial(0, 1, False), Trial(1, 0, False)]))


def _report(systems, conditions, seed=0):
    rng = np.random.default_rng(seed)
    cells = {(s, c): EvalCell(float(rng.uniform(0, 50)), 0.0, 1, 1) for s in systems for c in conditions}
    return EvalReport(list(systems), list(conditions), cells)


class TestReport:
    def test_single_cell_two_lines(self, tmp_path):
        path = emit_report(_report(["baseline"], [6561]), tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert lines[0] == "system,d6561"

    def test_four_decimal_round_trip(self):
        report = _report(["baseline", "sa", "sa_ts"], [6561, 4920, 3280, 1640], seed=4)
        text = format_grid(report)
        parsed = parse_grid(text)
        for (s, c), cell in report.cells.items():
            assert f"{parsed[s][c]:.4f}" == f"{cell.eer:.4f}"
        assert format_grid(EvalReport(report.systems, report.conditions, {
            (s, c): EvalCell(parsed[s][c], 0.0, 1, 1) for s, c in report.cells
        })) == text

    def test_comparison_grid_shape(self):
        # eight systems (baseline plus seven SA variants) against four durations
        systems = ["baseline"] + [f"sys{i}" for i in range(3, 10)]
        rows = format_grid(_report(systems, [6561, 4920, 3280, 1640])).splitlines()
        assert len(rows) == 1 + 8
        assert all(len(r.split(",")) == 1 + 4 for r in rows)
        assert [r.split(",")[0] for r in rows[1:]] == systems

    def test_empty_report(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report(EvalReport([], [], {}), tmp_path / "r.csv")

    def test_score_dump(self, tmp_path):
        scores = ScoreSet.from_trials([0.25, -0.1, 0.3333333333333333], [1, 0, 1])
        emit_report(_report(["sa"], [20]), tmp_path / "r.csv", {("sa", 20): scores})
        lines = (tmp_path / "scores_sa_d20.txt").read_text().splitlines()
        assert lines[0] == "1 0.25"
        assert float(lines[2].split()[1]) == 0.3333333333333333

    def test_evaluate_systems_grid(self, tiny_system, tmp_path):
        waves = _waves()
        trials = build_trials([0, 0, 1, 1, 2, 2])
        report, dumps = evaluate_systems([tiny_system], waves, trials, [81, 20], 81)
        assert report.systems == ["sa"] and report.conditions == [81, 20]
        for cond in (81, 20):
            cell = report.cells[("sa", cond)]
            assert (cell.num_target, cell.num_impostor) == (3, 12)
            assert cell.eer == compute_eer(dumps[("sa", cond)])[0]
