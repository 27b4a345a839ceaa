import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ot_adapt.evaluate import (ScoredTrials, TrialSet, compute_eer, metric_audit, read_scores, read_trials,
                               score_trials, topk_accuracy, write_audit, write_scores, write_trials)
from ot_adapt.model import init_params


def exhaustive_eer(scores, same):
    """Loop oracle: every threshold, then interpolate across the FAR/FRR crossing."""
    scores = [float(s) for s in scores]
    tgt = [s for s, y in zip(scores, same) if y]
    non = [s for s, y in zip(scores, same) if not y]
    points = []
    for t in sorted(set(scores)) + [math.inf]:
        far = sum(1 for s in non if s >= t) / len(non)
        frr = sum(1 for s in tgt if s < t) / len(tgt)
        points.append((far, frr))
    for (f0, r0), (f1, r1) in zip([(None, None)] + points, points):
        if f1 - r1 <= 0:
            if f0 is None or f1 == r1:
                return f1
            w = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + w * (f1 - f0)
    raise AssertionError("FAR - FRR never reaches zero")


def scored(same_scores, diff_scores):
    s = np.array([*same_scores, *diff_scores], dtype=np.float64)
    return ScoredTrials(s, np.array([True] * len(same_scores) + [False] * len(diff_scores)))


# -- scoring ------------------------------------------------------------------------------

def test_score_trials_examples():
    E = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])
    trials = TrialSet(np.array([0, 0, 0]), np.array([1, 2, 3]), np.array([True, False, False]))
    assert list(score_trials(E, trials).scores) == [1.0, 0.0, -1.0]


def test_score_trials_matches_loop_and_is_symmetric():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(10, 4))
    a, b = rng.integers(0, 10, 30), rng.integers(0, 10, 30)
    trials = TrialSet(a, b, rng.random(30) < 0.5)
    expected = [float(E[i] @ E[j] / (np.linalg.norm(E[i]) * np.linalg.norm(E[j]))) for i, j in zip(a, b)]
    assert np.allclose(score_trials(E, trials).scores, expected, atol=1e-14)
    swapped = score_trials(E, TrialSet(b, a, trials.same)).scores
    assert np.allclose(swapped, expected, atol=1e-14)


def test_score_trials_zero_embedding():
    E = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        score_trials(E, TrialSet(np.array([0]), np.array([1]), np.array([True])))


# -- EER ----------------------------------------------------------------------------------

def test_eer_perfect_separation_is_zero():
    assert compute_eer(scored([0.9, 0.8, 0.7], [0.1, 0.2]))[0] == 0.0


def test_eer_one_error_per_class():
    # two trials per class, one misordered on each side: both rates are 1/2 at the crossing
    result = compute_eer(scored([0.9, 0.4], [0.6, 0.1]))[0]
    assert result == exhaustive_eer([0.9, 0.4, 0.6, 0.1], [True, True, False, False])
    assert result == 0.5


def test_eer_one_error_in_four_per_class():
    assert compute_eer(scored([0.9, 0.8, 0.7, 0.3], [0.5, 0.2, 0.1, 0.0]))[0] == pytest.approx(0.25)


def test_eer_random_scores_near_half():
    rng = np.random.default_rng(1)
    eer, _ = compute_eer(ScoredTrials(rng.random(4000), rng.random(4000) < 0.5))
    assert abs(eer - 0.5) <= 0.03


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.booleans()), min_size=2, max_size=50))
def test_eer_matches_exhaustive_oracle(trials):
    s = [v / 10 for v, _ in trials]
    y = [b for _, b in trials]
    if all(y) or not any(y):
        with pytest.raises(ValueError):
            compute_eer(ScoredTrials(np.array(s), np.array(y)))
        return
    eer, _ = compute_eer(ScoredTrials(np.array(s), np.array(y)))
    assert eer == pytest.approx(exhaustive_eer(s, y), abs=1e-12)
    assert 0.0 <= eer <= 1.0


@pytest.mark.parametrize("transform", [lambda s: 3 * s - 1, np.tanh, lambda s: np.exp(2 * s), lambda s: s ** 3])
def test_eer_invariant_under_monotone_transform(transform):
    rng = np.random.default_rng(2)
    y = rng.random(300) < 0.4
    s = rng.normal(size=300) + 0.8 * y
    assert compute_eer(ScoredTrials(transform(s), y))[0] == pytest.approx(compute_eer(ScoredTrials(s, y))[0],
                                                                          abs=1e-12)


def test_eer_threshold_lies_between_classes():
    eer, t = compute_eer(scored([0.9, 0.8], [0.1, 0.2]))
    assert eer == 0.0 and 0.2 < t <= 0.8


def test_eer_errors():
    with pytest.raises(ValueError):
        compute_eer(scored([0.1, 0.2], []))
    with pytest.raises(ValueError):
        compute_eer(ScoredTrials(np.array([np.nan, 0.1]), np.array([True, False])))


# -- top-k --------------------------------------------------------------------------------

def test_topk_examples():
    S = np.random.default_rng(3).random((20, 6))
    y = np.random.default_rng(4).integers(0, 6, 20)
    assert topk_accuracy(S, y, 6) == 1.0
    assert topk_accuracy(S, np.argmax(S, 1), 1) == 1.0
    with pytest.raises(ValueError):
        topk_accuracy(S, y, 7)
    with pytest.raises(ValueError):
        topk_accuracy(S, y, 0)


def test_topk_matches_loop_and_is_monotone():
    rng = np.random.default_rng(5)
    S, y = rng.random((30, 8)), rng.integers(0, 8, 30)
    accs = []
    for k in range(1, 9):
        hits = sum(1 for row, lab in zip(S, y) if sorted(range(8), key=lambda c: -row[c])[:k].count(lab))
        accs.append(topk_accuracy(S, y, k))
        assert accs[-1] == hits / 30
    assert accs == sorted(accs)


def test_topk_ties_prefer_lower_index():
    assert topk_accuracy(np.array([[0.5, 0.5, 0.1]]), np.array([0]), 1) == 1.0
    assert topk_accuracy(np.array([[0.5, 0.5, 0.1]]), np.array([1]), 1) == 0.0


# -- audit and files ----------------------------------------------------------------------

def test_metric_audit_table_shape(tmp_path):
    params = init_params(input_dim=6, hidden=(8,), embed_dim=4, num_classes=5, seed=0)
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(40, 6)), rng.integers(0, 5, 40)
    rows = metric_audit(params, X, y, lam=0.05, batch_size=16, seed=1)
    assert [r["metric"] for r in rows] == ["logits", "ot", "rot", "prot"]
    for r in rows:
        assert 0 <= r["top1_full"] <= r["top5_full"] == 1.0
        assert 0 < r["selected_fraction"] <= 1
    assert rows[0]["selected_fraction"] == rows[1]["selected_fraction"] == rows[2]["selected_fraction"] == 1.0
    assert rows[2]["top1_full"] == rows[3]["top1_full"]
    write_audit(rows, tmp_path / "audit.csv")
    assert (tmp_path / "audit.csv").read_text().splitlines()[0].startswith("metric,top1_full")


def test_trial_and_score_files_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    trials = TrialSet(rng.integers(0, 9, 12), rng.integers(0, 9, 12), rng.random(12) < 0.5)
    write_trials(trials, tmp_path / "trials.csv")
    back = read_trials(tmp_path / "trials.csv")
    for name in ("index_a", "index_b", "same"):
        assert np.array_equal(getattr(back, name), getattr(trials, name))
    s = ScoredTrials(rng.uniform(-1, 1, 12), trials.same)
    write_scores(s, tmp_path / "scores.csv")
    again = read_scores(tmp_path / "scores.csv")
    assert np.array_equal(again.scores, s.scores) and np.array_equal(again.same, s.same)
