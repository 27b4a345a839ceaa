"""Verification scoring (cosine trials, EER) and pseudo-label accuracy audits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pseudo_label import METRIC_KINDS, label_with_metric


@dataclass
class TrialSet:
    index_a: np.ndarray
    index_b: np.ndarray
    same: np.ndarray

    def __len__(self):
        return len(self.same)


@dataclass
class ScoredTrials:
    scores: np.ndarray
    same: np.ndarray

    def __len__(self):
        return len(self.scores)


def score_trials(embeddings, trials: TrialSet) -> ScoredTrials:
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms[trials.index_a] == 0) or np.any(norms[trials.index_b] == 0):
        raise ValueError("zero-norm embedding in trials")
    U = E / np.where(norms == 0, 1.0, norms)[:, None]
    scores = np.einsum("ij,ij->i", U[trials.index_a], U[trials.index_b])
    return ScoredTrials(np.clip(scores, -1.0, 1.0), np.asarray(trials.same, bool))


def compute_eer(scored: ScoredTrials):
    """Equal error rate by threshold sweep with linear interpolation.

    At threshold t: FAR = share of different-speaker scores >= t, FRR = share of
    same-speaker scores < t. Thresholds are the sorted unique scores plus +inf.
    The EER is read where FAR - FRR changes sign, interpolating linearly between
    the two operating points that straddle it. Returns ``(eer, threshold)``.
    """
    s = np.asarray(scored.scores, dtype=np.float64)
    y = np.asarray(scored.same, bool)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    tgt, non = np.sort(s[y]), np.sort(s[~y])
    if tgt.size == 0 or non.size == 0:
        raise ValueError("EER needs both same- and different-speaker trials")
    thresholds = np.append(np.unique(s), np.inf)
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    d = far - frr
    k = int(np.argmax(d <= 0))
    if d[k] == 0 or k == 0:
        return float(far[k]), float(thresholds[k])
    w = d[k - 1] / (d[k - 1] - d[k])
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    t_hi = thresholds[k] if np.isfinite(thresholds[k]) else thresholds[k - 1]
    return float(eer), float(thresholds[k - 1] + w * (t_hi - thresholds[k - 1]))


def topk_accuracy(scores, labels, k: int) -> float:
    """Share of rows whose true label is among the k highest scores (ties: lower index first)."""
    S = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not 1 <= k <= S.shape[1]:
        raise ValueError(f"k must lie in [1, {S.shape[1]}]")
    if len(labels) == 0:
        return float("nan")
    top = np.argsort(-S, axis=1, kind="stable")[:, :k]
    return float(np.mean((top == labels[:, None]).any(axis=1)))


def metric_audit(params, inputs, labels, lam=0.1, batch_size=64, seed=0, topk=(1, 5),
                 kinds=METRIC_KINDS):
    """Top-k pseudo-label accuracy per labelling metric, on full batches and selected samples.

    Labels are used for scoring only. Samples are shuffled with ``seed`` and
    labelled in batches of ``batch_size``, as during adaptation. Returns a list of
    row dicts, one per metric.
    """
    from .model import forward

    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels)
    order = np.random.default_rng(seed).permutation(len(X))
    fw = forward(params, X)
    per_kind = {kind: ([], [], []) for kind in kinds}
    for start in range(0, len(X), batch_size):
        idx = order[start:start + batch_size]
        sub = type(fw)(fw.logits[idx], fw.embeddings[idx], fw.features[idx], None, fw.cos[idx],
                       fw.logit_scale)
        for kind in kinds:
            batch = label_with_metric(sub, params.prototypes, kind, lam)
            scores, sel, truth = per_kind[kind]
            scores.append(batch.scores)
            sel.append(batch.selected)
            truth.append(y[idx])
    rows = []
    for kind in kinds:
        scores, sel, truth = (np.concatenate(v) for v in per_kind[kind])
        row = {"metric": kind}
        for k in topk:
            row[f"top{k}_full"] = topk_accuracy(scores, truth, k)
            row[f"top{k}_selected"] = topk_accuracy(scores[sel], truth[sel], k)
        row["selected_fraction"] = float(sel.mean())
        rows.append(row)
    return rows


def write_trials(trials: TrialSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index_a", "index_b", "label"])
        for a, b, s in zip(trials.index_a.tolist(), trials.index_b.tolist(), trials.same.tolist()):
            w.writerow([a, b, int(s)])


def read_trials(path) -> TrialSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return TrialSet(np.array([int(r["index_a"]) for r in rows], dtype=np.intp),
                    np.array([int(r["index_b"]) for r in rows], dtype=np.intp),
                    np.array([r["label"] == "1" for r in rows], dtype=bool))


def write_scores(scored: ScoredTrials, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["score", "label"])
        for s, y in zip(scored.scores.tolist(), scored.same.tolist()):
            w.writerow([format(s, ".17g"), int(y)])


def read_scores(path) -> ScoredTrials:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ScoredTrials(np.array([float(r["score"]) for r in rows]),
                        np.array([r["label"] == "1" for r in rows], dtype=bool))


def write_audit(rows, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (format(v, ".6f") if isinstance(v, float) else v) for k, v in r.items()})
