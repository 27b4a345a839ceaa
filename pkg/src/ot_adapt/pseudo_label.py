"""Pseudo labels from a regularised transport plan between samples and class prototypes.

Each target sample's pseudo label is the column holding the largest plan entry
in its row. Samples whose row maximum falls below the batch mean of row maxima
are dropped before the temperature cross-entropy is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy.special import log_softmax, softmax

from .joint_cost import BatchForward
from .ot_core import DEFAULT_TOL, CostMatrix, TransportPlan, exact_plan, sinkhorn

METRIC_KINDS = ("logits", "ot", "rot", "prot")


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    plan_row_max: np.ndarray
    selected: np.ndarray | None = None
    metric_kind: str = "prot"
    # row scores the labels were read from (plan rows or logits); used for top-k audits
    scores: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def prototype_cost(embeddings, prototypes) -> CostMatrix:
    """1 - cos(e_i, p_k); prototypes are assumed unit norm."""
    E = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    cos = (E / norms) @ np.asarray(prototypes).T
    return CostMatrix(np.clip(1.0 - cos, 0.0, 2.0), row_domain="target", col_domain="prototype")


def pseudo_plan(cost, lam: float, tol: float = DEFAULT_TOL) -> TransportPlan:
    """Plan between uniform sample mass and uniform class mass.

    ``lam == 0`` gives the exact unregularised plan.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0:
        return exact_plan(cost)
    return sinkhorn(cost, lam=lam, tol=tol)


def assign_labels(plan, metric_kind: str = "prot") -> PseudoLabelBatch:
    """Row-wise argmax of the plan; ties go to the lowest class index."""
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if P.size == 0:
        raise ValueError("empty plan")
    labels = np.argmax(P, axis=1)
    return PseudoLabelBatch(labels=labels, plan_row_max=P[np.arange(len(P)), labels],
                            metric_kind=metric_kind, scores=P)


def select_confident(batch: PseudoLabelBatch, B: int | None = None) -> PseudoLabelBatch:
    """Keep samples whose row maximum reaches the batch mean of row maxima."""
    m = np.asarray(batch.plan_row_max, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty batch")
    if B is not None and B != m.size:
        raise ValueError(f"B={B} does not match batch of {m.size} rows")
    # exact rational comparison n * m_i >= sum(m): no rounding at the threshold
    total = sum(map(Fraction, m.tolist()))
    selected = np.array([m.size * Fraction(v) >= total for v in m.tolist()], dtype=bool)
    return replace(batch, selected=selected)


def pseudo_ce_loss_grad(cos, batch: PseudoLabelBatch, tau: float = 0.1):
    """Temperature cross-entropy over selected samples and its gradient w.r.t. cos."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    sel = np.ones(len(batch), bool) if batch.selected is None else np.asarray(batch.selected, bool)
    count = int(sel.sum())
    if count == 0:
        raise ValueError("no selected samples")
    rows = np.arange(len(batch))
    z = np.asarray(cos) / tau
    nll = -log_softmax(z, axis=1)[rows, batch.labels]
    loss = float(nll[sel].sum() / count)
    d = softmax(z, axis=1)
    d[rows, batch.labels] -= 1.0
    d *= sel[:, None] / (count * tau)
    return loss, d


def pseudo_ce_loss(embeddings, prototypes, batch: PseudoLabelBatch, tau: float = 0.1) -> float:
    E = np.asarray(embeddings, dtype=np.float64)
    cos = (E / np.linalg.norm(E, axis=1, keepdims=True)) @ np.asarray(prototypes).T
    return pseudo_ce_loss_grad(cos, batch, tau)[0]


def label_with_metric(target: BatchForward, prototypes, kind: str, lam: float = 0.1) -> PseudoLabelBatch:
    """Pseudo labels under one of the four labelling metrics.

    logits: classifier argmax, all kept. ot: exact plan, all kept. rot:
    entropic plan, all kept. prot: entropic plan plus confidence selection.
    """
    if kind not in METRIC_KINDS:
        raise ValueError(f"unknown metric kind {kind!r}; expected one of {METRIC_KINDS}")
    n = len(target)
    if kind == "logits":
        scores = target.logits
        labels = np.argmax(scores, axis=1)
        return PseudoLabelBatch(labels, scores[np.arange(n), labels], np.ones(n, bool), kind, scores)
    cost = prototype_cost(target.embeddings, prototypes)
    plan = pseudo_plan(cost, 0.0 if kind == "ot" else lam)
    batch = assign_labels(plan, kind)
    if kind == "prot":
        return select_confident(batch)
    return replace(batch, selected=np.ones(n, bool))
