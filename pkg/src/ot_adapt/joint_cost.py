"""Joint partial transport cost between a labelled source batch and a target batch.

The raw joint cost adds a label term (cross-entropy of the source label under
the target prediction) to weighted embedding and feature distances. A shifted,
scaled sigmoid then squashes it into (0, 1): pairs that are already far apart
saturate, carry almost no gradient, and so are effectively left out of the
alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .ot_core import CostMatrix, TransportPlan, sinkhorn, transport_cost

BATCH_MEAN = "batch-mean"
_TINY = np.finfo(np.float64).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass
class BatchForward:
    """Model outputs for one batch: logits y, embeddings e = h(x), features."""

    logits: np.ndarray
    embeddings: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    cos: np.ndarray | None = None
    logit_scale: float = 1.0

    def __post_init__(self):
        n = self.logits.shape[0]
        if self.embeddings.shape[0] != n or self.features.shape[0] != n:
            raise ValueError("logits, embeddings and features disagree on batch size")
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length does not match batch size")

    def __len__(self):
        return self.logits.shape[0]


@dataclass(frozen=True)
class JointCostConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    scale_s: float = 1.0
    bias_b: float | str = BATCH_MEAN
    # differentiate through the batch-mean bias; off treats b as a per-batch constant
    bias_grad: bool = True

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("alpha weights must be nonnegative")
        if not self.scale_s > 0:
            raise ValueError("scale_s must be positive")
        if isinstance(self.bias_b, str) and self.bias_b != BATCH_MEAN:
            raise ValueError(f"bias_b must be a number or {BATCH_MEAN!r}")


def label_cost(source_labels, target_logits) -> CostMatrix:
    """Entry (i, j) = -log softmax(target_logits[j])[source_labels[i]]."""
    y = np.asarray(source_labels)
    Z = np.asarray(target_logits, dtype=np.float64)
    K = Z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"source labels must lie in [0, {K})")
    return CostMatrix(np.maximum(-log_softmax(Z, axis=1)[:, y].T, 0.0))


def pairwise_sq_euclidean(A, B) -> CostMatrix:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"inner dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    D = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return CostMatrix(np.maximum(D, 0.0))


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot length-normalise a zero vector")
    return X / norms, norms


def _zero_grads(fw: BatchForward):
    if fw.cos is None:
        raise ValueError("gradients need the cosine matrix on the forward")
    return [np.zeros_like(fw.cos), np.zeros_like(fw.embeddings), np.zeros_like(fw.features)]


def _check_pair(source: BatchForward, target: BatchForward):
    if source.labels is None:
        raise ValueError("source batch needs labels for the joint cost")
    for fw in (source, target):
        for arr in (fw.logits, fw.embeddings, fw.features):
            if not np.all(np.isfinite(arr)):
                raise ValueError("forward outputs must be finite")


def raw_joint_cost(source: BatchForward, target: BatchForward, cfg: JointCostConfig) -> np.ndarray:
    """Un-squashed joint cost: label term + alpha1 * embedding + alpha2 * feature distance."""
    _check_pair(source, target)
    raw = label_cost(source.labels, target.logits).values.copy()
    if cfg.alpha1:
        es, _ = _unit_rows(source.embeddings)
        et, _ = _unit_rows(target.embeddings)
        raw += cfg.alpha1 * pairwise_sq_euclidean(es, et).values
    if cfg.alpha2:
        hs, _ = _unit_rows(source.features)
        ht, _ = _unit_rows(target.features)
        raw += cfg.alpha2 * pairwise_sq_euclidean(hs, ht).values
    return raw


def _bias(raw, cfg):
    return float(raw.mean()) if cfg.bias_b == BATCH_MEAN else float(cfg.bias_b)


def squash(raw, cfg: JointCostConfig) -> np.ndarray:
    # expit rounds to exactly 0 or 1 far from the bias; keep entries inside the open interval
    return np.clip(expit(cfg.scale_s * (raw - _bias(raw, cfg))), _TINY, _BELOW_ONE)


def joint_partial_cost(source: BatchForward, target: BatchForward, cfg: JointCostConfig) -> CostMatrix:
    return CostMatrix(squash(raw_joint_cost(source, target, cfg), cfg))


def alignment_loss(source: BatchForward, target: BatchForward, cfg: JointCostConfig,
                   lam: float = 0.1):
    """<C', P> with P the entropic plan of C' under uniform marginals.

    Returns ``(loss, plan)``.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("alignment needs non-empty batches")
    cost = joint_partial_cost(source, target, cfg)
    plan = sinkhorn(cost, lam=lam)
    return transport_cost(plan, cost), plan


def alignment_loss_grads(source: BatchForward, target: BatchForward, cfg: JointCostConfig,
                         plan: TransportPlan | np.ndarray):
    """Loss and output gradients of <C', P> with the plan held fixed.

    The batch-mean bias is differentiated through unless ``cfg.bias_grad`` is off. Returns
    ``(loss, (d_cos_s, d_emb_s, d_feat_s), (d_cos_t, d_emb_t, d_feat_t))``
    where ``d_cos`` is the gradient with respect to the cosine matrix behind the
    logits (logits = logit_scale * cos).
    """
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan)
    raw = raw_joint_cost(source, target, cfg)
    Cp = squash(raw, cfg)
    loss = float(np.sum(Cp * P))

    W = cfg.scale_s * Cp * (1.0 - Cp) * P
    if cfg.bias_b == BATCH_MEAN and cfg.bias_grad:
        W = W - W.sum() / W.size

    gs, gt = _zero_grads(source), _zero_grads(target)

    # label term: raw_ij = lse(z_j) - z_j[y_i]
    Zt = target.logits
    probs = softmax(Zt, axis=1)
    onehot_sum = np.zeros_like(Zt)
    np.add.at(onehot_sum.T, source.labels, W)
    d_logits_t = W.sum(axis=0)[:, None] * probs - onehot_sum
    gt[0] += d_logits_t * target.logit_scale

    for weight, attr, slot in ((cfg.alpha1, "embeddings", 1), (cfg.alpha2, "features", 2)):
        if not weight:
            continue
        us, ns = _unit_rows(getattr(source, attr))
        ut, nt = _unit_rows(getattr(target, attr))
        # d/du_s ||u_s - u_t||^2 = 2 (u_s - u_t)
        d_us = 2.0 * weight * (W.sum(axis=1)[:, None] * us - W @ ut)
        d_ut = 2.0 * weight * (W.sum(axis=0)[:, None] * ut - W.T @ us)
        gs[slot] += (d_us - us * (d_us * us).sum(1, keepdims=True)) / ns
        gt[slot] += (d_ut - ut * (d_ut * ut).sum(1, keepdims=True)) / nt
    return loss, tuple(gs), tuple(gt)

