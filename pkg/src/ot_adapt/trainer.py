"""Source pretraining and joint partial OT + pseudo-label adaptation.

Each adaptation step draws a labelled source batch and an unlabelled target
batch of equal size and minimises

    L_ce(source) + eta * L_ot(source, target) + beta * L_pl(target)

where L_ce is the angular margin loss, L_ot the transport cost under the joint
partial cost (plan held fixed for the gradient) and L_pl the temperature
cross-entropy on confidently pseudo-labelled target samples.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluate import TrialSet, compute_eer, metric_audit, score_trials
from .joint_cost import JointCostConfig, alignment_loss_grads, joint_partial_cost
from .model import (SGD, MarginConfig, ModelParams, aam_loss_grad, backward,
                    forward, forward_cached, init_params)
from .ot_core import sinkhorn, transport_cost
from .pseudo_label import assign_labels, prototype_cost, pseudo_ce_loss_grad, pseudo_plan, select_confident
from .synth import Dataset

BASELINES = ("none", "coral", "mmd")


@dataclass(frozen=True)
class AdaptConfig:
    eta: float = 1.0
    beta: float = 0.1
    lambda_align: float = 0.1
    lambda_pl: float = 0.05
    joint: JointCostConfig = field(default_factory=JointCostConfig)
    tau: float = 0.1
    batch_size: int = 64
    epochs: int = 20
    pretrain_epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    baseline: str = "none"
    margin_scale: float = 30.0
    margin: float = 0.2
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 16

    def __post_init__(self):
        if self.eta < 0 or self.beta < 0:
            raise ValueError("eta and beta must be nonnegative")
        if self.lambda_align <= 0 or self.lambda_pl < 0:
            raise ValueError("lambda_align must be positive and lambda_pl nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.tau <= 0 or self.lr <= 0:
            raise ValueError("tau and lr must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")

    @property
    def margin_cfg(self) -> MarginConfig:
        return MarginConfig(self.margin_scale, self.margin)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        d = dict(d)
        if "joint" in d and isinstance(d["joint"], dict):
            d["joint"] = JointCostConfig(**d["joint"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class EvalSuite:
    """Held-out data for per-epoch metrics; target_adapt labels are read for audits only."""

    source_test: Dataset
    target_test: Dataset
    source_trials: TrialSet
    target_trials: TrialSet
    target_adapt: Dataset | None = None


EPOCH_FIELDS = ("epoch", "L_ce", "L_ot", "L_pl", "total", "selected_fraction", "pl_skipped_steps",
                "source_eer", "target_eer", "pl_top1", "pl_top5", "pl_top1_selected", "pl_top5_selected")


@dataclass
class RunReport:
    config: dict
    initial: dict = field(default_factory=dict)
    epochs: list[dict] = field(default_factory=list)
    steps: list[tuple[float, float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# columns: " + ",".join(EPOCH_FIELDS) + "\n")
        buf.write("# epoch 0 holds the pre-adaptation metrics; losses there are blank\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EPOCH_FIELDS)
        for row in [{"epoch": 0, **self.initial}, *self.epochs]:
            w.writerow([_fmt(row.get(k)) for k in EPOCH_FIELDS])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"config": self.config, "initial": self.initial,
                "final": self.epochs[-1] if self.epochs else self.initial}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


# -- baselines -----------------------------------------------------------------------------

def coral_loss_grad(Es, Et):
    """||cov(Es) - cov(Et)||_F^2 / (4 d^2) and its gradients w.r.t. Es and Et."""
    Es, Et = np.asarray(Es, float), np.asarray(Et, float)
    n, m, d = len(Es), len(Et), Es.shape[1]
    if n < 2 or m < 2:
        raise ValueError("CORAL needs at least two samples per batch")
    Xs, Xt = Es - Es.mean(0), Et - Et.mean(0)
    diff = Xs.T @ Xs / (n - 1) - Xt.T @ Xt / (m - 1)
    loss = float(np.sum(diff * diff) / (4 * d * d))
    G = diff / (2 * d * d)
    return loss, 2 * Xs @ G / (n - 1), -2 * Xt @ G / (m - 1)


def _sqdist(A, B):
    return np.maximum((A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T, 0.0)


def mmd_loss_grad(Es, Et):
    """Unbiased RBF MMD^2 with the median heuristic bandwidth (held fixed for gradients).

    For equal batch sizes the paired U-statistic is used, which also drops the
    i == j cross terms, so identical batches score exactly zero.
    """
    X, Y = np.asarray(Es, float), np.asarray(Et, float)
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise ValueError("MMD needs at least two samples per batch")
    Z = np.vstack([X, Y])
    Dz = _sqdist(Z, Z)
    h = float(np.median(Dz[np.triu_indices(len(Z), 1)]))
    h = h if h > 0 else 1.0
    Kxx = np.exp(-_sqdist(X, X) / h)
    Kyy = np.exp(-_sqdist(Y, Y) / h)
    Kxy = np.exp(-_sqdist(X, Y) / h)
    np.fill_diagonal(Kxx, 0.0)
    np.fill_diagonal(Kyy, 0.0)
    cross = n * m
    if n == m:
        np.fill_diagonal(Kxy, 0.0)
        cross = n * (n - 1)
    loss = float(Kxx.sum() / (n * (n - 1)) + Kyy.sum() / (m * (m - 1)) - 2 * Kxy.sum() / cross)

    def pull(K, A, B):
        # sum_j K_ij * d/dA_i exp(-|A_i - B_j|^2 / h) / K_ij
        return -2.0 / h * (K.sum(1)[:, None] * A - K @ B)

    dX = 2 * pull(Kxx, X, X) / (n * (n - 1)) - 2 * pull(Kxy, X, Y) / cross
    dY = 2 * pull(Kyy, Y, Y) / (m * (m - 1)) - 2 * pull(Kxy.T, Y, X) / cross
    return loss, dX, dY


def baseline_loss(kind, source, target) -> float:
    """CORAL or MMD between the embeddings of two forwards."""
    fn = {"coral": coral_loss_grad, "mmd": mmd_loss_grad}.get(kind)
    if fn is None:
        raise ValueError(f"unknown baseline {kind!r}")
    return fn(source.embeddings, target.embeddings)[0]


# -- training ------------------------------------------------------------------------------

def _check_finite(value, what, report=None):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite", report)


def _epoch_batches(rng, n, B):
    order = rng.permutation(n)
    return [order[i:i + B] for i in range(0, n - B + 1, B)] or [order]


def source_step(params: ModelParams, opt: SGD, X, y, cfg: AdaptConfig):
    fw, cache = forward_cached(params, X, y)
    loss, d_cos = aam_loss_grad(fw, y, cfg.margin_cfg)
    _check_finite(loss, "source loss")
    return opt.step(params, backward(params, cache, d_cos=d_cos)), loss


def pretrain_source(cfg: AdaptConfig, source: Dataset, params: ModelParams | None = None) -> ModelParams:
    """Train encoder and prototypes on labelled source data with the margin loss only."""
    num_classes = int(source.speakers.max()) + 1
    if params is None:
        params = init_params(source.X.shape[1], cfg.hidden, cfg.embed_dim, num_classes,
                             seed=cfg.seed, logit_scale=cfg.margin_scale)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    opt = SGD(cfg.lr, cfg.momentum)
    for _ in range(cfg.pretrain_epochs):
        for idx in _epoch_batches(rng, len(source), cfg.batch_size):
            params, _ = source_step(params, opt, source.X[idx], source.speakers[idx], cfg)
    return params


def adapt_schedule(cfg: AdaptConfig, n_source: int, n_target: int):
    """Per-epoch lists of (source_idx, target_idx) batch pairs."""
    rng_t = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    rng_s = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    B = cfg.batch_size
    src_queue: list[np.ndarray] = []
    epochs = []
    for _ in range(cfg.epochs):
        pairs = []
        for t_idx in _epoch_batches(rng_t, n_target, B):
            if not src_queue:
                src_queue = _epoch_batches(rng_s, n_source, len(t_idx))
            pairs.append((src_queue.pop(0), t_idx))
        epochs.append(pairs)
    return epochs


def evaluate_eers(params: ModelParams, suite: EvalSuite):
    out = {}
    for name, ds, trials in (("source_eer", suite.source_test, suite.source_trials),
                             ("target_eer", suite.target_test, suite.target_trials)):
        out[name] = compute_eer(score_trials(forward(params, ds.X).embeddings, trials))[0]
    return out


def _evaluate(params, cfg, suite):
    if suite is None:
        return {}
    out = evaluate_eers(params, suite)
    if suite.target_adapt is not None:
        (row,) = metric_audit(params, suite.target_adapt.X, suite.target_adapt.speakers,
                              lam=cfg.lambda_pl, batch_size=cfg.batch_size, seed=cfg.seed, kinds=("prot",))
        out.update(pl_top1=row["top1_full"], pl_top5=row["top5_full"],
                   pl_top1_selected=row["top1_selected"], pl_top5_selected=row["top5_selected"])
    return out


def adapt_step(params: ModelParams, opt: SGD, xs, ys, xt, cfg: AdaptConfig):
    """One step of the unified objective. Returns (params, losses dict)."""
    fs, cache_s = forward_cached(params, xs, ys)
    ft, cache_t = forward_cached(params, xt)
    l_ce, d_cos_s = aam_loss_grad(fs, ys, cfg.margin_cfg)
    gs = [d_cos_s, np.zeros_like(fs.embeddings), np.zeros_like(fs.features)]
    gt = [np.zeros_like(ft.cos), np.zeros_like(ft.embeddings), np.zeros_like(ft.features)]

    if cfg.baseline == "none":
        cost = joint_partial_cost(fs, ft, cfg.joint)
        plan = sinkhorn(cost, lam=cfg.lambda_align)
        l_ot = transport_cost(plan, cost)
        if cfg.eta > 0:
            _, g_src, g_tgt = alignment_loss_grads(fs, ft, cfg.joint, plan)
            for acc, g in ((gs, g_src), (gt, g_tgt)):
                for k in range(3):
                    acc[k] += cfg.eta * g[k]
    else:
        fn = coral_loss_grad if cfg.baseline == "coral" else mmd_loss_grad
        l_ot, d_es, d_et = fn(fs.embeddings, ft.embeddings)
        if cfg.eta > 0:
            gs[1] += cfg.eta * d_es
            gt[1] += cfg.eta * d_et

    pl = select_confident(assign_labels(pseudo_plan(prototype_cost(ft.embeddings, params.prototypes),
                                                    cfg.lambda_pl)))
    skipped = not pl.selected.any()
    l_pl = 0.0
    if not skipped:
        l_pl, d_cos_pl = pseudo_ce_loss_grad(ft.cos, pl, cfg.tau)
        if cfg.beta > 0:
            gt[0] += cfg.beta * d_cos_pl

    total = l_ce + cfg.eta * l_ot + cfg.beta * l_pl
    _check_finite(total, "adaptation loss")
    grads = backward(params, cache_s, *gs)
    if cfg.eta > 0 or cfg.beta > 0:
        grads = grads + backward(params, cache_t, *gt)
    params = opt.step(params, grads)
    return params, {"L_ce": l_ce, "L_ot": l_ot, "L_pl": l_pl, "total": total,
                    "selected_fraction": float(pl.selected.mean()), "skipped": skipped}


def adapt(cfg: AdaptConfig, params: ModelParams, source: Dataset, target_adapt: Dataset,
          suite: EvalSuite | None = None):
    """Adapt pretrained parameters to the unlabelled target set. Returns (params, RunReport)."""
    report = RunReport(config=cfg.to_dict())
    report.initial = _evaluate(params, cfg, suite)
    opt = SGD(cfg.lr, cfg.momentum)
    for epoch, pairs in enumerate(adapt_schedule(cfg, len(source), len(target_adapt)), start=1):
        sums = {"L_ce": 0.0, "L_ot": 0.0, "L_pl": 0.0, "total": 0.0, "selected_fraction": 0.0}
        skipped = 0
        for s_idx, t_idx in pairs:
            try:
                params, losses = adapt_step(params, opt, source.X[s_idx], source.speakers[s_idx],
                                            target_adapt.X[t_idx], cfg)
            except TrainingDiverged as exc:
                exc.report = report
                raise
            report.steps.append((losses["L_ce"], losses["L_ot"], losses["L_pl"], losses["total"]))
            skipped += losses["skipped"]
            for k in sums:
                sums[k] += losses[k]
        row = {"epoch": epoch, **{k: v / len(pairs) for k, v in sums.items()}, "pl_skipped_steps": skipped}
        row.update(_evaluate(params, cfg, suite))
        report.epochs.append(row)
    return params, report


def write_report(report: RunReport, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        fh.write(report.to_csv())
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

