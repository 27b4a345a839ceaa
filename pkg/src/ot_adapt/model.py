"""Feed-forward embedding encoder with a cosine prototype classifier.

x -> tanh hidden layers -> linear embedding -> L2 normalise -> cos(e, p_k).
The hidden activations, concatenated, are the "multi-scale" features used by the
joint cost. Gradients are derived by hand layer by layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .joint_cost import BatchForward

CHECKPOINT_VERSION = 1
COS_EPS = 1e-7


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    prototypes: np.ndarray
    logit_scale: float = 30.0
    seed: int = 0

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(W.shape[1] for W in self.weights[:-1])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.prototypes]

    def copy(self) -> "ModelParams":
        return ModelParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           self.prototypes.copy(), self.logit_scale, self.seed)


@dataclass
class ModelGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    prototypes: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ModelGrads":
        return cls([np.zeros_like(W) for W in params.weights],
                   [np.zeros_like(b) for b in params.biases],
                   np.zeros_like(params.prototypes))

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.prototypes]

    def __add__(self, other: "ModelGrads") -> "ModelGrads":
        return ModelGrads([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)],
                          self.prototypes + other.prototypes)

    def scaled(self, c: float) -> "ModelGrads":
        return ModelGrads([c * W for W in self.weights], [c * b for b in self.biases],
                          c * self.prototypes)


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 30.0
    margin: float = 0.2

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("margin scale must be positive")
        if not 0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")


def unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def init_params(input_dim=40, hidden=(64, 64), embed_dim=16, num_classes=64, seed=0,
                logit_scale=30.0) -> ModelParams:
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, embed_dim]
    weights = [rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    prototypes = unit_rows(rng.normal(size=(num_classes, embed_dim)))
    return ModelParams(weights, biases, prototypes, float(logit_scale), int(seed))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    hidden: list[np.ndarray]
    pre_norm: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray = field(repr=False)


def forward_cached(params: ModelParams, X, labels=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of shape (n, {params.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    hidden = []
    a = X
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.tanh(a @ W + b)
        hidden.append(a)
    u = a @ params.weights[-1] + params.biases[-1]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("encoder produced a zero embedding")
    e = u / norms
    cos = e @ params.prototypes.T
    features = np.concatenate(hidden, axis=1) if hidden else np.zeros((X.shape[0], 0))
    fw = BatchForward(
        logits=params.logit_scale * cos,
        embeddings=e,
        features=features,
        labels=None if labels is None else np.asarray(labels),
        cos=cos,
        logit_scale=params.logit_scale,
    )
    return fw, ForwardCache(X, hidden, u, norms, e)


def forward(params: ModelParams, X, labels=None) -> BatchForward:
    return forward_cached(params, X, labels)[0]


def backward(params: ModelParams, cache: ForwardCache, d_cos=None, d_emb=None, d_feat=None) -> ModelGrads:
    """Parameter gradients given gradients of a scalar objective w.r.t. the outputs.

    ``d_cos`` is w.r.t. the cosine matrix (n x K), ``d_emb`` w.r.t. the normalised
    embeddings, ``d_feat`` w.r.t. the concatenated hidden activations.
    """
    e = cache.embeddings
    n = e.shape[0]
    grads = ModelGrads.zeros_like(params)
    de = np.zeros_like(e) if d_emb is None else np.array(d_emb, dtype=np.float64)
    if de.shape != e.shape:
        raise ValueError("d_emb shape mismatch")
    if d_cos is not None:
        if d_cos.shape != (n, params.num_classes):
            raise ValueError("d_cos shape mismatch")
        de += d_cos @ params.prototypes
        grads.prototypes += d_cos.T @ e
    # normalisation Jacobian: (I - e e^T) / |u|
    du = (de - e * (de * e).sum(1, keepdims=True)) / cache.norms

    if d_feat is not None and d_feat.shape != (n, sum(params.hidden_sizes)):
        raise ValueError("d_feat shape mismatch")
    offsets = np.cumsum((0, *params.hidden_sizes))
    layer_inputs = [cache.inputs, *cache.hidden]
    dz = du
    for k in range(len(params.weights) - 1, -1, -1):
        grads.weights[k] = layer_inputs[k].T @ dz
        grads.biases[k] = dz.sum(axis=0)
        if k == 0:
            break
        da = dz @ params.weights[k].T
        if d_feat is not None:
            da = da + d_feat[:, offsets[k - 1]:offsets[k]]
        a = cache.hidden[k - 1]
        dz = da * (1.0 - a * a)
    return grads


def _margin_logits(cos, labels, cfg: MarginConfig):
    """Scaled logits with cos(theta_y + m) at the true class, and d(logit_y)/d(cos_y)."""
    rows = np.arange(len(labels))
    logits = cfg.scale * cos
    c = cos[rows, labels]
    if cfg.margin == 0:
        return logits, np.full(len(labels), cfg.scale)
    cc = np.clip(c, -1.0 + COS_EPS, 1.0 - COS_EPS)
    sin_t = np.sqrt(1.0 - cc * cc)
    target = cc * math.cos(cfg.margin) - sin_t * math.sin(cfg.margin)
    logits[rows, labels] = cfg.scale * target
    clipped = (c != cc)
    dtarget = math.cos(cfg.margin) + math.sin(cfg.margin) * cc / sin_t
    return logits, np.where(clipped, 0.0, cfg.scale * dtarget)


def aam_loss_grad(fw: BatchForward, labels, cfg: MarginConfig = MarginConfig()):
    """Additive angular margin softmax loss (batch mean) and its gradient w.r.t. cos."""
    labels = np.asarray(labels)
    cos = fw.cos
    n, K = cos.shape
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    logits, d_target = _margin_logits(cos, labels, cfg)
    rows = np.arange(n)
    loss = float(-log_softmax(logits, axis=1)[rows, labels].mean())
    d_logits = softmax(logits, axis=1)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    d_cos = cfg.scale * d_logits
    d_cos[rows, labels] = d_logits[rows, labels] * d_target
    return loss, d_cos


def aam_loss(fw: BatchForward, labels, cfg: MarginConfig = MarginConfig()) -> float:
    return aam_loss_grad(fw, labels, cfg)[0]


def sgd_step(params: ModelParams, grads: ModelGrads, lr: float, momentum: float = 0.0,
             velocity: ModelGrads | None = None):
    """Momentum SGD (v <- mu v + g; p <- p - lr v), then renormalise prototypes.

    Returns ``(new_params, velocity)``.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    velocity = grads if velocity is None else velocity.scaled(momentum) + grads
    new = params.copy()
    for p, v in zip(new.arrays(), velocity.arrays()):
        p -= lr * v
    new.prototypes = unit_rows(new.prototypes)
    return new, velocity


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params: ModelParams, grads: ModelGrads) -> ModelParams:
        params, self.velocity = sgd_step(params, grads, self.lr, self.momentum, self.velocity)
        return params


def save_checkpoint(params: ModelParams, path) -> None:
    def pack(a):
        return {"shape": list(a.shape), "data": a.ravel().tolist()}

    doc = {
        "format": "ot_adapt.model",
        "version": CHECKPOINT_VERSION,
        "seed": params.seed,
        "logit_scale": params.logit_scale,
        "weights": [pack(W) for W in params.weights],
        "biases": [pack(b) for b in params.biases],
        "prototypes": pack(params.prototypes),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "ot_adapt.model":
        raise ValueError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")

    def unpack(t):
        a = np.array(t["data"], dtype=np.float64)
        if a.size != math.prod(t["shape"]):
            raise ValueError("checkpoint tensor size does not match its shape")
        return a.reshape(t["shape"])

    try:
        weights = [unpack(t) for t in doc["weights"]]
        biases = [unpack(t) for t in doc["biases"]]
        prototypes = unpack(doc["prototypes"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
    for W, b in zip(weights, biases):
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ValueError("checkpoint layer shapes are inconsistent")
    for W0, W1 in zip(weights[:-1], weights[1:]):
        if W0.shape[1] != W1.shape[0]:
            raise ValueError("checkpoint layer shapes are inconsistent")
    if prototypes.ndim != 2 or prototypes.shape[1] != weights[-1].shape[1]:
        raise ValueError("checkpoint prototypes do not match the embedding size")
    return ModelParams(weights, biases, prototypes, float(doc["logit_scale"]), int(doc["seed"]))
