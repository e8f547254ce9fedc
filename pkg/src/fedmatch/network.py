"""Single-hidden-layer networks, their neuron view, training, and baselines.

A net computes w1 @ act(w0 @ x) with no biases, so hidden unit j is fully
described by the concatenation of row j of w0 and column j of w1 -- the
vector the matching modules operate on. Training is plain mini-batch
gradient descent on softmax cross-entropy, written directly in numpy so the
gradients can be checked against finite differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError

ACTIVATIONS = ("relu", "tanh")


@dataclass
class Fcnn:
    w0: np.ndarray  # (J, D)
    w1: np.ndarray  # (K, J)
    activation: str = "relu"

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=float)
        self.w1 = np.asarray(self.w1, dtype=float)
        if self.w0.ndim != 2 or self.w1.ndim != 2:
            raise ShapeMismatchError("w0 and w1 must be matrices")
        if self.w0.shape[0] != self.w1.shape[1]:
            raise ShapeMismatchError(
                f"hidden sizes disagree: w0 {self.w0.shape}, w1 {self.w1.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def input_dim(self) -> int:
        return self.w0.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w0.shape[0]

    def copy(self) -> "Fcnn":
        return Fcnn(self.w0.copy(), self.w1.copy(), self.activation)


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) ints

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ShapeMismatchError("features must be N x D, labels length N")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeMismatchError("feature and label counts differ")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be nonnegative")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch: int = 32
    epochs: int = 10
    seed: int = 0
    optimizer: str = "sgd"  # sgd | prox
    prox_mu: float = 0.0
    prox_anchor: Fcnn | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "prox"):
            raise ValueError("optimizer must be 'sgd' or 'prox'")
        if self.optimizer == "prox" and self.prox_anchor is None:
            raise ValueError("prox optimizer needs an anchor net")


def _act(a: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _act_grad(a: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return (a > 0).astype(float)
    t = np.tanh(a)
    return 1.0 - t * t


def neurons_of(net: Fcnn) -> np.ndarray:
    """Row j = [w0 row j, w1 column j]: the J x (D + K) neuron view."""
    return np.hstack([net.w0, net.w1.T])


def net_of(neurons: np.ndarray, D: int, K: int, activation: str = "relu") -> Fcnn:
    """Inverse of ``neurons_of``: split each row back into the two layers."""
    neurons = np.asarray(neurons, dtype=float)
    if neurons.ndim != 2 or neurons.shape[1] != D + K:
        raise ShapeMismatchError(
            f"neuron matrix must have {D + K} columns, got {neurons.shape}"
        )
    return Fcnn(w0=neurons[:, :D].copy(), w1=neurons[:, D:].T.copy(), activation=activation)


def permute_hidden(net: Fcnn, tau) -> Fcnn:
    """Reorder hidden units by tau (new position i holds old unit tau[i])."""
    tau = np.asarray(tau, dtype=np.intp)
    if sorted(tau.tolist()) != list(range(net.hidden)):
        raise ValueError("tau must be a permutation of the hidden units")
    return Fcnn(net.w0[tau], net.w1[:, tau], net.activation)


def forward(net: Fcnn, x: np.ndarray) -> np.ndarray:
    """w1 @ act(w0 @ x); accepts a single D-vector or an N x D batch."""
    x = np.asarray(x, dtype=float)
    hidden = _act(x @ net.w0.T, net.activation)
    return hidden @ net.w1.T


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(net: Fcnn, data: LabeledDataset, cfg: TrainConfig):
    """Mean softmax cross-entropy (plus the proximal term when configured)
    with its exact gradients. Exposed so tests can difference it."""
    X, y = data.features, data.labels
    n = len(data)
    if n == 0:
        raise ValueError("empty dataset")
    pre = X @ net.w0.T
    hidden = _act(pre, net.activation)
    logits = hidden @ net.w1.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(n), y]).mean())

    d_logits = _softmax(logits)
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    g1 = d_logits.T @ hidden
    d_hidden = d_logits @ net.w1
    d_pre = d_hidden * _act_grad(pre, net.activation)
    g0 = d_pre.T @ X

    if cfg.optimizer == "prox":
        anchor = cfg.prox_anchor
        loss += 0.5 * cfg.prox_mu * (
            float(((net.w0 - anchor.w0) ** 2).sum())
            + float(((net.w1 - anchor.w1) ** 2).sum())
        )
        g0 = g0 + cfg.prox_mu * (net.w0 - anchor.w0)
        g1 = g1 + cfg.prox_mu * (net.w1 - anchor.w1)
    return loss, g0, g1


def train_local(net: Fcnn, data: LabeledDataset, cfg: TrainConfig) -> Fcnn:
    """Mini-batch gradient descent; deterministic given cfg.seed."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    out = net.copy()
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            batch = LabeledDataset(data.features[idx], data.labels[idx])
            _, g0, g1 = loss_and_grads(out, batch, cfg)
            out.w0 -= cfg.lr * g0
            out.w1 -= cfg.lr * g1
    return out


def synth_data(K: int, D: int, per_class: int, spread: float, seed) -> LabeledDataset:
    """K Gaussian blobs, ``per_class`` points each, class-major order. Class
    means are standard-normal draws; ``spread`` scales the within-class
    noise."""
    if K < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((K, D))
    feats = []
    labels = []
    for k in range(K):
        feats.append(means[k] + spread * rng.standard_normal((per_class, D)))
        labels.append(np.full(per_class, k, dtype=np.intp))
    return LabeledDataset(np.vstack(feats), np.concatenate(labels))


def _largest_remainder(p: np.ndarray, n: int) -> np.ndarray:
    """Integer counts summing to n, proportional to p, largest remainder
    first (ties to the lower index)."""
    raw = p * n
    base = np.floor(raw).astype(int)
    short = n - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def dirichlet_partition(
    data: LabeledDataset, alpha: float, S: int, seed
) -> tuple[list[LabeledDataset], list[np.ndarray]]:
    """Split ``data`` over S clients, drawing one Dirichlet(alpha) vector over
    clients per class. Returns the shards and each client's realized class
    proportions (uniform, with a warning, for empty shards)."""
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng(seed)
    K = int(data.labels.max()) + 1 if len(data) else 0
    per_client_idx = [[] for _ in range(S)]
    for k in range(K):
        idx = np.flatnonzero(data.labels == k)
        idx = idx[rng.permutation(len(idx))]
        p = rng.dirichlet(np.full(S, alpha))
        counts = _largest_remainder(p, len(idx))
        start = 0
        for s in range(S):
            per_client_idx[s].append(idx[start : start + counts[s]])
            start += counts[s]
    shards = []
    proportions = []
    for s in range(S):
        idx = np.concatenate(per_client_idx[s]) if per_client_idx[s] else np.empty(0, dtype=int)
        shard = LabeledDataset(data.features[idx], data.labels[idx])
        shards.append(shard)
        if len(shard) == 0:
            warnings.warn(f"client {s} received an empty shard")
            proportions.append(np.full(K, 1.0 / K))
        else:
            counts = np.bincount(shard.labels, minlength=K).astype(float)
            proportions.append(counts / counts.sum())
    return shards, proportions


def fedavg(nets: list[Fcnn], weights) -> Fcnn:
    """Coordinate-wise weighted average of identically shaped nets."""
    if not nets:
        raise ValueError("need at least one net")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(nets),):
        raise ShapeMismatchError("one weight per net required")
    if weights.min() < 0 or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must form a probability vector")
    shape0, shape1 = nets[0].w0.shape, nets[0].w1.shape
    for net in nets[1:]:
        if net.w0.shape != shape0 or net.w1.shape != shape1:
            raise ShapeMismatchError("nets must share architecture")
        if net.activation != nets[0].activation:
            raise ShapeMismatchError("nets must share activation")
    w0 = sum(w * net.w0 for w, net in zip(weights, nets))
    w1 = sum(w * net.w1 for w, net in zip(weights, nets))
    return Fcnn(w0, w1, nets[0].activation)


def weighted_rows(mats: list[np.ndarray], proportions: list[np.ndarray]) -> np.ndarray:
    """Row k of the result is the proportion-weighted average of row k across
    clients; classes with zero total weight fall back to a uniform average."""
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ShapeMismatchError("matrices must share shape")
    K = shape[0]
    num = np.zeros(shape)
    den = np.zeros(K)
    for m, p in zip(mats, proportions):
        p = np.asarray(p, dtype=float)
        if p.shape != (K,):
            raise ShapeMismatchError("proportions must have one entry per class")
        num += p[:, None] * m
        den += p
    out = np.empty(shape)
    zero = den == 0
    if zero.any():
        warnings.warn("classes with zero total proportion fall back to uniform averaging")
    out[~zero] = num[~zero] / den[~zero, None]
    if zero.any():
        out[zero] = np.mean([m[zero] for m in mats], axis=0)
    return out


def weighted_output_layer(nets: list[Fcnn], proportions: list[np.ndarray]) -> np.ndarray:
    """Class-proportion-weighted average of the output layers."""
    return weighted_rows([net.w1 for net in nets], proportions)


def evaluate(net: Fcnn, data: LabeledDataset) -> float:
    """Argmax accuracy; argmax ties resolve to the smallest class index."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    logits = forward(net, data.features)
    preds = np.argmax(logits, axis=1)
    return float((preds == data.labels).mean())
