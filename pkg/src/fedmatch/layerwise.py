"""Layer-by-layer fusion of deep stacks and batch-norm folding.

Deep architectures are fused one layer at a time: match the current layer's
output units across clients, average the matched rows into the global layer,
relabel every client's next layer onto the global unit ids, optionally let
each client retrain its remaining layers against the frozen prefix, and
finish the last layer with a class-proportion-weighted average. The whole
sweep therefore costs one communication round per layer.

For matching, an intermediate unit is described by its incoming row in layer
n concatenated with its outgoing column in layer n+1, the same view used for
single-hidden-layer nets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeMismatchError
from .matching import LocalModelNeurons, MatchConfig, run_matching
from .network import _act, weighted_rows

# Given (client_id, frozen global prefix, client's remaining layers), return
# the retrained remaining layers with unchanged shapes.
RetrainHook = Callable[[object, list[np.ndarray], list[np.ndarray]], list[np.ndarray]]


def no_retrain(client_id, frozen_prefix, remaining):
    """Default hook: keep the remaining layers as they are."""
    return remaining


@dataclass
class LayeredWeights:
    """Ordered affine stack; layer n maps dim_n -> dim_{n+1} and is stored as
    a (dim_{n+1} x dim_n) matrix, so row j of layer n and column j of layer
    n+1 describe the same unit."""

    layers: list[np.ndarray]
    client_id: object = None
    proportions: np.ndarray | None = None

    def __post_init__(self):
        self.layers = [np.asarray(w, dtype=float) for w in self.layers]
        if not self.layers:
            raise ShapeMismatchError("need at least one layer")
        for n in range(len(self.layers) - 1):
            if self.layers[n + 1].shape[1] != self.layers[n].shape[0]:
                raise ShapeMismatchError(
                    f"layer {n + 1} input dim {self.layers[n + 1].shape[1]} != "
                    f"layer {n} output dim {self.layers[n].shape[0]}"
                )
        if self.proportions is not None:
            self.proportions = np.asarray(self.proportions, dtype=float)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


@dataclass
class BnParams:
    """Batch-norm statistics and affine parameters, one entry per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma_sq: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma_sq = np.asarray(self.sigma_sq, dtype=float)
        n = self.gamma.shape
        if not (self.beta.shape == n and self.mu.shape == n and self.sigma_sq.shape == n):
            raise ShapeMismatchError("bn vectors must share length")
        if ((self.sigma_sq + self.eps) <= 0).any():
            raise ValueError("sigma_sq + eps must be positive")

    def __len__(self) -> int:
        return self.gamma.shape[0]


def fold_bn(w: np.ndarray, b: np.ndarray, bn: BnParams) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a batch-norm layer into the preceding affine map:

        scale = gamma / sqrt(sigma_sq + eps)
        W' = scale * W      (per output channel)
        b' = scale * (b - mu) + beta
    """
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    if w.ndim != 2 or b.shape != (w.shape[0],) or len(bn) != w.shape[0]:
        raise ShapeMismatchError("bn vectors must match the layer's output channels")
    scale = bn.gamma / np.sqrt(bn.sigma_sq + bn.eps)
    return scale[:, None] * w, scale * (b - bn.mu) + bn.beta


def bn_apply(f: np.ndarray, bn: BnParams) -> np.ndarray:
    """Reference batch-norm transform gamma * (f - mu) / sqrt(var + eps) + beta."""
    return bn.gamma * (f - bn.mu) / np.sqrt(bn.sigma_sq + bn.eps) + bn.beta


def layered_forward(layers: list[np.ndarray], x: np.ndarray, activation: str = "relu") -> np.ndarray:
    """Forward pass with the activation after every layer except the last."""
    out = np.asarray(x, dtype=float)
    for w in layers[:-1]:
        out = _act(out @ w.T, activation)
    return out @ layers[-1].T


def fuse_layerwise(
    clients: list[LayeredWeights],
    config: MatchConfig,
    hook: RetrainHook = no_retrain,
    count_normalized: bool = False,
) -> LayeredWeights:
    """Fuse same-depth stacks, matching each non-final layer and weighting
    the final one by class proportions.

    Matched rows are summed and divided by the number of clients; with
    ``count_normalized`` each global row is divided by its support count
    instead (off by default).
    """
    if not clients:
        raise ShapeMismatchError("need at least one client")
    n_layers = clients[0].n_layers
    for c in clients[1:]:
        if c.n_layers != n_layers:
            raise ShapeMismatchError("clients must share layer count")
        if c.layers[-1].shape[0] != clients[0].layers[-1].shape[0]:
            raise ShapeMismatchError("clients must share terminal dimension")

    S = len(clients)
    work = {c.client_id: [w.copy() for w in c.layers] for c in clients}
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ShapeMismatchError("duplicate client ids")
    proportions = []
    n_classes = clients[0].layers[-1].shape[0]
    for c in clients:
        if c.proportions is None:
            proportions.append(np.full(n_classes, 1.0 / n_classes))
        else:
            proportions.append(c.proportions)

    global_layers: list[np.ndarray] = []
    for n in range(n_layers):
        if n < n_layers - 1:
            views = [
                LocalModelNeurons(
                    client_id=cid,
                    neurons=np.hstack([work[cid][n], work[cid][n + 1].T]),
                    sigma_sq=config.sigma_sq_for(cid),
                )
                for cid in ids
            ]
            state, _ = run_matching(views, config)
            j_global = state.atom_count
            in_dim = work[ids[0]][n].shape[1]
            fused = np.zeros((j_global, in_dim))
            for cid in ids:
                np.add.at(fused, state.per_client[cid], work[cid][n])
            if count_normalized:
                counts = np.array([a.count for a in state.atoms], dtype=float)
                fused /= counts[:, None]
            else:
                fused /= S
            global_layers.append(fused)

            for cid in ids:
                nxt = work[cid][n + 1]
                relabeled = np.zeros((nxt.shape[0], j_global))
                relabeled[:, state.per_client[cid]] = nxt
                work[cid][n + 1] = relabeled
                remaining = hook(cid, [g.copy() for g in global_layers], work[cid][n + 1 :])
                if len(remaining) != n_layers - (n + 1):
                    raise ShapeMismatchError("hook changed the number of layers")
                for old, new in zip(work[cid][n + 1 :], remaining):
                    if np.asarray(new).shape != old.shape:
                        raise ShapeMismatchError("hook changed a layer shape")
                work[cid][n + 1 :] = [np.asarray(r, dtype=float) for r in remaining]
        else:
            final = weighted_rows([work[cid][n] for cid in ids], proportions)
            global_layers.append(final)
    return LayeredWeights(layers=global_layers, client_id=None)
