"""Isotropic-Gaussian primitives for conjugate matching.

Every distribution here is N(mean, variance * I) with a scalar variance, so
the posterior of a Gaussian mean under isotropic Gaussian noise stays in the
family and is fully described by two sufficient statistics:

    weighted_sum = mu0 / var0 + sum_k w_k / var_k
    precision    = 1 / var0 + sum_k 1 / var_k

Posterior mean and variance are weighted_sum / precision and 1 / precision.
Observations can be added and removed in O(d), which is what the alternating
matching loop needs when it re-solves one client at a time.

Arithmetic is generic on purpose: arrays of ``fractions.Fraction`` flow
through ``add_observation`` / ``remove_observation`` unchanged, which the
test suite uses to check exact invertibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Hashable

import numpy as np

from .errors import DuplicateClientError, ShapeMismatchError, UnknownClientError

ClientId = Hashable


@dataclass(frozen=True)
class IsotropicGaussian:
    """N(mean, variance * I); variance is a positive scalar."""

    mean: np.ndarray
    variance: float

    def __post_init__(self):
        mean = np.asarray(self.mean)
        if mean.ndim != 1:
            raise ShapeMismatchError("mean must be a 1-D vector")
        object.__setattr__(self, "mean", mean)
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class AtomSufficientStats:
    """Accumulated evidence for one global atom.

    ``count`` is the number of local neurons currently assigned (each from a
    distinct client), and ``supporting_clients`` records which clients those
    are so the one-neuron-per-client rule can be enforced.
    """

    weighted_sum: np.ndarray
    precision: float
    count: int
    supporting_clients: frozenset

    def __post_init__(self):
        object.__setattr__(self, "weighted_sum", np.asarray(self.weighted_sum))
        if self.count != len(self.supporting_clients):
            raise ValueError("count must equal the number of supporting clients")

    @classmethod
    def from_prior(cls, prior: IsotropicGaussian) -> "AtomSufficientStats":
        return cls(
            weighted_sum=prior.mean / prior.variance,
            precision=1 / prior.variance,
            count=0,
            supporting_clients=frozenset(),
        )

    @property
    def dim(self) -> int:
        return self.weighted_sum.shape[0]


def posterior_from_stats(stats: AtomSufficientStats) -> IsotropicGaussian:
    """Posterior N(weighted_sum / precision, I / precision)."""
    return IsotropicGaussian(
        mean=stats.weighted_sum / stats.precision,
        variance=1 / stats.precision,
    )


def add_observation(
    stats: AtomSufficientStats,
    w: np.ndarray,
    sigma_sq: float,
    client: ClientId,
) -> AtomSufficientStats:
    """Fold one local neuron w with noise variance sigma_sq into the stats.

    Raises ``DuplicateClientError`` if the client already contributes: an
    atom may hold at most one neuron per client.
    """
    w = np.asarray(w)
    if w.shape != stats.weighted_sum.shape:
        raise ShapeMismatchError(
            f"observation dim {w.shape} != stats dim {stats.weighted_sum.shape}"
        )
    if client in stats.supporting_clients:
        raise DuplicateClientError(f"client {client!r} already contributes to this atom")
    return replace(
        stats,
        weighted_sum=stats.weighted_sum + w / sigma_sq,
        precision=stats.precision + 1 / sigma_sq,
        count=stats.count + 1,
        supporting_clients=stats.supporting_clients | {client},
    )


def remove_observation(
    stats: AtomSufficientStats,
    w: np.ndarray,
    sigma_sq: float,
    client: ClientId,
) -> AtomSufficientStats:
    """Exact inverse of ``add_observation`` for the same (w, sigma_sq, client).

    The caller is responsible for passing back the identical observation that
    was added; the stats deliberately do not store member lists.
    """
    w = np.asarray(w)
    if w.shape != stats.weighted_sum.shape:
        raise ShapeMismatchError(
            f"observation dim {w.shape} != stats dim {stats.weighted_sum.shape}"
        )
    if client not in stats.supporting_clients:
        raise UnknownClientError(f"client {client!r} does not contribute to this atom")
    return replace(
        stats,
        weighted_sum=stats.weighted_sum - w / sigma_sq,
        precision=stats.precision - 1 / sigma_sq,
        count=stats.count - 1,
        supporting_clients=stats.supporting_clients - {client},
    )


def sms(g: IsotropicGaussian) -> float:
    """Standardized mean square ||mean||^2 / variance."""
    return (g.mean @ g.mean) / g.variance


def kl_isotropic(x: IsotropicGaussian, y: IsotropicGaussian) -> float:
    """KL(x || y) for two isotropic Gaussians of equal dimension d:

        0.5 * [ d * vx/vy + ||my - mx||^2 / vy - d + d * ln(vy/vx) ]
    """
    if x.dim != y.dim:
        raise ShapeMismatchError(f"dimension mismatch: {x.dim} vs {y.dim}")
    d = x.dim
    delta = y.mean - x.mean
    ratio = x.variance / y.variance
    return 0.5 * (
        d * ratio + (delta @ delta) / y.variance - d + d * math.log(y.variance / x.variance)
    )


def log_marginal(w: np.ndarray, prior: IsotropicGaussian, sigma_sq: float) -> float:
    """Log density of w under the predictive N(prior.mean, (prior.variance + sigma_sq) I).

    This is the marginal of w when w | theta ~ N(theta, sigma_sq * I) and
    theta ~ prior.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != prior.mean.shape:
        raise ShapeMismatchError("w and prior must share dimension")
    v = prior.variance + sigma_sq
    delta = w - prior.mean
    d = prior.dim
    return -0.5 * (d * math.log(2 * math.pi * v) + (delta @ delta) / v)
