"""Assignment-cost construction and the alternating matching loop.

Local neurons from each client are matched to a growing pool of global
atoms. One client at a time is removed from the pool and re-assigned by
solving a rectangular linear sum assignment problem whose rows are the
surviving atoms plus one candidate "new atom" row per local neuron.

Two cost variants are available:

  * ``pfnm``: the classic posterior-drop cost. For an existing atom with
    evidence (ws, prec) and off-client support n out of S clients,

        C[i, j] = 2 log((S - n_i) / n_i)
                  - ||ws_i + w_j / s2||^2 / (prec_i + 1 / s2)
                  + ||ws_i||^2 / prec_i

    and for the k-th new-atom row (prior evidence ws0, prec0),

        C[k, j] = 2 log(k / (gamma0 / S))
                  - ||ws0 + w_j / s2||^2 / (prec0 + 1 / s2)
                  + ||ws0||^2 / prec0

    where s2 is the active client's noise variance.

  * ``nafi``: the same cost plus ``lam`` times the KL divergence from the
    atom's current posterior to its posterior after absorbing w_j (prior to
    prior-plus-w for new rows). The penalty restores the dependence on the
    atom identity that the plain cost cancels out, at the price of one
    hyperparameter.

With ``lam == 0`` the two variants produce bit-identical matrices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InternalInvariantError, ShapeMismatchError
from .gaussians import (
    AtomSufficientStats,
    IsotropicGaussian,
    add_observation,
    remove_observation,
)
from .lap import solve_lap_matrix

logger = logging.getLogger(__name__)

ALGORITHMS = ("pfnm", "nafi")
CLIENT_ORDERS = ("fixed", "shuffle")


@dataclass
class LocalModelNeurons:
    """One client's neurons: row j of ``neurons`` is the j-th concatenated
    weight vector, all observed with variance ``sigma_sq``."""

    client_id: int
    neurons: np.ndarray
    sigma_sq: float

    def __post_init__(self):
        self.neurons = np.asarray(self.neurons, dtype=float)
        if self.neurons.ndim != 2 or self.neurons.shape[0] < 1:
            raise ShapeMismatchError("neurons must be a J x d matrix with J >= 1")
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")

    @property
    def count(self) -> int:
        return self.neurons.shape[0]


@dataclass
class MatchConfig:
    """Knobs of the matching loop. ``sigma_sq`` is the default client noise
    variance; pass a mapping to give clients individual values."""

    gamma0: float = 1.0
    sigma0_sq: float = 10.0
    sigma_sq: float | Mapping = 1.0
    mu0: np.ndarray | None = None
    prior: IsotropicGaussian | None = None
    lam: float = 0.0
    algorithm: str = "pfnm"
    max_passes: int = 10
    client_order: str = "fixed"
    seed: int = 0
    log_clamp: float = 1e-12

    def validate(self) -> None:
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.client_order not in CLIENT_ORDERS:
            raise ValueError(f"client_order must be one of {CLIENT_ORDERS}")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")
        if not self.log_clamp > 0:
            raise ValueError("log_clamp must be positive")

    def prior_for(self, dim: int) -> IsotropicGaussian:
        if self.prior is not None:
            if self.prior.dim != dim:
                raise ShapeMismatchError(
                    f"configured prior has dim {self.prior.dim}, data has dim {dim}"
                )
            return self.prior
        mu0 = np.zeros(dim) if self.mu0 is None else np.asarray(self.mu0, dtype=float)
        if mu0.shape != (dim,):
            raise ShapeMismatchError(f"mu0 has shape {mu0.shape}, expected ({dim},)")
        return IsotropicGaussian(mean=mu0, variance=self.sigma0_sq)

    def sigma_sq_for(self, client_id) -> float:
        if isinstance(self.sigma_sq, Mapping):
            return float(self.sigma_sq[client_id])
        return float(self.sigma_sq)


@dataclass
class CostMatrix:
    """LAP cost block: ``existing_rows`` atom rows stacked over ``new_rows``
    candidate rows, one column per local neuron of the active client."""

    entries: np.ndarray
    existing_rows: int
    new_rows: int

    def __post_init__(self):
        if self.entries.shape[0] != self.existing_rows + self.new_rows:
            raise InternalInvariantError("row count must equal existing + new rows")
        if not np.isfinite(self.entries).all():
            raise InternalInvariantError("cost entries must be finite")


@dataclass
class AssignmentState:
    """Mutable matching state: atom pool plus per-client assignment maps.

    ``client_obs`` keeps each client's exact observations so they can be
    removed bit-for-bit when the client is re-solved.
    """

    prior: IsotropicGaussian
    atoms: list = field(default_factory=list)
    per_client: dict = field(default_factory=dict)
    client_obs: dict = field(default_factory=dict)
    pass_objectives: list = field(default_factory=list)

    @classmethod
    def empty(cls, prior: IsotropicGaussian) -> "AssignmentState":
        return cls(prior=prior)

    @property
    def atom_count(self) -> int:
        return len(self.atoms)

    def observation(self, client_id, j) -> tuple[np.ndarray, float]:
        local = self.client_obs[client_id]
        return local.neurons[j], local.sigma_sq

    def members(self) -> list:
        """Per-atom lists of (client_id, local_index) contributors."""
        out = [[] for _ in self.atoms]
        for client_id, assign in self.per_client.items():
            for j, atom_idx in enumerate(assign):
                out[atom_idx].append((client_id, j))
        return out

    def partition(self) -> frozenset:
        """Co-assignment partition of all local neurons, as a canonical value
        independent of atom ordering."""
        return frozenset(frozenset(m) for m in self.members() if m)

    def validate(self) -> None:
        seen = [0] * len(self.atoms)
        for client_id, assign in self.per_client.items():
            if len(set(assign.tolist())) != len(assign):
                raise InternalInvariantError(
                    f"client {client_id} maps two neurons to one atom"
                )
            for atom_idx in assign:
                if not 0 <= atom_idx < len(self.atoms):
                    raise InternalInvariantError("atom index out of range")
                seen[atom_idx] += 1
        for idx, (stats, n) in enumerate(zip(self.atoms, seen)):
            if stats.count != n:
                raise InternalInvariantError(
                    f"atom {idx} count {stats.count} != {n} mapped neurons"
                )
            if stats.count == 0:
                raise InternalInvariantError(f"atom {idx} has no support (unpruned)")


def _atom_arrays(atoms) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ws = np.stack([np.asarray(a.weighted_sum, dtype=float) for a in atoms])
    prec = np.array([a.precision for a in atoms], dtype=float)
    counts = np.array([a.count for a in atoms], dtype=float)
    return ws, prec, counts


def build_cost_pfnm(
    state_minus: AssignmentState,
    local: LocalModelNeurons,
    S: int,
    config: MatchConfig,
) -> CostMatrix:
    """Posterior-drop assignment cost; see the module docstring for the
    closed form. ``state_minus`` must not contain the active client."""
    if local.client_id in state_minus.per_client:
        raise InternalInvariantError("state_minus still contains the active client")
    prior = state_minus.prior
    if local.neurons.shape[1] != prior.dim:
        raise ShapeMismatchError("neuron dimension does not match prior")
    W = local.neurons
    m = W.shape[0]
    s2 = local.sigma_sq
    ws0 = prior.mean / prior.variance
    prec0 = 1.0 / prior.variance
    clamp = config.log_clamp

    blocks = []
    n_existing = state_minus.atom_count
    if n_existing:
        ws, prec, counts = _atom_arrays(state_minus.atoms)
        if counts.min() < 1:
            raise InternalInvariantError("existing atom with zero support; prune first")
        if counts.max() > S - 1:
            raise InternalInvariantError("atom support exceeds S - 1 clients")
        base = (ws * ws).sum(axis=1) / prec
        num = ws[:, None, :] + W[None, :, :] / s2
        den = prec + 1.0 / s2
        joined = (num * num).sum(axis=2) / den[:, None]
        log_term = 2.0 * np.log(np.maximum((S - counts) / counts, clamp))
        blocks.append(log_term[:, None] - joined + base[:, None])

    new_num = ws0[None, :] + W / s2
    new_den = prec0 + 1.0 / s2
    new_base = -(new_num * new_num).sum(axis=1) / new_den + (ws0 @ ws0) / prec0
    k = np.arange(1, m + 1, dtype=float)
    new_log = 2.0 * np.log(np.maximum(k / (config.gamma0 / S), clamp))
    blocks.append(new_log[:, None] + new_base[None, :])

    return CostMatrix(entries=np.vstack(blocks), existing_rows=n_existing, new_rows=m)


def build_cost_nafi(
    state_minus: AssignmentState,
    local: LocalModelNeurons,
    S: int,
    config: MatchConfig,
) -> CostMatrix:
    """PFNM cost plus ``lam`` * KL(current posterior || updated posterior)."""
    base = build_cost_pfnm(state_minus, local, S, config)
    if config.lam == 0:
        return base
    prior = state_minus.prior
    d = prior.dim
    W = local.neurons
    s2 = local.sigma_sq
    entries = base.entries.copy()

    def pair_kl(ws, prec):
        # Vectorized kl_isotropic between N(ws/prec, 1/prec) and the
        # posterior after absorbing each column's neuron.
        den = prec + 1.0 / s2
        ratio = den / prec
        mx = ws / prec[:, None]
        my = (ws[:, None, :] + W[None, :, :] / s2) / den[:, None, None]
        delta = my - mx[:, None, :]
        sq = (delta * delta).sum(axis=2) * den[:, None]
        return 0.5 * (d * ratio[:, None] + sq - d + d * np.log(prec / den)[:, None])

    n_existing = base.existing_rows
    if n_existing:
        ws, prec, _ = _atom_arrays(state_minus.atoms)
        entries[:n_existing] += config.lam * pair_kl(ws, prec)

    ws0 = (prior.mean / prior.variance)[None, :]
    prec0 = np.array([1.0 / prior.variance])
    new_kl = pair_kl(ws0, prec0)[0]
    entries[n_existing:] += config.lam * new_kl[None, :]

    return CostMatrix(entries=entries, existing_rows=n_existing, new_rows=base.new_rows)


def build_cost(state_minus, local, S, config) -> CostMatrix:
    if config.algorithm == "nafi":
        return build_cost_nafi(state_minus, local, S, config)
    return build_cost_pfnm(state_minus, local, S, config)


def solve_lap(cost: CostMatrix) -> np.ndarray:
    """Row index per column, minimizing total cost; ties break toward the
    lexicographically smallest row vector."""
    return solve_lap_matrix(cost.entries)


def _prune(state: AssignmentState) -> None:
    """Drop zero-support atoms and remap every client's indices."""
    keep = [i for i, a in enumerate(state.atoms) if a.count > 0]
    if len(keep) == len(state.atoms):
        return
    remap = {old: new for new, old in enumerate(keep)}
    state.atoms = [state.atoms[i] for i in keep]
    for client_id, assign in state.per_client.items():
        state.per_client[client_id] = np.array(
            [remap[idx] for idx in assign], dtype=np.intp
        )


def assign_client(
    state: AssignmentState,
    local: LocalModelNeurons,
    S: int,
    config: MatchConfig,
) -> AssignmentState:
    """Re-solve one client: detach its observations, rebuild the cost, solve
    the LAP, and re-attach according to the solution."""
    client_id = local.client_id
    if client_id in state.per_client:
        prev_assign = state.per_client.pop(client_id)
        prev = state.client_obs.pop(client_id)
        for j, atom_idx in enumerate(prev_assign):
            state.atoms[atom_idx] = remove_observation(
                state.atoms[atom_idx], prev.neurons[j], prev.sigma_sq, client_id
            )
        _prune(state)

    cost = build_cost(state, local, S, config)
    solution = solve_lap(cost)
    n_existing = cost.existing_rows

    new_rows = sorted(int(r) for r in solution if r >= n_existing)
    new_index = {r: n_existing + i for i, r in enumerate(new_rows)}
    for _ in new_rows:
        state.atoms.append(AtomSufficientStats.from_prior(state.prior))

    assign = np.empty(local.count, dtype=np.intp)
    for j, r in enumerate(solution):
        atom_idx = int(r) if r < n_existing else new_index[int(r)]
        state.atoms[atom_idx] = add_observation(
            state.atoms[atom_idx], local.neurons[j], local.sigma_sq, client_id
        )
        assign[j] = atom_idx
    state.per_client[client_id] = assign
    state.client_obs[client_id] = local
    _prune(state)
    return state


def negative_log_posterior(state: AssignmentState, gamma0: float) -> float:
    """Joint negative log posterior of the current state, with every atom at
    its conjugate posterior mean.

    Gaussian terms: the prior quadratic of each active atom's mean plus the
    full log-likelihood of every assigned neuron. The per-atom prior
    normalizer is omitted: in the nonparametric view all atoms always exist
    (inactive ones sit at the prior), so it is an assignment-independent
    constant.

    Assignment terms: the exchangeable buffet-process probability,

        gamma0 * H_S - K * log(gamma0)
        - sum_i [ lgamma(n_i) + lgamma(S - n_i + 1) - lgamma(S + 1) ]
        + sum_c lgamma(m_c + 1)

    with n_i the atom supports and m_c the number of atoms supported only by
    client c. The per-client assignment costs telescope this energy exactly
    except for bounded singleton-multiplicity bookkeeping (a client joining
    another client's singleton atom changes that client's m_c without the
    cost charging for it), so a full plain-cost pass is non-increasing up to
    terms of order log(max_c m_c). Logged every pass.
    """
    prior = state.prior
    d = prior.dim
    mu0 = np.asarray(prior.mean, dtype=float)
    total = 0.0
    for stats, mem in zip(state.atoms, state.members()):
        theta = np.asarray(stats.weighted_sum, dtype=float) / stats.precision
        delta = theta - mu0
        total += 0.5 * (delta @ delta) / prior.variance
        for client_id, j in mem:
            w, s2 = state.observation(client_id, j)
            r = w - theta
            total += 0.5 * ((r @ r) / s2 + d * math.log(2 * math.pi * s2))

    S = len(state.per_client)
    total += gamma0 * sum(1.0 / t for t in range(1, S + 1))
    singletons: dict = {}
    for stats in state.atoms:
        n = stats.count
        total -= (
            math.log(gamma0)
            + math.lgamma(n)
            + math.lgamma(S - n + 1)
            - math.lgamma(S + 1)
        )
        if n == 1:
            (client,) = stats.supporting_clients
            singletons[client] = singletons.get(client, 0) + 1
    for m in singletons.values():
        total += math.lgamma(m + 1)
    return total


def run_matching(
    locals_: list[LocalModelNeurons],
    config: MatchConfig,
) -> tuple[AssignmentState, np.ndarray]:
    """Alternate ``assign_client`` over all clients until a full pass leaves
    every assignment unchanged, or ``max_passes`` is hit. Returns the final
    state and the stacked posterior means of the global atoms."""
    config.validate()
    if not locals_:
        raise ShapeMismatchError("need at least one client")
    dims = {l.neurons.shape[1] for l in locals_}
    if len(dims) != 1:
        raise ShapeMismatchError(f"clients disagree on neuron dimension: {sorted(dims)}")
    ids = [l.client_id for l in locals_]
    if len(set(ids)) != len(ids):
        raise ShapeMismatchError("duplicate client ids")

    S = len(locals_)
    prior = config.prior_for(dims.pop())
    state = AssignmentState.empty(prior)
    ordered = sorted(locals_, key=lambda l: l.client_id)
    rng = np.random.default_rng(config.seed)

    for pass_idx in range(config.max_passes):
        if config.client_order == "shuffle":
            visit = [ordered[i] for i in rng.permutation(S)]
        else:
            visit = ordered
        before = state.partition()
        for local in visit:
            assign_client(state, local, S, config)
        objective = negative_log_posterior(state, config.gamma0)
        state.pass_objectives.append(objective)
        logger.debug("pass %d: objective %.6f, atoms %d", pass_idx, objective, state.atom_count)
        if state.partition() == before:
            break
    return state, extract_global(state)


def extract_global(state: AssignmentState) -> np.ndarray:
    """Stack the posterior mean of every atom into a J x d matrix."""
    if not state.atoms:
        return np.zeros((0, state.prior.dim))
    return np.stack(
        [np.asarray(a.weighted_sum, dtype=float) / a.precision for a in state.atoms]
    )


def neurons_from_matrix(client_id, matrix, config: MatchConfig) -> LocalModelNeurons:
    """Wrap a raw J x d weight matrix with the client's configured noise."""
    return LocalModelNeurons(
        client_id=client_id,
        neurons=np.asarray(matrix, dtype=float),
        sigma_sq=config.sigma_sq_for(client_id),
    )
