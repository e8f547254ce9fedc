"""Synthetic federations with known ground truth.

Instances follow the same generative story the matcher assumes: global atoms
drawn from the prior, per-client atom subsets from a buffet-process (or an
explicit Bernoulli grid for controlled difficulty), a random permutation per
client, and isotropic Gaussian observation noise. Because the true atom of
every local neuron is recorded, recovery of the assignment structure can be
scored exactly.

All sampling flows through one ``numpy.random.default_rng(seed)`` per
federation. Draw order: in ``bernoulli`` mode atoms, then selection
(redrawn on degenerate instances), then per client its permutation and
noise; in ``ibp`` mode the selection comes first because the atom count is
only known afterwards. The serialized instance, not generator equality, is
the cross-implementation contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInstanceError, ShapeMismatchError
from .lap import lap_min
from .matching import AssignmentState, LocalModelNeurons, extract_global

# Noise variance stored on locals when the generator runs with sigma_s = 0;
# LocalModelNeurons requires a positive value.
_MIN_SIGMA_SQ = 1e-12


@dataclass(frozen=True)
class StickWeights:
    """Decreasing stick weights q_i = prod_{g<=i} v_g with v_g ~ Beta(gamma0, 1)."""

    weights: np.ndarray
    truncation: int


def sample_stick_breaking(gamma0: float, truncation: int, seed) -> StickWeights:
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    rng = np.random.default_rng(seed)
    fractions = rng.beta(gamma0, 1.0, size=truncation)
    return StickWeights(weights=np.cumprod(fractions), truncation=truncation)


def sample_ibp(gamma0: float, S: int, seed) -> np.ndarray:
    """Binary S x J selection matrix from the buffet process.

    Customer 1 takes Poisson(gamma0) dishes; customer s keeps each existing
    dish with probability n_i / s (n_i = takers among customers 1..s-1) and
    adds Poisson(gamma0 / s) new ones. One vectorized uniform draw per
    customer for the existing dishes, then one Poisson draw.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    rng = np.random.default_rng(seed)
    counts: list[int] = []
    taken: list[list[int]] = []
    for s in range(1, S + 1):
        take = []
        if counts:
            keep = rng.random(len(counts)) < np.array(counts, dtype=float) / s
            for i in np.flatnonzero(keep):
                take.append(int(i))
                counts[i] += 1
        for _ in range(rng.poisson(gamma0 / s)):
            take.append(len(counts))
            counts.append(1)
        taken.append(take)
    matrix = np.zeros((S, len(counts)), dtype=np.int8)
    for s, take in enumerate(taken):
        matrix[s, take] = 1
    return matrix


@dataclass
class SyntheticFederation:
    """Ground-truth atoms plus the noisy per-client observations of them."""

    atoms: np.ndarray
    selection: np.ndarray
    permutations: list[np.ndarray]
    locals: list[LocalModelNeurons]
    truth_assignment: dict[int, np.ndarray]
    gamma0: float
    sigma0_sq: float
    sigma_s_sq: float
    seed: int
    selection_mode: str

    @property
    def n_clients(self) -> int:
        return len(self.locals)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    def truth_labels(self) -> np.ndarray:
        """True atom index per local neuron, flattened in client order."""
        return np.concatenate(
            [self.truth_assignment[l.client_id] for l in self.locals]
        )


def generate_federation(
    gamma0: float,
    S: int,
    dim: int,
    sigma0_sq: float,
    sigma_s_sq: float,
    seed: int,
    selection_mode: str = "ibp",
    bernoulli_p: float = 0.8,
    n_atoms: int | None = None,
    mu0: np.ndarray | None = None,
    max_retries: int = 50,
) -> SyntheticFederation:
    """Sample a full federation. ``selection_mode`` is ``ibp`` or
    ``bernoulli``; the latter needs ``n_atoms`` and keeps each (client, atom)
    pair independently with probability ``bernoulli_p``, dropping atoms no
    client selected.

    A client with zero atoms makes the instance degenerate; the selection is
    redrawn up to ``max_retries`` times before raising.
    """
    if dim < 1 or S < 1:
        raise ValueError("dim and S must be >= 1")
    if selection_mode not in ("ibp", "bernoulli"):
        raise ValueError(f"unknown selection_mode {selection_mode!r}")
    if selection_mode == "bernoulli":
        if n_atoms is None or n_atoms < 1:
            raise ValueError("bernoulli selection needs n_atoms >= 1")
        if not 0 < bernoulli_p <= 1:
            raise ValueError("bernoulli_p must be in (0, 1]")
    rng = np.random.default_rng(seed)
    mean0 = np.zeros(dim) if mu0 is None else np.asarray(mu0, dtype=float)

    atoms = None
    if selection_mode == "bernoulli":
        atoms = mean0 + math.sqrt(sigma0_sq) * rng.standard_normal((n_atoms, dim))

    selection = None
    for _ in range(max_retries):
        if selection_mode == "ibp":
            candidate = sample_ibp(gamma0, S, rng.integers(0, 2**63 - 1))
        else:
            candidate = (rng.random((S, n_atoms)) < bernoulli_p).astype(np.int8)
        if candidate.shape[1] > 0 and (candidate.sum(axis=1) > 0).all():
            selection = candidate
            break
    if selection is None:
        raise DegenerateInstanceError(
            f"no usable selection after {max_retries} draws (some client empty)"
        )

    if selection_mode == "ibp":
        atoms = mean0 + math.sqrt(sigma0_sq) * rng.standard_normal(
            (selection.shape[1], dim)
        )
    else:
        used = selection.sum(axis=0) > 0
        atoms = atoms[used]
        selection = selection[:, used]

    permutations = []
    locals_ = []
    truth = {}
    for s in range(S):
        chosen = np.flatnonzero(selection[s])
        perm = rng.permutation(len(chosen))
        ordered = chosen[perm]
        noise = math.sqrt(sigma_s_sq) * rng.standard_normal((len(ordered), dim))
        permutations.append(perm)
        locals_.append(
            LocalModelNeurons(
                client_id=s,
                neurons=atoms[ordered] + noise,
                sigma_sq=max(sigma_s_sq, _MIN_SIGMA_SQ),
            )
        )
        truth[s] = ordered
    return SyntheticFederation(
        atoms=atoms,
        selection=selection,
        permutations=permutations,
        locals=locals_,
        truth_assignment=truth,
        gamma0=gamma0,
        sigma0_sq=sigma0_sq,
        sigma_s_sq=sigma_s_sq,
        seed=seed,
        selection_mode=selection_mode,
    )


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-adjusted agreement of two labelings of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError("labelings must be equal-length vectors")
    n = a.shape[0]
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        # Both partitions trivial (all singletons or a single block), which
        # forces them identical; agreement is perfect by convention.
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class RecoveryMetrics:
    exact_match: float
    ari: float
    j_inferred: int
    j_true: int
    atom_count_error: int
    mean_atom_distance: float
    log_size_ratio: float


def recovery_metrics(truth: SyntheticFederation, inferred: AssignmentState) -> RecoveryMetrics:
    """Score an inferred assignment against the generator's ground truth."""
    inferred_labels = []
    true_labels = []
    for local in truth.locals:
        cid = local.client_id
        if cid not in inferred.per_client:
            raise ShapeMismatchError(f"inferred state lacks client {cid}")
        assign = inferred.per_client[cid]
        if len(assign) != local.count:
            raise ShapeMismatchError(f"client {cid} neuron count mismatch")
        inferred_labels.extend(int(i) for i in assign)
        true_labels.extend(int(t) for t in truth.truth_assignment[cid])
    inferred_labels = np.array(inferred_labels)
    true_labels = np.array(true_labels)

    groups_inf = {}
    groups_true = {}
    for idx, (li, lt) in enumerate(zip(inferred_labels, true_labels)):
        groups_inf.setdefault(li, set()).add(idx)
        groups_true.setdefault(lt, set()).add(idx)
    exact = sum(
        1
        for idx, (li, lt) in enumerate(zip(inferred_labels, true_labels))
        if groups_inf[li] == groups_true[lt]
    )

    means = extract_global(inferred)
    j_inf = means.shape[0]
    j_true = truth.n_atoms
    dist = np.linalg.norm(means[:, None, :] - truth.atoms[None, :, :], axis=2)
    if j_inf >= j_true:
        _, total = lap_min(dist)
        mean_dist = total / j_true
    else:
        _, total = lap_min(dist.T)
        mean_dist = total / j_inf

    total_neurons = sum(l.count for l in truth.locals)
    return RecoveryMetrics(
        exact_match=exact / len(true_labels),
        ari=adjusted_rand_index(true_labels, inferred_labels),
        j_inferred=j_inf,
        j_true=j_true,
        atom_count_error=abs(j_inf - j_true),
        mean_atom_distance=float(mean_dist),
        log_size_ratio=log_size_ratio(j_inf, total_neurons),
    )


def log_size_ratio(j: int, total: int) -> float:
    """log10 of the fused-to-total model size ratio; <= 0 since j <= total."""
    if not 1 <= j <= total:
        raise ValueError(f"need 1 <= j <= total, got j={j}, total={total}")
    return math.log10(j / total)
