"""Experiment drivers: recovery suite, end-to-end pipeline, lambda sweep.

Everything here is deterministic given the RunConfig (seeds included); the
CLI and the experiment scripts are thin wrappers around these functions.
"""

from __future__ import annotations

import numpy as np

from .generative import (
    RecoveryMetrics,
    SyntheticFederation,
    generate_federation,
    log_size_ratio,
    recovery_metrics,
)
from .matching import LocalModelNeurons, MatchConfig, run_matching
from .modelio import RunConfig
from .network import (
    Fcnn,
    LabeledDataset,
    TrainConfig,
    evaluate,
    fedavg,
    net_of,
    neurons_of,
    synth_data,
    dirichlet_partition,
    train_local,
)


def make_datasets(config: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """One blob task, split class-by-class into train and holdout parts."""
    total = config.per_class + config.holdout_per_class
    full = synth_data(config.K, config.D, total, config.spread, config.seed)
    train_idx = []
    holdout_idx = []
    for k in range(config.K):
        start = k * total
        train_idx.extend(range(start, start + config.per_class))
        holdout_idx.extend(range(start + config.per_class, start + total))
    train = LabeledDataset(full.features[train_idx], full.labels[train_idx])
    holdout = LabeledDataset(full.features[holdout_idx], full.labels[holdout_idx])
    return train, holdout


def init_net(config: RunConfig, rng: np.random.Generator) -> Fcnn:
    w0 = rng.standard_normal((config.hidden, config.D)) / np.sqrt(config.D)
    w1 = rng.standard_normal((config.K, config.hidden)) / np.sqrt(config.hidden)
    return Fcnn(w0, w1, config.activation)


def train_clients(config: RunConfig):
    """Partition the train split and fit one local net per non-empty shard,
    all from the same random initialization."""
    train, holdout = make_datasets(config)
    shards, proportions = dirichlet_partition(train, config.alpha, config.S, config.seed + 1)
    rng = np.random.default_rng(config.seed + 2)
    base = init_net(config, rng)
    nets: dict[int, Fcnn] = {}
    for s in range(config.S):
        if len(shards[s]) == 0:
            continue
        cfg = TrainConfig(
            lr=config.lr, batch=config.batch, epochs=config.epochs, seed=config.seed + 100 + s
        )
        nets[s] = train_local(base, shards[s], cfg)
    return base, nets, shards, proportions, holdout


def fuse_by_matching(
    nets: dict[int, Fcnn], config: RunConfig, algorithm: str, lam: float
):
    """Match the trained nets' neurons and materialize the fused net."""
    mc = config.match_config()
    mc.algorithm = algorithm
    mc.lam = lam
    locals_ = [
        LocalModelNeurons(client_id=s, neurons=neurons_of(net), sigma_sq=mc.sigma_sq_for(s))
        for s, net in sorted(nets.items())
    ]
    state, global_matrix = run_matching(locals_, mc)
    fused = net_of(global_matrix, config.D, config.K, config.activation)
    return fused, state


def run_pipeline(config: RunConfig) -> dict[str, float]:
    """Train S locals on a Dirichlet-heterogeneous split, fuse them with
    matching (both cost variants) and coordinate averaging, and score
    everything on the held-out split."""
    config.validate()
    _, nets, shards, _, holdout = train_clients(config)
    if not nets:
        raise ValueError("every client shard is empty; increase per_class or alpha")
    ids = sorted(nets)
    sizes = np.array([len(shards[s]) for s in ids], dtype=float)
    avg_net = fedavg([nets[s] for s in ids], sizes / sizes.sum())

    nafi_net, nafi_state = fuse_by_matching(nets, config, "nafi", config.lam)
    pfnm_net, pfnm_state = fuse_by_matching(nets, config, "pfnm", 0.0)
    total_neurons = sum(neurons_of(net).shape[0] for net in nets.values())

    local_accs = [evaluate(nets[s], holdout) for s in ids]
    metrics = {
        "acc_nafi": evaluate(nafi_net, holdout),
        "acc_pfnm": evaluate(pfnm_net, holdout),
        "acc_fedavg": evaluate(avg_net, holdout),
        "acc_local_mean": float(np.mean(local_accs)),
        "j_nafi": nafi_state.atom_count,
        "j_pfnm": pfnm_state.atom_count,
        "log_size_ratio_nafi": log_size_ratio(nafi_state.atom_count, total_neurons),
        "log_size_ratio_pfnm": log_size_ratio(pfnm_state.atom_count, total_neurons),
        "n_clients_trained": len(nets),
        "n_empty_shards": config.S - len(nets),
    }
    return metrics


SWEEP_COLUMNS = [
    "lambda",
    "acc_nafi",
    "acc_pfnm",
    "acc_fedavg",
    "acc_local_mean",
    "j_nafi",
    "log_size_ratio_nafi",
]

DEFAULT_LAMBDA_GRID = [1e-8, 1e-3, 1e-2, 1e-1, 0.5, 1.0]


def run_sweep(config: RunConfig, grid: list[float]) -> tuple[list[str], list[list[float]]]:
    """Pipeline metrics per lambda with shared seeds. Training does not
    depend on lambda, so the locals are fit once; the resulting rows are
    identical to independent ``run_pipeline`` calls."""
    config.validate()
    if not grid:
        raise ValueError("empty lambda grid")
    _, nets, shards, _, holdout = train_clients(config)
    if not nets:
        raise ValueError("every client shard is empty; increase per_class or alpha")
    ids = sorted(nets)
    sizes = np.array([len(shards[s]) for s in ids], dtype=float)
    avg_net = fedavg([nets[s] for s in ids], sizes / sizes.sum())
    acc_fedavg = evaluate(avg_net, holdout)
    acc_local = float(np.mean([evaluate(nets[s], holdout) for s in ids]))
    pfnm_net, _ = fuse_by_matching(nets, config, "pfnm", 0.0)
    acc_pfnm = evaluate(pfnm_net, holdout)
    total_neurons = sum(neurons_of(net).shape[0] for net in nets.values())

    rows = []
    for lam in grid:
        nafi_net, nafi_state = fuse_by_matching(nets, config, "nafi", lam)
        rows.append(
            [
                lam,
                evaluate(nafi_net, holdout),
                acc_pfnm,
                acc_fedavg,
                acc_local,
                nafi_state.atom_count,
                log_size_ratio(nafi_state.atom_count, total_neurons),
            ]
        )
    return SWEEP_COLUMNS, rows


def recovery_config(fed: SyntheticFederation, algorithm: str, lam: float) -> MatchConfig:
    """Matching configuration aligned with a federation's own generator
    parameters."""
    return MatchConfig(
        gamma0=fed.gamma0,
        sigma0_sq=fed.sigma0_sq,
        lam=lam,
        algorithm=algorithm,
    )


def recovery_run(fed: SyntheticFederation, mc: MatchConfig) -> RecoveryMetrics:
    state, _ = run_matching(fed.locals, mc)
    return recovery_metrics(fed, state)


def recovery_suite(
    n_seeds: int,
    base_seed: int,
    *,
    gamma0: float,
    S: int,
    dim: int,
    sigma0_sq: float,
    sigma_s_sq: float,
    selection_mode: str = "bernoulli",
    bernoulli_p: float = 0.8,
    n_atoms: int | None = None,
    lam: float = 0.01,
    algorithms: tuple[str, ...] = ("nafi", "pfnm"),
) -> dict[str, list[RecoveryMetrics]]:
    """Ground-truth recovery over a batch of seeded federations."""
    results: dict[str, list[RecoveryMetrics]] = {a: [] for a in algorithms}
    for i in range(n_seeds):
        fed = generate_federation(
            gamma0=gamma0,
            S=S,
            dim=dim,
            sigma0_sq=sigma0_sq,
            sigma_s_sq=sigma_s_sq,
            seed=base_seed + i,
            selection_mode=selection_mode,
            bernoulli_p=bernoulli_p,
            n_atoms=n_atoms,
        )
        for algorithm in algorithms:
            mc = recovery_config(fed, algorithm, lam if algorithm == "nafi" else 0.0)
            results[algorithm].append(recovery_run(fed, mc))
    return results
