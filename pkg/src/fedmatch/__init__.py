"""Bayesian nonparametric matching and fusion of federated neural networks."""

from .errors import (
    ConfigError,
    DegenerateInstanceError,
    DuplicateClientError,
    FedmatchError,
    InternalInvariantError,
    ShapeMismatchError,
    UnknownClientError,
)
from .gaussians import (
    AtomSufficientStats,
    IsotropicGaussian,
    add_observation,
    kl_isotropic,
    log_marginal,
    posterior_from_stats,
    remove_observation,
    sms,
)
from .generative import (
    RecoveryMetrics,
    StickWeights,
    SyntheticFederation,
    adjusted_rand_index,
    generate_federation,
    log_size_ratio,
    recovery_metrics,
    sample_ibp,
    sample_stick_breaking,
)
from .layerwise import (
    BnParams,
    LayeredWeights,
    fold_bn,
    fuse_layerwise,
    layered_forward,
    no_retrain,
)
from .matching import (
    AssignmentState,
    CostMatrix,
    LocalModelNeurons,
    MatchConfig,
    assign_client,
    build_cost_nafi,
    build_cost_pfnm,
    extract_global,
    negative_log_posterior,
    run_matching,
    solve_lap,
)
from .modelio import RunConfig, load_run_config
from .network import (
    Fcnn,
    LabeledDataset,
    TrainConfig,
    dirichlet_partition,
    evaluate,
    fedavg,
    forward,
    net_of,
    neurons_of,
    permute_hidden,
    synth_data,
    train_local,
    weighted_output_layer,
)

__version__ = "0.1.0"
