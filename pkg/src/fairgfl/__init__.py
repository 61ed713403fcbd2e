"""Fairness-aware federated learning over overlapping graph partitions."""

from .graph import (
    GraphFormatError,
    ValidationError,
    GlobalGraph,
    ClientSubgraph,
    PartitionSpec,
    load_graph,
    generate_sbm,
    induced_subgraph,
    partition,
    true_overlap_matrices,
)
from .gcn import (
    NumericError,
    GcnModel,
    GradientSet,
    NormalizedAdjacency,
    init_model,
    normalize_adjacency,
    forward,
    loss_and_grad,
    masked_loss,
    sgd_step,
    save_checkpoint,
    load_checkpoint,
)
from .ldp import (
    LdpParams,
    Encoder,
    PermanentCache,
    SanitizedBatch,
    train_encoder,
    node_grid_probs,
    perturb_node,
    perturb_links,
    expected_density,
    sparsify_correct,
    sanitize_batch,
)
from .overlap import (
    ESTIMATOR_MODES,
    MatchResult,
    OverlapState,
    match_nodes,
    estimate_node_ratio,
    estimate_link_ratio,
    update_state,
    client_overall_ratio,
    calibrate_tau,
)
from .metrics import (
    RoundRecord,
    loss_variance,
    loss_entropy,
    evaluate_global,
    write_round_records,
    read_round_records,
)
from .federation import (
    ALGORITHMS,
    RoundError,
    FedConfig,
    ClientReport,
    LdpContext,
    ExperimentResult,
    sample_clients,
    client_round,
    aggregate_fair,
    aggregate_fedavg,
    aggregate_qfedavg,
    fairness_weighted_loss,
    split_nodes,
    run_experiment,
)

__version__ = "0.1.0"
