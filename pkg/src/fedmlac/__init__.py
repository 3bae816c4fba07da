"""Deterministic federated-learning simulator for mutual-learning FL with
layer-wise pruning aggregation, plus FedAvg/FedProx baselines."""

from .client import (
    ClientState,
    ClientUpload,
    LocalUpdateConfig,
    fedavg_update,
    fedmlac_update,
    fedprox_update,
    make_heterogeneous_fleet,
)
from .data import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    group_partition,
    inject_gaussian_noise,
    inject_label_errors,
    load_feature_csv,
    synth_gaussian_mixture,
)
from .nn import (
    Batch,
    LayerParams,
    ModelParams,
    ModelSpec,
    client_loss_and_grads,
    cross_entropy,
    forward,
    init_model,
    kl_divergence,
    plugin_loss_and_grads,
    sgd_step,
    softmax,
)
from .orchestrator import (
    AdversaryConfig,
    DataConfig,
    FederationConfig,
    ModelConfig,
    RoundRecord,
    evaluate,
    rate_check,
    run_round,
    run_simulation,
    sample_clients,
)
from .server import (
    AggregationConfig,
    fedavg_aggregate,
    layer_deviations,
    layer_mean,
    lpa_aggregate,
    trusted_set,
)

__version__ = "0.1.0"
