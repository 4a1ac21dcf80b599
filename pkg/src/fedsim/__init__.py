"""fedsim: a deterministic cross-device federated-learning simulator.

Partitions labeled datasets across simulated agents (IID or label-skewed),
runs sampled local SGD on small differentiable models, aggregates with
FedAvg / FedSGD, and records round-, agent- and profiler-level telemetry.
Every run is a pure function of its configuration and seed.
"""

from .datamodules import (
    LabeledDataset,
    PartitionPlan,
    Shard,
    load_csv,
    load_idx,
    partition_iid,
    partition_niid,
    shard_label_histogram,
    synth_blobs,
)
from .federated import (
    AgentState,
    AgentUpdate,
    ExperimentReport,
    FLConfig,
    GlobalModelState,
    aggregate_fedavg,
    aggregate_fedsgd,
    compute_weights,
    evaluate,
    local_gradient,
    local_train,
    pretrain,
    run_experiment,
    sample_agents,
)
from .numerics import (
    ModelSpec,
    ParamCountReport,
    TrainableMask,
    backward,
    count_params,
    cross_entropy,
    forward,
    init_params,
    sgd_step,
)
from .paramfile import read_params, write_params
from .profiler import Profiler, render_report
from .telemetry import (
    AgentRecord,
    CsvSink,
    JsonlSink,
    NullSink,
    ProfileEntry,
    RoundReport,
    read_jsonl,
)

__version__ = "0.1.0"
