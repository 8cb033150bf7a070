"""Cross-silo federated learning at desk scale: endpoints, FedAvg, LoRA
adapters and dual-Dirichlet non-IID partitioning."""

from .adapters import (
    LLAMA2_7B,
    AdapterSpec,
    AdapterState,
    ArchitectureProfile,
    effective_weight,
    extract_trainable,
    init_adapter,
    merge_trainable,
    trainable_bytes,
)
from .aggregate import ClientUpdate, check_barrier, fedavg
from .partition import PartitionConfig, PartitionPlan, dual_dirichlet_partition, partition_report, sample_dirichlet
from .taskdata import Dataset, format_prompt, profile_for, render_prompt, synth_dataset
from .tensor import F32, F64, ModelState, Tensor, decode_state, encode_state, state_get
from .trainer import ModelSpec, ToyModel, TrainerConfig, cross_entropy, evaluate, local_train

from .estimators import AdapterClassifier, FederatedClassifier

__version__ = "0.1.0"
