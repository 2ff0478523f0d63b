"""Deterministic federated self-supervised learning simulator.

Pretrains small audio-like encoders with contrastive, feature-matching, or
clip-order pretext tasks across non-iid simulated clients, aggregates with a
pluggable strategy family (full-model or backbone-only transceiving), and
tracks the per-downstream-task optimal global model via kNN retrieval.
"""

from .aggregation import ClientUpdate, Strategy, aggregate, scope_apply
from .autodiff import Graph, Tensor, backward
from .data import Clip, Partition, SynthDataset, dirichlet_partition, downstream_suite, synth_dataset
from .evaluator import OptimaTracker, TaskAccuracy, evaluate_global, knn_retrieval_accuracy, update_optima
from .model import EncoderConfig, ParamTree, encode, init_encoder, merge, sgd_step, split
from .orchestrator import RunConfig, RunResult, local_train, run, run_round, sample_clients

__version__ = "0.1.0"

__all__ = [
    "ClientUpdate",
    "Strategy",
    "aggregate",
    "scope_apply",
    "Graph",
    "Tensor",
    "backward",
    "Clip",
    "Partition",
    "SynthDataset",
    "dirichlet_partition",
    "downstream_suite",
    "synth_dataset",
    "OptimaTracker",
    "TaskAccuracy",
    "evaluate_global",
    "knn_retrieval_accuracy",
    "update_optima",
    "EncoderConfig",
    "ParamTree",
    "encode",
    "init_encoder",
    "merge",
    "sgd_step",
    "split",
    "RunConfig",
    "RunResult",
    "local_train",
    "run",
    "run_round",
    "sample_clients",
    "__version__",
]
