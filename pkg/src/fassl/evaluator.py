"""Downstream retrieval evaluation and per-task best-model tracking.

Evaluation is training-free: test-set features query the training-set
features, and a query counts as correct when its true class appears among
the classes of its k nearest training samples. The tracker keeps, per task,
the best accuracy seen so far together with the round and checkpoint that
produced it, replacing only on strict improvement (ties keep the earlier
model).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor
from .data import SynthDataset
from .errors import ContractError
from .model import ParamTree, encode, project


@dataclass(frozen=True)
class TaskAccuracy:
    task: str
    round: int
    top1_retrieval: float
    k: int

    def __post_init__(self):
        if not 0.0 <= self.top1_retrieval <= 1.0:
            raise ContractError(f"accuracy must lie in [0, 1], got {self.top1_retrieval}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def knn_retrieval_accuracy(
    train_feats,
    train_labels,
    test_feats,
    test_labels,
    k: int,
    metric: str = "cosine",
) -> float:
    """Fraction of test queries whose class appears among the k nearest train rows.

    Cosine distance is 1 - cosine similarity on eps-normalized rows
    (invariant to any common positive feature scaling); "euclidean" is the
    flag-switchable alternative. Distance ties resolve to the lower
    training index.
    """
    train = _as_array(train_feats)
    test = _as_array(test_feats)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train.ndim != 2 or test.ndim != 2 or train.shape[1] != test.shape[1]:
        raise ContractError(f"feature shapes disagree: train {train.shape}, test {test.shape}")
    if train.shape[0] == 0 or test.shape[0] == 0:
        raise ContractError("knn retrieval needs non-empty train and test sets")
    if k < 1 or k > train.shape[0]:
        raise ContractError(f"k must lie in [1, {train.shape[0]}], got {k}")
    if metric == "cosine":
        dist = 1.0 - kernels.pairwise_cosine(test, train)
    elif metric == "euclidean":
        d2 = ((test[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        dist = np.sqrt(d2)
    else:
        raise ContractError(f"unknown metric {metric!r}")
    hits = kernels.topk_hits(dist, train_labels, test_labels, k)
    return float(hits.sum()) / test.shape[0]


def _dataset_features(w_g: ParamTree, dataset: SynthDataset, feature_layer: str) -> np.ndarray:
    emb = encode(w_g, Tensor(dataset.feature_matrix()))
    if feature_layer == "projection":
        emb = project(w_g, emb)
    elif feature_layer != "backbone":
        raise ContractError(f"unknown feature layer {feature_layer!r}")
    return emb.data


def evaluate_global(
    w_g: ParamTree,
    tasks: list[tuple[str, SynthDataset, SynthDataset]],
    k: int,
    round_idx: int = 0,
    feature_layer: str = "backbone",
    metric: str = "cosine",
) -> list[TaskAccuracy]:
    """Retrieval accuracy of the global model on every downstream task.

    Runs outside any autodiff graph; the model is never modified.
    """
    if not tasks:
        raise ContractError("evaluate_global needs at least one task")
    out = []
    for name, train, test in tasks:
        acc = knn_retrieval_accuracy(
            _dataset_features(w_g, train, feature_layer),
            train.labels(),
            _dataset_features(w_g, test, feature_layer),
            test.labels(),
            k,
            metric=metric,
        )
        out.append(TaskAccuracy(task=name, round=round_idx, top1_retrieval=acc, k=k))
    return out


@dataclass
class TaskBest:
    accuracy: float
    round: int
    checkpoint: str


@dataclass
class OptimaTracker:
    """Per-task record of the best global model seen so far (strict improvement)."""

    best: dict[str, TaskBest] = field(default_factory=dict)
    last_round: int = -1

    def summary_rows(self) -> list[tuple[str, int, float]]:
        return [(task, b.round, b.accuracy) for task, b in sorted(self.best.items())]


def update_optima(
    tracker: OptimaTracker,
    round_idx: int,
    accs: list[TaskAccuracy],
    checkpoint: str,
) -> OptimaTracker:
    """Install strictly better accuracies; on ties the earlier round stays."""
    if round_idx <= tracker.last_round:
        raise ContractError(
            f"rounds must be presented in increasing order ({round_idx} after {tracker.last_round})"
        )
    tracker.last_round = round_idx
    for acc in accs:
        cur = tracker.best.get(acc.task)
        if cur is None or acc.top1_retrieval > cur.accuracy:
            tracker.best[acc.task] = TaskBest(
                accuracy=acc.top1_retrieval, round=round_idx, checkpoint=checkpoint
            )
    return tracker


def optima_csv(tracker: OptimaTracker) -> str:
    lines = ["task,best_round,best_accuracy"]
    for task, rnd, acc in tracker.summary_rows():
        lines.append(f"{task},{rnd},{acc:.6f}")
    return "\n".join(lines) + "\n"
