"""Adaptive retrieval-augmented reasoning: trajectory search over a BM25
index, training-data synthesis, inference and evaluation."""

from .core import (
    Action,
    Document,
    Parametric,
    QAInstance,
    Retrieved,
    Reward,
    State,
    Step,
    Trajectory,
    append_step,
    retrieval_count,
    rl_shaped_reward,
    trajectory_reward,
)
from .retriever import BM25Params, SearchIndex, build_index, read_corpus

__version__ = "0.1.0"

__all__ = [
    "Action",
    "BM25Params",
    "Document",
    "Parametric",
    "QAInstance",
    "Retrieved",
    "Reward",
    "SearchIndex",
    "State",
    "Step",
    "Trajectory",
    "append_step",
    "build_index",
    "read_corpus",
    "retrieval_count",
    "rl_shaped_reward",
    "trajectory_reward",
]
