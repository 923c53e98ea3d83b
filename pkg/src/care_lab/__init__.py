"""Desk-scale collaborative action recognition with a meta-trained relevance
evaluator, plus the matching synthetic benchmark and evaluation toolkit."""

from .model import (CareConfig, CareParams, RelevanceWeights, ablated_forward,
                    approximate_specific, classify, elaborate,
                    evaluate_relevance, extract_base, forward_seen,
                    forward_unseen)
from .synth import TaskSpec, make_benchmark, signal_audit
from .training import Hyperparams, MetaSplit, TrainLog, train

__version__ = "0.1.0"

__all__ = [
    "CareConfig", "CareParams", "RelevanceWeights", "ablated_forward",
    "approximate_specific", "classify", "elaborate", "evaluate_relevance",
    "extract_base", "forward_seen", "forward_unseen",
    "TaskSpec", "make_benchmark", "signal_audit",
    "Hyperparams", "MetaSplit", "TrainLog", "train",
]
