"""Temporal knowledge graph model with point-process event intensities."""

from .data import EventLog, EventRecord, parse_event_log, read_event_log, simulate, split_by_time
from .evaluation import evaluate_links, evaluate_time, mean_gap_baseline
from .model import Dims, DynamicState, ModelParams, load_params, save_params
from .training import TrainConfig, train_global_bptt

__all__ = [
    "Dims",
    "DynamicState",
    "EventLog",
    "EventRecord",
    "ModelParams",
    "TrainConfig",
    "evaluate_links",
    "evaluate_time",
    "load_params",
    "mean_gap_baseline",
    "parse_event_log",
    "read_event_log",
    "save_params",
    "simulate",
    "split_by_time",
    "train_global_bptt",
]
