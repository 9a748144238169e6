"""Deterministic flow-migration simulator and consistency property checkers."""

from flowmig.core import (
    Event,
    FlowKey,
    MalformedTraceError,
    OutputSeq,
    Packet,
    Trace,
    merge_by_timestamp,
    project_trace,
)
from flowmig.nf import NFState, StateDelta, StateUpdateMessage, StepResult, get_nf, nf_apply

__all__ = [
    "Event",
    "FlowKey",
    "MalformedTraceError",
    "NFState",
    "OutputSeq",
    "Packet",
    "StateDelta",
    "StateUpdateMessage",
    "StepResult",
    "Trace",
    "get_nf",
    "merge_by_timestamp",
    "nf_apply",
    "project_trace",
]
