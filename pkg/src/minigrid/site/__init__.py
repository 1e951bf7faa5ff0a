"""Site-side services: storage elements, computing elements and transfer daemons."""

from .agents import (
    BatchAdapter,
    BatchRefused,
    ComputingElementAgent,
    FailingBatch,
    FifoBatch,
    FtdAgent,
    ProcessMonitor,
    ce_poll_cycle,
    ftd_cycle,
    gateway_route,
    make_batch,
)
from .execution import Outcome, run_command
from .storage import CACHE, PERMANENT, Blob, StorageElement, se_fetch, se_store

__all__ = [
    "BatchAdapter", "BatchRefused", "Blob", "CACHE", "ComputingElementAgent", "FailingBatch", "FifoBatch",
    "FtdAgent", "Outcome", "PERMANENT", "ProcessMonitor", "StorageElement", "ce_poll_cycle", "ftd_cycle",
    "gateway_route", "make_batch", "run_command", "se_fetch", "se_store",
]
