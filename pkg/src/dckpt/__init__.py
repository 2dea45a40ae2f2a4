"""Transparent coordinated checkpoint/restart for distributed process trees."""

from __future__ import annotations

from .coordinator import Coordinator, CoordinatorClient, CoordinatorServer
from .core import (BarrierName, CheckpointImage, ConnectionInfoTable, DescriptorKind,
                   DescriptorRecord, GlobalSocketId, Role, VirtualPid, assign_virtual_pid)
from .errors import CheckpointError
from .restart import (rearrange_descriptors, restart_sim, restart_sim_by_host,
                      restart_sim_from_script, restore_shared_memory)
from .simnet import Cluster, RunOutcome, SimFilesystem
from .storage import parse_image, serialize_image
from .workload import parse_workload

__version__ = "0.1.0"

__all__ = [
    "BarrierName", "CheckpointError", "CheckpointImage", "Cluster", "ConnectionInfoTable",
    "Coordinator", "CoordinatorClient", "CoordinatorServer", "DescriptorKind", "DescriptorRecord",
    "GlobalSocketId", "Role", "RunOutcome", "SimFilesystem", "VirtualPid", "assign_virtual_pid",
    "parse_image", "parse_workload", "rearrange_descriptors", "restart_sim", "restart_sim_by_host",
    "restart_sim_from_script", "restore_shared_memory", "serialize_image",
]
