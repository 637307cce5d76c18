"""Carbon-aware provisioning and scheduling simulator for elastic batch
clusters: an offline optimal scheduler, a case-based online policy learned
from it, four published baselines, and a trace-driven comparison harness.
"""

from .model import (
    CarbonTrace,
    ClusterConfig,
    Job,
    QueueConfig,
    ScalingProfile,
    Schedule,
    cumulative_throughput,
    progress,
    slot_energy,
    total_carbon,
)
from .oracle import OracleResult, brute_force_schedule, oracle_schedule, retry_with_extension
from .learning import Case, KnowledgeBase, SystemState, extract_cases, featurize, query, refresh
from .policy import ProvisionDecision, ProvisioningParams, force_run_guard, provision
from .sim import PolicyStats, SimOutcome, compare, run_execution, run_learning

__version__ = "0.1.0"

__all__ = [
    "CarbonTrace",
    "Case",
    "ClusterConfig",
    "Job",
    "KnowledgeBase",
    "OracleResult",
    "PolicyStats",
    "ProvisionDecision",
    "ProvisioningParams",
    "QueueConfig",
    "ScalingProfile",
    "Schedule",
    "SimOutcome",
    "SystemState",
    "brute_force_schedule",
    "compare",
    "cumulative_throughput",
    "extract_cases",
    "featurize",
    "force_run_guard",
    "oracle_schedule",
    "progress",
    "provision",
    "query",
    "refresh",
    "retry_with_extension",
    "run_execution",
    "run_learning",
    "slot_energy",
    "total_carbon",
]
