"""Online policies: case-based capacity provisioning at slot boundaries and
greedy marginal-throughput scheduling at rescheduling granularity, plus the
run-to-completion guard that protects delay SLOs.

Provisioning retrieves the nearest historical cases and follows them,
hedging on evidence of trouble: recent delay violations escalate from the
mean matched capacity to the max, and violations combined with poor match
quality fall all the way back to carbon-agnostic full capacity.

Scheduling admits (job, scale) steps in decreasing marginal-throughput
order above the learned threshold; since every job's base scale carries
marginal 1, all admitted jobs receive their minimum before anyone scales,
which also rules out starvation among admitted jobs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError
from .learning import KnowledgeBase, SystemState, query
from .model import Job


@dataclass(frozen=True)
class ProvisioningParams:
    """Knobs of the provisioning policy.

    ``delta`` is the acceptable mean match distance in normalized feature
    space; ``epsilon`` the tolerated fraction of recently completed jobs
    that missed their deadline; ``violation_window_slots`` the lookback for
    that fraction. ``distance_agg`` picks how match distances collapse to
    one number (mean by default).
    """

    kk: int = 5
    delta: float = 0.5
    epsilon: float = 0.1
    violation_window_slots: int = 1
    distance_agg: str = "mean"

    def __post_init__(self):
        if self.kk < 1:
            raise DomainError("kk must be >= 1")
        if self.delta < 0:
            raise DomainError("delta must be >= 0")
        if not 0.0 <= self.epsilon <= 1.0:
            raise DomainError("epsilon must be in [0, 1]")
        if self.distance_agg not in ("mean", "max"):
            raise DomainError("distance_agg must be 'mean' or 'max'")


@dataclass(frozen=True)
class ProvisionDecision:
    capacity: int
    threshold: float
    mode: str  # "mean", "max-fallback" or "full-fallback"
    matched_distances: tuple[float, ...] = ()


def provision(
    state: SystemState,
    kb: KnowledgeBase | None,
    params: ProvisioningParams,
    violation_rate: float,
    max_capacity: int,
) -> ProvisionDecision:
    """Pick the slot's capacity and admission threshold from the knowledge
    base, falling back toward full capacity when recent jobs violated their
    deadlines and the retrieved cases are poor matches."""
    if kb is None or len(kb) == 0:
        return ProvisionDecision(capacity=max_capacity, threshold=0.0, mode="full-fallback")
    matches = query(kb, state, params.kk)
    distances = tuple(d for _, d in matches)
    if params.distance_agg == "max":
        agg_distance = max(distances)
    else:
        agg_distance = sum(distances) / len(distances)
    troubled = violation_rate > params.epsilon
    if troubled and agg_distance > params.delta:
        return ProvisionDecision(
            capacity=max_capacity, threshold=0.0, mode="full-fallback",
            matched_distances=distances,
        )
    nearest_threshold = matches[0][0].threshold
    if troubled:
        capacity = max(case.capacity for case, _ in matches)
        mode = "max-fallback"
    else:
        mean = sum(case.capacity for case, _ in matches) / len(matches)
        capacity = math.floor(mean + 0.5)  # round half up to whole servers
        mode = "mean"
    capacity = min(max(capacity, 0), max_capacity)
    return ProvisionDecision(
        capacity=capacity, threshold=nearest_threshold, mode=mode,
        matched_distances=distances,
    )


def force_run_guard(t: float, jobs: list[Job], remaining_work: dict[str, float]) -> set[str]:
    """Jobs whose remaining work at base scale no longer fits before their
    deadline. Callers keep returned jobs pinned until completion; pinned
    jobs bypass the admission threshold and receive base scale first."""
    forced = set()
    for job in jobs:
        remaining = remaining_work.get(job.id, job.length)
        if remaining >= job.deadline - t - 1e-9:
            forced.add(job.id)
    return forced


def schedule(
    t: float,
    jobs: list[Job],
    m_t: int,
    rho: float,
    forced: set[str] | frozenset[str] = frozenset(),
    max_capacity: int | None = None,
) -> dict[str, int]:
    """Allocate servers for one rescheduling step.

    Forced jobs get base scale first, in deadline order, and stretch the
    usable capacity to cover their base scales (never beyond the cluster
    cap). Everything else is admitted per candidate (job, scale) step in
    decreasing marginal-throughput order, threshold-filtered, with earlier
    effective deadlines breaking ties.
    """
    if max_capacity is None:
        max_capacity = m_t
    by_id = {job.id: job for job in jobs}
    forced_jobs = sorted(
        (by_id[j] for j in forced if j in by_id),
        key=lambda job: (job.arrival + job.slack - t, job.id),
    )
    effective = min(max(m_t, sum(j.profile.k_min for j in forced_jobs)), max_capacity)

    alloc: dict[str, int] = {}
    used = 0
    for job in forced_jobs:
        if used + job.profile.k_min <= effective:
            alloc[job.id] = job.profile.k_min
            used += job.profile.k_min

    candidates = []
    for job in jobs:
        for k in range(job.profile.k_min, job.profile.k_max + 1):
            p = job.profile.marginal_at(k)
            # Base scale admits at the threshold itself, otherwise a learned
            # threshold of 1.0 (every job at base scale) would idle the cluster.
            if k == job.profile.k_min:
                if p < rho:
                    continue
            elif p <= rho:
                continue
            candidates.append((-p, job.arrival + job.slack - t, job.id, k))
    candidates.sort()

    for _negp, _slack, jid, k in candidates:
        current = alloc.get(jid, 0)
        if k <= current:
            continue
        if used - current + k > effective:
            continue
        used = used - current + k
        alloc[jid] = k
    return alloc


@dataclass
class ViolationTracker:
    """Sliding-window record of completions used to steer provisioning
    fallbacks. One instance per simulation; not thread-safe."""

    window_slots: float = 1.0
    completions: list[tuple[float, bool]] = field(default_factory=list)

    def record_completion(self, job: Job, finish_time: float) -> float:
        """Record a completion and return the violation rate over the window
        ending at it."""
        if finish_time < job.arrival:
            raise DomainError(f"job {job.id!r} finished before it arrived")
        late = finish_time > job.deadline + 1e-9
        self.completions.append((finish_time, late))
        return self.rate_at(finish_time)

    def rate_at(self, now: float) -> float:
        """Fraction of completions within the lookback window that violated
        their deadline; 0 when the window is empty."""
        recent = [late for finish, late in self.completions
                  if now - self.window_slots <= finish <= now]
        if not recent:
            return 0.0
        return sum(recent) / len(recent)
