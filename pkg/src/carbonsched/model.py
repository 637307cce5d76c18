"""Domain model: elastic jobs, cluster configuration, schedules, and the
energy/carbon accounting they share.

Work semantics
--------------
A job's length is expressed in work units, defined as slots at minimum
scale: running one slot at ``k_min`` servers completes exactly one unit.
Running at a higher scale k completes the running sum of the marginal
throughput values up to k. Jobs free their servers at the first sub-slot
(of ``delta_t_minutes`` granularity) where accumulated work reaches the
length; energy in that final slot is prorated by the sub-slots actually
used, so overshoot is never billed.

Energy model
------------
Per slot and job, energy is a compute term (servers x per-server power x
slot hours) plus a network term (network efficiency in W/Gbps applied to
the gigabits moved during the slot). Emissions weight each slot's energy
by the grid carbon intensity of that slot. Paused jobs consume nothing.

All types are immutable value objects after construction and all
operations are pure functions, so everything here is safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .errors import DomainError, TraceRangeError

_EPS = 1e-12

# Threshold recorded for slots where nothing runs; any real marginal
# throughput is <= 1.0, so 2.0 can never admit a job by accident.
IDLE_THRESHOLD = 2.0

# 1 Gb moved at eta W/Gbps costs eta watt-seconds; 3.6e6 Ws per kWh.
_WS_PER_KWH = 3.6e6


@dataclass(frozen=True)
class ScalingProfile:
    """Normalized elastic scaling profile of a batch job.

    ``marginal[i]`` is the throughput added by server ``k_min + i``; the
    value at ``k_min`` is exactly 1 by normalization. ``net_gb_per_slot[i]``
    is the gigabits the job moves per slot when running at that scale.
    """

    profile_id: str
    k_min: int
    k_max: int
    marginal: tuple[float, ...]
    net_gb_per_slot: tuple[float, ...]

    def __post_init__(self):
        if self.k_min < 1 or self.k_max < self.k_min:
            raise DomainError(
                f"profile {self.profile_id!r}: need 1 <= k_min <= k_max, "
                f"got [{self.k_min}, {self.k_max}]"
            )
        n = self.k_max - self.k_min + 1
        if len(self.marginal) != n or len(self.net_gb_per_slot) != n:
            raise DomainError(
                f"profile {self.profile_id!r}: expected {n} scale entries, "
                f"got {len(self.marginal)} marginals / "
                f"{len(self.net_gb_per_slot)} network volumes"
            )
        if self.marginal[0] != 1.0:
            raise DomainError(
                f"profile {self.profile_id!r}: marginal at k_min must be "
                f"exactly 1.0, got {self.marginal[0]}"
            )
        for i, p in enumerate(self.marginal):
            if not (p > 0.0) or not math.isfinite(p):
                raise DomainError(
                    f"profile {self.profile_id!r}: marginal at k={self.k_min + i} "
                    f"must be finite and > 0, got {p}"
                )
            if i > 0 and p > self.marginal[i - 1] + _EPS:
                raise DomainError(
                    f"profile {self.profile_id!r}: marginals must be "
                    f"non-increasing, but p({self.k_min + i}) > p({self.k_min + i - 1})"
                )
        for i, g in enumerate(self.net_gb_per_slot):
            if g < 0.0 or not math.isfinite(g):
                raise DomainError(
                    f"profile {self.profile_id!r}: network volume at "
                    f"k={self.k_min + i} must be finite and >= 0, got {g}"
                )
        cum, running = [], 0.0
        for p in self.marginal:
            running += p
            cum.append(running)
        object.__setattr__(self, "_cum", tuple(cum))

    @property
    def strictly_decreasing(self) -> bool:
        """Whether every extra server adds strictly less throughput."""
        return all(
            self.marginal[i] > self.marginal[i + 1]
            for i in range(len(self.marginal) - 1)
        )

    @property
    def elastic(self) -> bool:
        return self.k_max > self.k_min

    def marginal_at(self, k: int) -> float:
        if not self.k_min <= k <= self.k_max:
            raise DomainError(
                f"profile {self.profile_id!r}: scale {k} outside "
                f"[{self.k_min}, {self.k_max}]"
            )
        return self.marginal[k - self.k_min]

    def net_gb_at(self, k: int) -> float:
        if not self.k_min <= k <= self.k_max:
            raise DomainError(
                f"profile {self.profile_id!r}: scale {k} outside "
                f"[{self.k_min}, {self.k_max}]"
            )
        return self.net_gb_per_slot[k - self.k_min]


def cumulative_throughput(profile: ScalingProfile, k: int) -> float:
    """Work units per slot when running at scale k (0 while paused)."""
    if k == 0:
        return 0.0
    if not profile.k_min <= k <= profile.k_max:
        raise DomainError(
            f"profile {profile.profile_id!r}: scale {k} outside "
            f"{{0}} u [{profile.k_min}, {profile.k_max}]"
        )
    return profile._cum[k - profile.k_min]


@dataclass(frozen=True)
class QueueConfig:
    """Submission queue: a slack budget and the job-length range routed to it.

    ``length_range`` is treated as (low, high]: a job belongs to the queue
    whose range contains its length, and ranges must partition (0, inf).
    """

    id: str
    slack_slots: int
    length_range: tuple[float, float]

    def __post_init__(self):
        if self.slack_slots < 0:
            raise DomainError(f"queue {self.id!r}: slack must be >= 0")
        lo, hi = self.length_range
        if not lo < hi:
            raise DomainError(f"queue {self.id!r}: empty length range {self.length_range}")

    def contains(self, length: float) -> bool:
        lo, hi = self.length_range
        return lo < length <= hi


@dataclass(frozen=True)
class Job:
    """One elastic batch job.

    ``length`` counts work units (slots at minimum scale); ``slack`` is the
    extra slots the job may wait or pause beyond its minimum runtime,
    resolved from its queue.
    """

    id: str
    arrival: int
    length: float
    queue: str
    slack: int
    profile: ScalingProfile

    def __post_init__(self):
        if self.length <= 0:
            raise DomainError(f"job {self.id!r}: length must be > 0")
        if self.slack < 0:
            raise DomainError(f"job {self.id!r}: slack must be >= 0")
        if self.arrival < 0:
            raise DomainError(f"job {self.id!r}: arrival must be >= 0")

    @property
    def deadline(self) -> float:
        """Completion deadline in slots: arrival + length + slack."""
        return self.arrival + self.length + self.slack


@dataclass(frozen=True)
class ClusterConfig:
    """Static cluster parameters: capacity cap, time granularities, queues
    and the per-resource power model."""

    max_capacity: int
    queues: tuple[QueueConfig, ...]
    slot_minutes: int = 60
    delta_t_minutes: int = 5
    power_per_server_kw: float = 0.1
    eta_net_w_per_gbps: float = 0.1
    switch_cost_kwh: float = 0.0

    def __post_init__(self):
        if self.max_capacity < 0:
            raise DomainError("max_capacity must be >= 0")
        if self.slot_minutes <= 0 or self.delta_t_minutes <= 0:
            raise DomainError("slot and delta-t lengths must be positive")
        if self.slot_minutes % self.delta_t_minutes != 0:
            raise DomainError(
                f"slot_minutes ({self.slot_minutes}) must be divisible by "
                f"delta_t_minutes ({self.delta_t_minutes})"
            )

    @property
    def subslots(self) -> int:
        """Number of rescheduling sub-slots per provisioning slot."""
        return self.slot_minutes // self.delta_t_minutes

    @property
    def slot_hours(self) -> float:
        return self.slot_minutes / 60.0

    def queue_for_length(self, length: float) -> QueueConfig:
        for q in self.queues:
            if q.contains(length):
                return q
        raise DomainError(f"no queue accepts job length {length}")


@dataclass(frozen=True)
class CarbonTrace:
    """Time-indexed carbon-intensity series in g CO2eq per kWh."""

    start_time: datetime
    step_minutes: int
    values: tuple[float, ...]
    region: str = ""

    def __post_init__(self):
        for i, v in enumerate(self.values):
            if v < 0 or not math.isfinite(v):
                raise DomainError(f"carbon intensity at index {i} must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.values)

    def ci(self, t: int) -> float:
        if not 0 <= t < len(self.values):
            raise TraceRangeError(f"slot {t} outside trace of length {len(self.values)}")
        return self.values[t]

    def timestamp_at(self, t: int) -> datetime:
        return self.start_time + timedelta(minutes=self.step_minutes * t)

    def shifted(self, offset: int) -> "CarbonTrace":
        """View of the trace starting ``offset`` slots in."""
        if not 0 <= offset <= len(self.values):
            raise TraceRangeError(f"offset {offset} outside trace of length {len(self.values)}")
        return CarbonTrace(
            start_time=self.timestamp_at(offset),
            step_minutes=self.step_minutes,
            values=self.values[offset:],
            region=self.region,
        )


@dataclass
class Schedule:
    """Per-job, per-slot allocation matrix with completion bookkeeping.

    ``allocations[job_id][slot]`` is the server count (absent or 0 means
    paused). ``completion[job_id]`` is ``(slot, subslots_used)``: the job
    reaches 100% progress after that many sub-slots of its final slot, or
    None if it never completes. ``subslots`` fixes the sub-slot count the
    completion indices refer to.
    """

    subslots: int
    allocations: dict[str, dict[int, int]] = field(default_factory=dict)
    completion: dict[str, tuple[int, int] | None] = field(default_factory=dict)

    def allocation(self, job_id: str, t: int) -> int:
        return self.allocations.get(job_id, {}).get(t, 0)

    def occupancy(self, t: int) -> int:
        return sum(slots.get(t, 0) for slots in self.allocations.values())

    def horizon(self) -> int:
        """One past the last slot with any allocation."""
        last = -1
        for slots in self.allocations.values():
            if slots:
                last = max(last, max(slots))
        return last + 1

    def active_fraction(self, job_id: str, t: int) -> float:
        """Fraction of slot t the job actually holds its servers."""
        if self.allocation(job_id, t) == 0:
            return 0.0
        done = self.completion.get(job_id)
        if done is not None and done[0] == t:
            return done[1] / self.subslots
        return 1.0


def finalize_allocations(
    raw: dict[int, int], profile: ScalingProfile, length: float, subslots: int
) -> tuple[dict[int, int], tuple[int, int] | None]:
    """Walk a job's raw slot allocations chronologically, find the sub-slot
    where accumulated work first reaches ``length``, and clear everything
    after it.

    Returns the trimmed allocation map and the completion index, or None
    when the allocations never complete the job. Work inside a slot accrues
    linearly, so the completion sub-slot is the ceiling of the needed
    fraction on the delta-t grid.
    """
    trimmed: dict[int, int] = {}
    work = 0.0
    cum = profile._cum
    k_min = profile.k_min
    for t in sorted(raw):
        k = raw[t]
        if k == 0:
            continue
        rate = cum[k - k_min]
        if work + rate < length - _EPS:
            trimmed[t] = k
            work += rate
            continue
        needed = length - work
        used = math.ceil(needed / rate * subslots - 1e-9)
        used = min(max(used, 1), subslots)
        trimmed[t] = k
        return trimmed, (t, used)
    return trimmed, None


def progress(job: Job, schedule: Schedule) -> float:
    """Fraction of the job's work the schedule completes, capped at 1.

    The final slot counts at sub-slot granularity, mirroring how jobs free
    resources once done.
    """
    slots = schedule.allocations.get(job.id, {})
    work = 0.0
    for t in sorted(slots):
        k = slots[t]
        if k == 0:
            continue
        rate = cumulative_throughput(job.profile, k)
        contrib = rate * schedule.active_fraction(job.id, t)
        work += contrib
        if work >= job.length - _EPS:
            return 1.0
    return work / job.length


def slot_energy(job: Job, k: int, active_fraction: float, cluster: ClusterConfig) -> float:
    """Energy in kWh the job draws in one slot at scale k.

    The network term converts sustained transfer (eta in W/Gbps over the
    slot's gigabit volume) into kWh; both terms scale with the fraction of
    the slot the job is actually active.
    """
    if not 0.0 <= active_fraction <= 1.0 + _EPS:
        raise DomainError(f"active_fraction must be in [0, 1], got {active_fraction}")
    if k == 0:
        return 0.0
    compute_kwh = k * cluster.power_per_server_kw * cluster.slot_hours
    net_kwh = cluster.eta_net_w_per_gbps * job.profile.net_gb_at(k) / _WS_PER_KWH
    return (compute_kwh + net_kwh) * active_fraction


def job_carbon(job: Job, schedule: Schedule, trace: CarbonTrace, cluster: ClusterConfig) -> float:
    """Emissions in grams for one job under the schedule, including any
    per-scale-change switching cost."""
    slots = schedule.allocations.get(job.id, {})
    horizon = max(slots) + 1 if slots else 0
    if horizon > len(trace):
        raise TraceRangeError(
            f"schedule for job {job.id!r} needs {horizon} slots, trace has {len(trace)}"
        )
    total = 0.0
    for t, k in slots.items():
        if k == 0:
            continue
        total += slot_energy(job, k, schedule.active_fraction(job.id, t), cluster) * trace.ci(t)
    if cluster.switch_cost_kwh > 0.0 and slots:
        active = sorted(t for t, k in slots.items() if k > 0)
        if active:
            first, last = active[0], active[-1]
            done = schedule.completion.get(job.id)
            if done is not None:
                last = done[0]
            # A switch is any allocation change while the job is started and
            # unfinished; the initial start and the final release are free.
            for t in range(first + 1, last + 1):
                if slots.get(t, 0) != slots.get(t - 1, 0):
                    total += cluster.switch_cost_kwh * trace.ci(t)
    return total


def total_carbon(
    schedule: Schedule, jobs: list[Job], trace: CarbonTrace, cluster: ClusterConfig
) -> float:
    """Cluster emissions in grams: sum of every job's slot energy weighted
    by the carbon intensity of the slot it ran in."""
    return sum(job_carbon(job, schedule, trace, cluster) for job in jobs)
