"""Discrete-time engine: the learn-then-execute pipeline, the per-policy
evaluation harness, and the comparison report.

Provisioning decisions are fixed once per slot; job allocations are
revisited every sub-slot and on arrivals and completions (which land on
sub-slot boundaries). Within a sub-slot the order is: completions free
capacity, arrivals join, the run-to-completion guard pins critical jobs,
the scheduler allocates, and progress and energy accrue.

Energy is billed per job (idle provisioned servers draw nothing here), and
every policy's per-slot log row satisfies carbon == energy x intensity, so
the log sums exactly to the reported total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from . import baselines
from .errors import DomainError, InfeasibleError, TraceRangeError
from .learning import (
    FORECAST_SLOTS,
    KnowledgeBase,
    extract_cases,
    featurize,
    refresh,
)
from .model import CarbonTrace, ClusterConfig, Job, Schedule, cumulative_throughput, slot_energy
from .oracle import retry_with_extension
from .policy import ProvisioningParams, ViolationTracker, force_run_guard, provision
from .policy import schedule as schedule_step

_EPS = 1e-12

SCHEMA_VERSION = 1

POLICY_NAMES = (
    "carbon-agnostic",
    "gaia",
    "wait-awhile",
    "carbonscaler",
    "carbonflex",
    "oracle",
)


@dataclass
class LogRow:
    """One provisioning slot of one policy's decision log."""

    slot: int
    ci: float
    mode: str
    m_t: int
    rho: float
    forced_jobs: tuple[str, ...]
    allocations: tuple[tuple[str, int], ...]
    energy_kwh: float

    @property
    def carbon_g(self) -> float:
        return self.energy_kwh * self.ci


@dataclass
class PolicyStats:
    """Summary metrics plus the per-slot log for one policy run."""

    policy: str
    total_carbon_g: float
    savings_pct: float
    mean_wait_hours: float
    mean_delay_violation_hours: float
    violation_rate: float
    mean_utilization: float
    completed: int
    incomplete_jobs: tuple[str, ...]
    log: list[LogRow] = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {
            "total_carbon_g": self.total_carbon_g,
            "savings_pct": self.savings_pct,
            "mean_wait_hours": self.mean_wait_hours,
            "mean_delay_violation_hours": self.mean_delay_violation_hours,
            "violation_rate": self.violation_rate,
            "mean_utilization": self.mean_utilization,
            "completed": self.completed,
            "incomplete_jobs": list(self.incomplete_jobs),
        }


@dataclass
class SimOutcome:
    """Comparison across policies on identical inputs. Savings are measured
    against the carbon-agnostic run, whose own savings are zero by
    construction."""

    per_policy: dict[str, PolicyStats]
    schema_version: int = SCHEMA_VERSION

    def to_json_dict(self, config: dict | None = None) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": config or {},
            "policies": {name: stats.summary_dict() for name, stats in self.per_policy.items()},
        }


def _finish_time(sched: Schedule, job_id: str) -> float | None:
    done = sched.completion.get(job_id)
    if done is None:
        return None
    return done[0] + done[1] / sched.subslots


def _switch_slots(slots: dict[int, int], completion: tuple[int, int] | None) -> list[int]:
    """Slots where a started, unfinished job's allocation changed; the
    initial start and the final release are free."""
    active = sorted(t for t, k in slots.items() if k > 0)
    if not active:
        return []
    first = active[0]
    last = completion[0] if completion is not None else active[-1]
    return [
        t for t in range(first + 1, last + 1)
        if slots.get(t, 0) != slots.get(t - 1, 0)
    ]


def evaluate_schedule(
    policy: str,
    sched: Schedule,
    jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    mode: str | None = None,
) -> PolicyStats:
    """Metrics and the decision log for a slot-granular schedule."""
    horizon = sched.horizon()
    if horizon > len(trace):
        raise TraceRangeError(f"schedule spans {horizon} slots, trace has {len(trace)}")
    energy_per_slot = [0.0] * horizon
    rows: list[LogRow] = []
    for job in jobs:
        slots = sched.allocations.get(job.id, {})
        for t, k in slots.items():
            if k > 0:
                energy_per_slot[t] += slot_energy(
                    job, k, sched.active_fraction(job.id, t), cluster
                )
        if cluster.switch_cost_kwh > 0.0:
            for t in _switch_slots(slots, sched.completion.get(job.id)):
                energy_per_slot[t] += cluster.switch_cost_kwh
    used_server_slots = 0.0
    for t in range(horizon):
        allocs = tuple(
            sorted(
                (job.id, sched.allocations.get(job.id, {}).get(t, 0))
                for job in jobs
                if sched.allocations.get(job.id, {}).get(t, 0) > 0
            )
        )
        used_server_slots += sum(
            k * sched.active_fraction(jid, t) for jid, k in allocs
        )
        rows.append(
            LogRow(
                slot=t,
                ci=trace.ci(t),
                mode=mode or policy,
                m_t=sum(k for _, k in allocs),
                rho=0.0,
                forced_jobs=(),
                allocations=allocs,
                energy_kwh=energy_per_slot[t],
            )
        )
    total = sum(row.carbon_g for row in rows)

    waits, violations, late = [], [], 0
    incomplete = []
    for job in jobs:
        finish = _finish_time(sched, job.id)
        if finish is None:
            incomplete.append(job.id)
            continue
        waits.append(max(0.0, finish - job.arrival - job.length) * cluster.slot_hours)
        over = max(0.0, finish - job.deadline) * cluster.slot_hours
        violations.append(over)
        if over > 1e-9:
            late += 1
    completed = len(jobs) - len(incomplete)
    capacity_slots = cluster.max_capacity * max(horizon, 1)
    return PolicyStats(
        policy=policy,
        total_carbon_g=total,
        savings_pct=0.0,
        mean_wait_hours=sum(waits) / len(waits) if waits else 0.0,
        mean_delay_violation_hours=sum(violations) / len(violations) if violations else 0.0,
        violation_rate=(late + len(incomplete)) / len(jobs) if jobs else 0.0,
        mean_utilization=used_server_slots / capacity_slots if capacity_slots else 0.0,
        completed=completed,
        incomplete_jobs=tuple(incomplete),
        log=rows,
    )


def run_learning(
    historical_jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    replay_offsets: tuple[int, ...] = (0,),
    window_slots: int | None = None,
    window_days: int = 14,
    max_rounds: int = 10,
    replay_report: list | None = None,
) -> KnowledgeBase:
    """Replay the historical window through the offline optimizer, once per
    start offset, and collect its per-slot decisions into one knowledge
    base. Replays that stay infeasible after slack extension are skipped;
    if every replay fails, that is an error.

    When ``replay_report`` is given, one (offset, feasible, extended_jobs)
    tuple per replay is appended for caller-side summaries.
    """
    if window_slots is None:
        window_slots = max((int(math.ceil(j.deadline)) for j in historical_jobs), default=0)
    all_cases = []
    failures = []
    for offset in replay_offsets:
        if offset < 0 or offset + window_slots + FORECAST_SLOTS + 1 > len(trace):
            raise TraceRangeError(
                f"replay offset {offset} leaves no room for a {window_slots}-slot window "
                f"plus the {FORECAST_SLOTS}-slot forecast in a trace of {len(trace)}"
            )
        view = trace.shifted(offset)
        result = retry_with_extension(historical_jobs, view, cluster, max_rounds=max_rounds)
        if replay_report is not None:
            replay_report.append((offset, result.feasible, len(result.extended_jobs)))
        if not result.feasible:
            failures.append(offset)
            continue
        all_cases.extend(
            extract_cases(result, view, historical_jobs, cluster.queues, window_slots)
        )
    if not all_cases:
        raise InfeasibleError(
            f"no feasible replay among offsets {list(replay_offsets)}"
            + (f" (failed: {failures})" if failures else "")
        )
    now = max(c.created_at for c in all_cases)
    return refresh(KnowledgeBase([], window_days=window_days), all_cases, now)


def run_execution(
    eval_jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    kb: KnowledgeBase,
    params: ProvisioningParams | None = None,
    horizon: int | None = None,
) -> PolicyStats:
    """Execute the learned policy: provision each slot from the knowledge
    base, schedule every sub-slot, accrue work and energy per job."""
    params = params or ProvisioningParams()
    if horizon is None:
        horizon = default_horizon(eval_jobs, trace, cluster)
    nsub = cluster.subslots
    tracker = ViolationTracker(window_slots=float(params.violation_window_slots))
    remaining = {job.id: job.length for job in eval_jobs}
    started: set[str] = set()
    sticky_forced: set[str] = set()
    finish: dict[str, float] = {}
    prev_alloc: dict[str, int] = {}
    rows: list[LogRow] = []
    used_server_slots = 0.0

    for t in range(horizon):
        in_system = [
            j for j in eval_jobs
            if j.arrival <= t and j.id not in finish and remaining[j.id] > _EPS
        ]
        state = featurize(t, trace, in_system, cluster.queues)
        decision = provision(state, kb, params, tracker.rate_at(float(t)), cluster.max_capacity)
        ci = trace.ci(t)
        slot_energy_kwh = 0.0
        slot_allocs: dict[str, int] = {}
        forced_logged: set[str] = set()

        for s in range(nsub):
            now = t + s / nsub
            active = [
                j for j in eval_jobs
                if j.arrival <= t and j.id not in finish and remaining[j.id] > _EPS
            ]
            if not active:
                prev_alloc = {}
                continue
            sticky_forced &= {j.id for j in active}
            sticky_forced |= force_run_guard(now, active, remaining)
            forced_logged |= sticky_forced
            alloc = schedule_step(
                now, active, decision.capacity, decision.threshold,
                forced=sticky_forced, max_capacity=cluster.max_capacity,
            )
            for job in active:
                k = alloc.get(job.id, 0)
                was = prev_alloc.get(job.id, 0)
                if k != was and job.id in started and cluster.switch_cost_kwh > 0.0:
                    slot_energy_kwh += cluster.switch_cost_kwh
                if k == 0:
                    continue
                started.add(job.id)
                step_work = cumulative_throughput(job.profile, k) / nsub
                slot_energy_kwh += slot_energy(job, k, 1.0 / nsub, cluster)
                used_server_slots += k / nsub
                slot_allocs[job.id] = max(slot_allocs.get(job.id, 0), k)
                remaining[job.id] -= step_work
                if remaining[job.id] <= _EPS:
                    finish_time = t + (s + 1) / nsub
                    finish[job.id] = finish_time
                    tracker.record_completion(job, finish_time)
            prev_alloc = alloc

        rows.append(
            LogRow(
                slot=t,
                ci=ci,
                mode=decision.mode,
                m_t=decision.capacity,
                rho=decision.threshold,
                forced_jobs=tuple(sorted(forced_logged)),
                allocations=tuple(sorted(slot_allocs.items())),
                energy_kwh=slot_energy_kwh,
            )
        )

    waits, violations, late = [], [], 0
    incomplete = []
    for job in eval_jobs:
        if job.id not in finish:
            incomplete.append(job.id)
            continue
        waits.append(max(0.0, finish[job.id] - job.arrival - job.length) * cluster.slot_hours)
        over = max(0.0, finish[job.id] - job.deadline) * cluster.slot_hours
        violations.append(over)
        if over > 1e-9:
            late += 1
    completed = len(eval_jobs) - len(incomplete)
    capacity_slots = cluster.max_capacity * max(horizon, 1)
    return PolicyStats(
        policy="carbonflex",
        total_carbon_g=sum(r.carbon_g for r in rows),
        savings_pct=0.0,
        mean_wait_hours=sum(waits) / len(waits) if waits else 0.0,
        mean_delay_violation_hours=sum(violations) / len(violations) if violations else 0.0,
        violation_rate=(late + len(incomplete)) / len(eval_jobs) if eval_jobs else 0.0,
        mean_utilization=used_server_slots / capacity_slots if capacity_slots else 0.0,
        completed=completed,
        incomplete_jobs=tuple(incomplete),
        log=rows,
    )


def default_horizon(jobs: list[Job], trace: CarbonTrace, cluster: ClusterConfig) -> int:
    """Evaluation horizon: the latest deadline plus room to drain a full
    backlog, capped so day-ahead forecasts stay inside the trace."""
    cap = len(trace) - FORECAST_SLOTS - 1
    if not jobs:
        return max(0, min(24, cap))
    deadline = max(int(math.ceil(j.deadline)) for j in jobs)
    drain = int(math.ceil(sum(j.length for j in jobs) / max(cluster.max_capacity, 1)))
    return max(0, min(deadline + drain + 2, cap))


def compare(
    eval_jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    policies: list[str],
    kb: KnowledgeBase | None = None,
    params: ProvisioningParams | None = None,
    mean_lengths: dict[str, float] | None = None,
    horizon: int | None = None,
    oracle_max_rounds: int = 10,
) -> SimOutcome:
    """Run the requested policies on identical inputs and report savings
    against the carbon-agnostic denominator."""
    unknown = [p for p in policies if p not in POLICY_NAMES]
    if unknown:
        raise DomainError(
            f"unknown policies {unknown}; valid names: {', '.join(POLICY_NAMES)}"
        )
    if "carbonflex" in policies and (kb is None or len(kb) == 0):
        raise DomainError("the carbonflex policy needs a non-empty knowledge base")
    if horizon is None:
        horizon = default_horizon(eval_jobs, trace, cluster)
    if mean_lengths is None:
        mean_lengths = baselines.mean_lengths_by_queue(eval_jobs)

    agnostic_sched = baselines.carbon_agnostic(eval_jobs, cluster)
    agnostic = evaluate_schedule("carbon-agnostic", agnostic_sched, eval_jobs, trace, cluster)
    denominator = agnostic.total_carbon_g

    per_policy: dict[str, PolicyStats] = {}
    for name in policies:
        if name == "carbon-agnostic":
            stats = agnostic
        elif name == "gaia":
            sched = baselines.gaia_lowest_window(eval_jobs, trace, cluster, mean_lengths)
            stats = evaluate_schedule(name, sched, eval_jobs, trace, cluster)
        elif name == "wait-awhile":
            sched = baselines.wait_awhile(eval_jobs, trace, cluster)
            stats = evaluate_schedule(name, sched, eval_jobs, trace, cluster)
        elif name == "carbonscaler":
            sched = baselines.carbonscaler(eval_jobs, trace, cluster, mean_lengths)
            stats = evaluate_schedule(name, sched, eval_jobs, trace, cluster)
        elif name == "oracle":
            result = retry_with_extension(eval_jobs, trace, cluster, max_rounds=oracle_max_rounds)
            stats = evaluate_schedule(name, result.schedule, eval_jobs, trace, cluster)
        else:
            stats = run_execution(eval_jobs, trace, cluster, kb, params, horizon=horizon)
        if denominator > 0:
            stats.savings_pct = 100.0 * (1.0 - stats.total_carbon_g / denominator)
        per_policy[name] = stats
    return SimOutcome(per_policy=per_policy)
