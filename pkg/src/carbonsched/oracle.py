"""Offline carbon-minimizing scheduler with full future knowledge, plus an
exhaustive reference search for small instances.

The greedy builds every (job, slot, scale) candidate inside each job's
window, prices it by marginal throughput per unit of carbon intensity, and
pops candidates best-first, raising allocations while capacity and the
job's remaining work allow. Ties go to earlier deadlines, then job id,
then earlier slots and lower scales, which makes runs byte-reproducible.

Three strictly-improving post passes follow the popping loop (all are
no-ops on schedules that are already minimal):

* a reverse-delete pass re-examines assignments in reverse pop order and
  drops any whose removal keeps the job complete and lowers its emissions,
  which discards quantization overshoot the forward pass cannot see;
* a completion right-sizing pass re-picks the scale of each job's final
  slot to the cheapest one that still finishes the job there;
* a budgeted 1-exchange polish re-sets one (slot, scale) entry of one job
  at a time, re-pruning that job, and keeps any strict improvement. Whole
  slots are indivisible here, so the density-ordered popping loop alone is
  not exactly optimal the way it is for divisible work; the exchange pass
  recovers the small-instance optima that a residual mis-placed at the
  completion boundary would otherwise cost.

Infeasibility is a result state: callers either accept it or grow slack
one slot per round via ``retry_with_extension``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError, InstanceTooLargeError
from .model import (
    IDLE_THRESHOLD,
    CarbonTrace,
    ClusterConfig,
    Job,
    Schedule,
    cumulative_throughput,
    finalize_allocations,
)

_EPS = 1e-12


@dataclass
class OracleResult:
    """Schedule plus the per-slot decisions the learning phase consumes."""

    schedule: Schedule
    feasible: bool
    extended_jobs: list[tuple[str, int]] = field(default_factory=list)
    per_slot_capacity: list[int] = field(default_factory=list)
    per_slot_threshold: list[float] = field(default_factory=list)
    job_progress: dict[str, float] = field(default_factory=dict)

    def completion_time(self, job_id: str) -> float | None:
        """Slot-valued completion instant, or None if unfinished."""
        done = self.schedule.completion.get(job_id)
        if done is None:
            return None
        slot, used = done
        return slot + used / self.schedule.subslots


def _window(job: Job, trace_len: int, extra_slack: int = 0) -> range:
    """Usable slots: arrival up to (exclusive) the deadline, clipped to the
    trace. The deadline is arrival + length + slack, so a zero-slack job
    gets exactly its minimum runtime."""
    end = int(math.ceil(job.arrival + job.length + job.slack + extra_slack - 1e-9))
    return range(job.arrival, min(end, trace_len))


def _job_rates(job: Job) -> list[float]:
    return [
        cumulative_throughput(job.profile, k)
        for k in range(job.profile.k_min, job.profile.k_max + 1)
    ]


def oracle_schedule(
    jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    extra_slack: dict[str, int] | None = None,
    polish_budget: int = 50_000,
) -> OracleResult:
    """Greedy offline schedule minimizing total emissions under capacity M.

    ``extra_slack`` carries per-job window extensions granted by previous
    infeasible rounds; plain calls leave it unset. ``polish_budget`` caps
    the number of exchange moves evaluated, so small instances reach a
    local optimum while week-scale runs stay cheap.
    """
    extra_slack = extra_slack or {}
    by_id = {job.id: job for job in jobs}
    if len(by_id) != len(jobs):
        raise DomainError("job ids must be unique")

    deadlines = {
        job.id: job.arrival + job.length + job.slack + extra_slack.get(job.id, 0)
        for job in jobs
    }
    candidates = []
    for job in jobs:
        window = _window(job, len(trace), extra_slack.get(job.id, 0))
        for t in window:
            ci = trace.ci(t)
            for k in range(job.profile.k_min, job.profile.k_max + 1):
                p = job.profile.marginal_at(k)
                ratio = p / ci if ci > 0 else math.inf
                candidates.append((-ratio, deadlines[job.id], job.id, t, k))
    candidates.sort()

    alloc: dict[str, dict[int, int]] = {job.id: {} for job in jobs}
    work: dict[str, float] = {job.id: 0.0 for job in jobs}
    occupancy: dict[int, int] = {}
    pops: list[tuple[str, int, int, int]] = []  # (job, slot, new scale, old scale)

    for _neg_ratio, _deadline, jid, t, k in candidates:
        job = by_id[jid]
        if work[jid] >= job.length - _EPS:
            continue
        current = alloc[jid].get(t, 0)
        if k <= current:
            continue
        occupied = occupancy.get(t, 0)
        if occupied - current + k > cluster.max_capacity:
            continue
        occupancy[t] = occupied - current + k
        alloc[jid][t] = k
        work[jid] += cumulative_throughput(job.profile, k) - (
            cumulative_throughput(job.profile, current) if current else 0.0
        )
        pops.append((jid, t, k, current))

    _prune_redundant(jobs, by_id, alloc, pops, trace, cluster)
    _right_size_completion(jobs, alloc, trace, cluster)
    _exchange_polish(jobs, alloc, trace, cluster, extra_slack, polish_budget)

    return _build_result(jobs, alloc, trace, cluster, extra_slack)


def _trimmed_carbon(job: Job, raw: dict[int, int], trace: CarbonTrace, cluster: ClusterConfig):
    """Carbon and completion of one job's raw allocations after the final
    slot trim; lean helper shared by the improvement passes (hot path, so it
    indexes profile arrays directly instead of going through Schedule)."""
    trimmed, done = finalize_allocations(raw, job.profile, job.length, cluster.subslots)
    profile = job.profile
    values = trace.values
    per_server = cluster.power_per_server_kw * cluster.slot_hours
    eta = cluster.eta_net_w_per_gbps
    subslots = cluster.subslots
    total = 0.0
    for t, k in trimmed.items():
        energy = k * per_server + eta * profile.net_gb_per_slot[k - profile.k_min] / 3.6e6
        if done is not None and done[0] == t:
            energy *= done[1] / subslots
        total += energy * values[t]
    if cluster.switch_cost_kwh > 0.0 and trimmed:
        active = sorted(trimmed)
        first, last = active[0], active[-1]
        for t in range(first + 1, last + 1):
            if trimmed.get(t, 0) != trimmed.get(t - 1, 0):
                total += cluster.switch_cost_kwh * values[t]
    return total, done


def _prune_redundant(jobs, by_id, alloc, pops, trace, cluster) -> None:
    """Reverse-delete: undo assignments, newest first, whenever the job still
    completes with strictly lower emissions. Removals only free capacity, so
    other jobs are unaffected."""
    carbon_cache = {
        job.id: _trimmed_carbon(job, alloc[job.id], trace, cluster)[0] for job in jobs
    }
    for jid, t, k_new, k_old in reversed(pops):
        if alloc[jid].get(t, 0) != k_new:
            continue
        job = by_id[jid]
        trial = dict(alloc[jid])
        if k_old == 0:
            del trial[t]
        else:
            trial[t] = k_old
        trial_carbon, done = _trimmed_carbon(job, trial, trace, cluster)
        if done is None:
            continue
        if trial_carbon < carbon_cache[jid] - _EPS:
            alloc[jid] = trial
            carbon_cache[jid] = trial_carbon


def _right_size_completion(jobs, alloc, trace, cluster) -> None:
    """Re-pick the scale of each job's completion slot: the pop loop chooses
    scales by throughput density, but in the slot where the job finishes the
    cheapest completing scale wins."""
    for job in jobs:
        raw = alloc[job.id]
        trimmed, done = finalize_allocations(raw, job.profile, job.length, cluster.subslots)
        if done is None:
            continue
        slot = done[0]
        current_cost, _ = _trimmed_carbon(job, trimmed, trace, cluster)
        best_k, best_cost = None, current_cost
        for k in range(job.profile.k_min, trimmed[slot]):
            trial = dict(trimmed)
            trial[slot] = k
            cost, trial_done = _trimmed_carbon(job, trial, trace, cluster)
            if trial_done is not None and cost < best_cost - _EPS:
                best_k, best_cost = k, cost
        if best_k is not None:
            new_raw = {t: k for t, k in raw.items() if t <= slot}
            new_raw[slot] = best_k
            alloc[job.id] = new_raw


def _prune_job_allocs(job: Job, raw: dict[int, int], trace: CarbonTrace,
                      cluster: ClusterConfig) -> dict[int, int]:
    """Drop or shrink a single job's purchases wherever that strictly lowers
    its emissions while keeping it complete. Purchases are visited from the
    most expensive slot down, then the completion slot is right-sized."""
    raw = dict(raw)
    carbon, done = _trimmed_carbon(job, raw, trace, cluster)
    if done is None:
        return raw
    for t in sorted(raw, key=lambda s: (-trace.ci(s), s)):
        if raw.get(t, 0) == 0:
            continue
        trial = dict(raw)
        del trial[t]
        trial_carbon, trial_done = _trimmed_carbon(job, trial, trace, cluster)
        if trial_done is not None and trial_carbon < carbon - _EPS:
            raw, carbon = trial, trial_carbon
    # Right-size the completion slot: cheapest scale that still finishes.
    trimmed, done = finalize_allocations(raw, job.profile, job.length, cluster.subslots)
    if done is None:
        return raw
    slot = done[0]
    best_raw, best_carbon = raw, carbon
    for k in range(job.profile.k_min, trimmed[slot]):
        trial = {t: v for t, v in raw.items() if t <= slot}
        trial[slot] = k
        trial_carbon, trial_done = _trimmed_carbon(job, trial, trace, cluster)
        if trial_done is not None and trial_carbon < best_carbon - _EPS:
            best_raw, best_carbon = trial, trial_carbon
    return best_raw


def _refill_job(job, raw, pin, candidates, cluster, occupancy, own_before) -> bool:
    """Greedily complete a job's tentative allocation after an exchange move,
    in the same density order as the main loop, never raising the pinned
    slot and respecting other jobs' occupancy. Returns False when the job
    cannot be completed."""
    cum = job.profile._cum
    k_min = job.profile.k_min
    work = sum(cum[k - k_min] for k in raw.values())
    if work >= job.length - _EPS:
        return True
    for t, k in candidates:
        if work >= job.length - _EPS:
            break
        if t == pin[0] and k > pin[1]:
            continue
        current = raw.get(t, 0)
        if k <= current:
            continue
        others = occupancy.get(t, 0) - own_before.get(t, 0)
        if others + k > cluster.max_capacity:
            continue
        raw[t] = k
        work += cum[k - k_min] - (cum[current - k_min] if current else 0.0)
    return work >= job.length - _EPS


def _exchange_polish(jobs, alloc, trace, cluster, extra_slack, budget: int) -> None:
    """Bounded local search: pin one (slot, scale) entry of one job, greedily
    re-complete the job around the pin, re-prune it, and keep the move only
    on strict improvement.

    All moves respect capacity against the other jobs' current occupancy.
    Sweeps repeat until a fixpoint or the move-evaluation budget runs out;
    the fixed visiting order keeps results deterministic.
    """
    if budget <= 0 or not jobs:
        return
    occupancy: dict[int, int] = {}
    for slots in alloc.values():
        for t, k in slots.items():
            occupancy[t] = occupancy.get(t, 0) + k

    def job_cost(job, raw):
        carbon, done = _trimmed_carbon(job, raw, trace, cluster)
        return carbon if done is not None else math.inf

    ordered = sorted(jobs, key=lambda j: j.id)
    windows = {}
    refill_order = {}
    sweep_cost = 0
    for job in ordered:
        window = _window(job, len(trace), (extra_slack or {}).get(job.id, 0))
        windows[job.id] = window
        sweep_cost += len(window) * len(window) * (job.profile.k_max - job.profile.k_min + 2)
        ranked = []
        for t in window:
            ci = trace.values[t]
            for k in range(job.profile.k_min, job.profile.k_max + 1):
                ratio = job.profile.marginal_at(k) / ci if ci > 0 else math.inf
                ranked.append((-ratio, t, k))
        ranked.sort()
        refill_order[job.id] = [(t, k) for _r, t, k in ranked]

    # A move costs roughly one pass over the job's window. If even one full
    # sweep does not fit the budget (large instances), skip the polish
    # entirely rather than improving an arbitrary prefix of the jobs.
    if sweep_cost > budget:
        return
    spent = 0
    improved = True
    while improved and spent < budget:
        improved = False
        for job in ordered:
            window = windows[job.id]
            move_cost = max(len(window), 1)
            current_cost = job_cost(job, alloc[job.id])
            for t in window:
                for k in range(0, job.profile.k_max + 1):
                    if k != 0 and k < job.profile.k_min:
                        continue
                    if alloc[job.id].get(t, 0) == k:
                        continue
                    if spent >= budget:
                        return
                    spent += move_cost
                    own_before = alloc[job.id]
                    others = occupancy.get(t, 0) - own_before.get(t, 0)
                    if k > 0 and others + k > cluster.max_capacity:
                        continue
                    trial = dict(own_before)
                    if k == 0:
                        trial.pop(t, None)
                    else:
                        trial[t] = k
                    if not _refill_job(job, trial, (t, k), refill_order[job.id],
                                       cluster, occupancy, own_before):
                        continue
                    trial = _prune_job_allocs(job, trial, trace, cluster)
                    if trial.get(t, 0) > k:
                        continue  # refill is never allowed to exceed the pin
                    trial_cost = job_cost(job, trial)
                    if trial_cost < current_cost - _EPS:
                        for s, v in own_before.items():
                            occupancy[s] = occupancy.get(s, 0) - v
                        for s, v in trial.items():
                            occupancy[s] = occupancy.get(s, 0) + v
                        alloc[job.id] = trial
                        current_cost = trial_cost
                        improved = True


def _build_result(jobs, alloc, trace, cluster, extra_slack) -> OracleResult:
    schedule = Schedule(subslots=cluster.subslots)
    feasible = True
    progress_map: dict[str, float] = {}
    horizon = 0
    for job in jobs:
        trimmed, done = finalize_allocations(
            alloc[job.id], job.profile, job.length, cluster.subslots
        )
        schedule.allocations[job.id] = trimmed
        schedule.completion[job.id] = done
        done_work = sum(cumulative_throughput(job.profile, k) for k in trimmed.values())
        if done is None:
            feasible = False
            progress_map[job.id] = min(done_work / job.length, 1.0)
        else:
            progress_map[job.id] = 1.0
        end = _window(job, len(trace), extra_slack.get(job.id, 0)).stop
        horizon = max(horizon, end)

    capacity = [schedule.occupancy(t) for t in range(horizon)]
    threshold = []
    for t in range(horizon):
        running = [
            job.profile.marginal_at(schedule.allocation(job.id, t))
            for job in jobs
            if schedule.allocation(job.id, t) > 0
        ]
        threshold.append(min(running) if running else IDLE_THRESHOLD)

    return OracleResult(
        schedule=schedule,
        feasible=feasible,
        extended_jobs=sorted((jid, extra) for jid, extra in extra_slack.items() if extra > 0),
        per_slot_capacity=capacity,
        per_slot_threshold=threshold,
        job_progress=progress_map,
    )


def retry_with_extension(
    jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    max_rounds: int = 10,
) -> OracleResult:
    """Re-run the greedy, growing each unfinished job's slack by one slot per
    round, until feasible or the round budget is spent."""
    if max_rounds < 1:
        raise DomainError("max_rounds must be >= 1")
    extra: dict[str, int] = {}
    result = oracle_schedule(jobs, trace, cluster, extra_slack=extra)
    for _ in range(max_rounds - 1):
        if result.feasible:
            return result
        for job in jobs:
            if result.job_progress.get(job.id, 0.0) < 1.0:
                extra[job.id] = extra.get(job.id, 0) + 1
        result = oracle_schedule(jobs, trace, cluster, extra_slack=extra)
    return result


def write_decisions_csv(result: OracleResult, path) -> None:
    """Per-slot capacity and threshold decisions, the learning phase's raw
    material, in a plain CSV."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "m_t", "rho_t"])
        for t, (m, rho) in enumerate(
            zip(result.per_slot_capacity, result.per_slot_threshold)
        ):
            writer.writerow([t, m, repr(rho)])


def write_allocations_csv(result: OracleResult, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["job_id", "slot", "servers", "completion_subslots"])
        for jid in sorted(result.schedule.allocations):
            done = result.schedule.completion.get(jid)
            for t in sorted(result.schedule.allocations[jid]):
                k = result.schedule.allocations[jid][t]
                used = done[1] if done is not None and done[0] == t else ""
                writer.writerow([jid, t, k, used])


def brute_force_schedule(
    jobs: list[Job],
    trace: CarbonTrace,
    cluster: ClusterConfig,
    max_states: float = 1e12,
) -> OracleResult:
    """Exhaustive minimum over all deadline-respecting allocation matrices.

    Branch-and-bound over slots keeps it tractable on small instances; the
    guard refuses instances whose raw matrix count exceeds ``max_states``.
    Evaluation (final-slot trim, energy, emissions) is shared with the
    greedy so the two routes are comparable to the last bit.
    """
    log_states = 0.0
    for job in jobs:
        choices = job.profile.k_max - job.profile.k_min + 2
        log_states += len(_window(job, len(trace))) * math.log(choices)
    if log_states > math.log(max_states):
        raise InstanceTooLargeError(
            f"instance has ~e^{log_states:.1f} allocation matrices, "
            f"budget is {max_states:g}"
        )

    if not jobs:
        return OracleResult(
            schedule=Schedule(subslots=cluster.subslots),
            feasible=True,
        )

    horizon = max(_window(job, len(trace)).stop for job in jobs)
    n = len(jobs)
    windows = [_window(job, len(trace)) for job in jobs]
    rates = [_job_rates(job) for job in jobs]
    max_rate = [max(r) for r in rates]
    # Cheapest achievable emissions per work unit, for the admissible bound:
    # best scale efficiency times the cheapest intensity still reachable.
    efficiency = []
    for i, job in enumerate(jobs):
        effs = []
        for k in range(job.profile.k_min, job.profile.k_max + 1):
            energy = (
                k * cluster.power_per_server_kw * cluster.slot_hours
                + cluster.eta_net_w_per_gbps * job.profile.net_gb_at(k) / 3.6e6
            )
            effs.append(energy / rates[i][k - job.profile.k_min])
        efficiency.append(min(effs))
    suffix_min_ci = [math.inf] * (horizon + 1)
    for t in range(horizon - 1, -1, -1):
        suffix_min_ci[t] = min(trace.ci(t), suffix_min_ci[t + 1])

    best_carbon = math.inf
    best_alloc: list[dict[int, int]] | None = None

    def lower_bound(t: int, remaining: list[float]) -> float:
        bound = 0.0
        for i in range(n):
            if remaining[i] > _EPS:
                start = max(t, windows[i].start)
                if start >= windows[i].stop:
                    return math.inf
                bound += remaining[i] * efficiency[i] * suffix_min_ci[start]
        return bound

    def slot_options(i: int, t: int, remaining: float) -> list[int]:
        if remaining <= _EPS or t not in windows[i]:
            return [0]
        job = jobs[i]
        # Higher scales first so a completing incumbent appears early.
        return list(range(job.profile.k_max, job.profile.k_min - 1, -1)) + [0]

    def descend(t: int, alloc: list[dict[int, int]], remaining: list[float],
                carbon: float) -> None:
        nonlocal best_carbon, best_alloc
        if carbon + lower_bound(t, remaining) >= best_carbon - _EPS:
            return
        if t == horizon:
            if all(r <= _EPS for r in remaining):
                if carbon < best_carbon - _EPS:
                    best_carbon = carbon
                    best_alloc = [dict(a) for a in alloc]
            return
        for i in range(n):
            if remaining[i] <= _EPS:
                continue
            slots_left = sum(1 for s in windows[i] if s >= t)
            if remaining[i] > max_rate[i] * slots_left + _EPS:
                return  # job can no longer finish down this branch

        ci = trace.ci(t)

        def assign(i: int, budget: int) -> None:
            if i == n:
                descend(t + 1, alloc, remaining, carbon_now[0])
                return
            for k in slot_options(i, t, remaining[i]):
                if k > budget:
                    continue
                if k == 0:
                    assign(i + 1, budget)
                    continue
                job = jobs[i]
                rate = rates[i][k - job.profile.k_min]
                energy = (
                    k * cluster.power_per_server_kw * cluster.slot_hours
                    + cluster.eta_net_w_per_gbps * job.profile.net_gb_at(k) / 3.6e6
                )
                prev_rem = remaining[i]
                if rate < prev_rem - _EPS:
                    fraction = 1.0
                    remaining[i] = prev_rem - rate
                else:
                    used = min(
                        max(math.ceil(prev_rem / rate * cluster.subslots - 1e-9), 1),
                        cluster.subslots,
                    )
                    fraction = used / cluster.subslots
                    remaining[i] = 0.0
                step = energy * fraction * ci
                alloc[i][t] = k
                carbon_now[0] += step
                assign(i + 1, budget - k)
                carbon_now[0] -= step
                del alloc[i][t]
                remaining[i] = prev_rem

        carbon_now = [carbon]
        assign(0, cluster.max_capacity)

    descend(0, [dict() for _ in jobs], [job.length for job in jobs], 0.0)

    if best_alloc is None:
        empty = {job.id: {} for job in jobs}
        return _build_result(jobs, empty, trace, cluster, {})
    final = {job.id: best_alloc[i] for i, job in enumerate(jobs)}
    result = _build_result(jobs, final, trace, cluster, {})
    return result


def audit_result(result: OracleResult, jobs: list[Job], cluster: ClusterConfig,
                 extra_slack: dict[str, int] | None = None) -> list[str]:
    """Independent re-check of a result's invariants: capacity respected,
    allocations inside windows, and the feasibility flag consistent with
    recomputed progress. Returns a list of violation descriptions."""
    extra_slack = dict(result.extended_jobs) if extra_slack is None else extra_slack
    problems = []
    sched = result.schedule
    horizon = sched.horizon()
    for t in range(horizon):
        if sched.occupancy(t) > cluster.max_capacity:
            problems.append(f"slot {t}: occupancy {sched.occupancy(t)} > M")
    complete = True
    for job in jobs:
        window_end = job.arrival + job.length + job.slack + extra_slack.get(job.id, 0)
        for t, k in sched.allocations.get(job.id, {}).items():
            if k == 0:
                continue
            if t < job.arrival or t >= window_end:
                problems.append(f"job {job.id}: allocation at {t} outside window")
            if not job.profile.k_min <= k <= job.profile.k_max:
                problems.append(f"job {job.id}: scale {k} outside profile range")
        done = sched.completion.get(job.id)
        if done is None:
            complete = False
        elif done[0] + done[1] / sched.subslots > window_end + 1e-9:
            problems.append(f"job {job.id}: completes after its window")
    if complete != result.feasible:
        problems.append(f"feasible flag {result.feasible} but completion says {complete}")
    return problems
