"""Trace ingestion, validation and synthesis.

Three CSV inputs feed the simulator:

* carbon trace: ``timestamp,ci_g_per_kwh``, uniform step, one row per slot
* scaling profiles: ``profile_id,k,marginal,net_gb_per_slot``, one row per scale
* job trace: ``job_id,arrival_slot,length_slots,profile_id`` (the queue is
  assigned from the cluster's length ranges, never stored in the file)

Loaders reject malformed rows with the offending line number. Writers
round-trip exactly. The synthetic generator replaces external cluster
traces with seeded Poisson arrivals so experiments stay reproducible.
"""

from __future__ import annotations

import csv
import math
from datetime import datetime

import numpy as np

from .errors import DomainError, ParseError, TraceRangeError
from .model import CarbonTrace, ClusterConfig, Job, QueueConfig, ScalingProfile


def load_carbon_trace(path, region: str = "") -> CarbonTrace:
    """Parse and validate a carbon-intensity CSV.

    Timestamps must be ISO 8601, strictly increasing, and uniformly spaced;
    intensities must be finite and non-negative.
    """
    rows: list[tuple[datetime, float]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "timestamp" not in reader.fieldnames \
                or "ci_g_per_kwh" not in reader.fieldnames:
            raise ParseError(path, 1, "expected header 'timestamp,ci_g_per_kwh'")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row["timestamp"])
            except (TypeError, ValueError):
                raise ParseError(path, lineno, f"bad timestamp {row['timestamp']!r}")
            try:
                ci = float(row["ci_g_per_kwh"])
            except (TypeError, ValueError):
                raise ParseError(path, lineno, f"bad carbon intensity {row['ci_g_per_kwh']!r}")
            if not math.isfinite(ci) or ci < 0:
                raise ParseError(path, lineno, f"carbon intensity must be >= 0, got {ci}")
            rows.append((ts, ci))
    if not rows:
        raise ParseError(path, 2, "trace has no data rows")
    if len(rows) == 1:
        raise ParseError(path, 2, "trace needs at least two rows to fix the step")
    step = (rows[1][0] - rows[0][0]).total_seconds() / 60.0
    if step <= 0:
        raise ParseError(path, 3, "timestamps must be strictly increasing")
    for i in range(1, len(rows)):
        gap = (rows[i][0] - rows[i - 1][0]).total_seconds() / 60.0
        if abs(gap - step) > 1e-9:
            raise ParseError(
                path, i + 2,
                f"non-uniform step: expected {step:g} min, got {gap:g} min"
                " (gap or duplicate timestamp)",
            )
    return CarbonTrace(
        start_time=rows[0][0],
        step_minutes=int(round(step)),
        values=tuple(ci for _, ci in rows),
        region=region,
    )


def write_carbon_trace(trace: CarbonTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "ci_g_per_kwh"])
        for t, v in enumerate(trace.values):
            writer.writerow([trace.timestamp_at(t).isoformat(), repr(v)])


def forecast_window(
    trace: CarbonTrace,
    t: int,
    horizon: int = 24,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """The next ``horizon`` intensities starting at slot t.

    Forecasts are perfect by default; ``noise_sigma`` adds seeded Gaussian
    perturbation (clipped at zero) for sensitivity studies.
    """
    if t < 0 or t + horizon > len(trace):
        raise TraceRangeError(
            f"forecast window [{t}, {t + horizon}) outside trace of length {len(trace)}"
        )
    window = list(trace.values[t : t + horizon])
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.normal(0.0, noise_sigma, size=len(window))
        window = [max(0.0, v + e) for v, e in zip(window, noise)]
    return window


def load_profiles(path) -> dict[str, ScalingProfile]:
    """Parse scaling profiles, one row per (profile, scale)."""
    grouped: dict[str, list[tuple[int, float, float, int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"profile_id", "k", "marginal", "net_gb_per_slot"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ParseError(path, 1, "expected header 'profile_id,k,marginal,net_gb_per_slot'")
        for lineno, row in enumerate(reader, start=2):
            try:
                k = int(row["k"])
                p = float(row["marginal"])
                g = float(row["net_gb_per_slot"])
            except (TypeError, ValueError):
                raise ParseError(path, lineno, f"bad numeric field in {row!r}")
            grouped.setdefault(row["profile_id"], []).append((k, p, g, lineno))
    profiles: dict[str, ScalingProfile] = {}
    for pid, entries in grouped.items():
        entries.sort(key=lambda e: e[0])
        ks = [e[0] for e in entries]
        if ks != list(range(ks[0], ks[0] + len(ks))):
            raise ParseError(path, entries[0][3], f"profile {pid!r}: scales must be contiguous")
        try:
            profiles[pid] = ScalingProfile(
                profile_id=pid,
                k_min=ks[0],
                k_max=ks[-1],
                marginal=tuple(e[1] for e in entries),
                net_gb_per_slot=tuple(e[2] for e in entries),
            )
        except DomainError as exc:
            raise ParseError(path, entries[0][3], str(exc))
    if not profiles:
        raise ParseError(path, 2, "no profiles found")
    return profiles


def write_profiles(profiles: dict[str, ScalingProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["profile_id", "k", "marginal", "net_gb_per_slot"])
        for pid in sorted(profiles):
            prof = profiles[pid]
            for i, k in enumerate(range(prof.k_min, prof.k_max + 1)):
                writer.writerow([pid, k, repr(prof.marginal[i]), repr(prof.net_gb_per_slot[i])])


def route_to_queue(length: float, queues: list[QueueConfig] | tuple[QueueConfig, ...]) -> QueueConfig:
    matches = [q for q in queues if q.contains(length)]
    if len(matches) != 1:
        raise DomainError(
            f"job length {length} matches {len(matches)} queues; "
            "queue length ranges must partition (0, inf)"
        )
    return matches[0]


def load_jobs(
    path,
    queues: list[QueueConfig] | tuple[QueueConfig, ...],
    profiles: dict[str, ScalingProfile],
) -> list[Job]:
    """Parse a job trace; each job is routed to the queue whose length range
    contains it and inherits that queue's slack."""
    jobs: list[Job] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"job_id", "arrival_slot", "length_slots", "profile_id"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ParseError(path, 1, "expected header 'job_id,arrival_slot,length_slots,profile_id'")
        for lineno, row in enumerate(reader, start=2):
            jid = row["job_id"]
            if jid in seen:
                raise ParseError(path, lineno, f"duplicate job id {jid!r}")
            seen.add(jid)
            try:
                arrival = int(row["arrival_slot"])
                length = float(row["length_slots"])
            except (TypeError, ValueError):
                raise ParseError(path, lineno, f"bad numeric field in {row!r}")
            if length <= 0:
                raise ParseError(path, lineno, f"job {jid!r}: length must be > 0")
            if arrival < 0:
                raise ParseError(path, lineno, f"job {jid!r}: arrival must be >= 0")
            pid = row["profile_id"]
            if pid not in profiles:
                raise ParseError(path, lineno, f"job {jid!r}: unknown profile {pid!r}")
            try:
                queue = route_to_queue(length, queues)
            except DomainError as exc:
                raise ParseError(path, lineno, str(exc))
            jobs.append(
                Job(
                    id=jid,
                    arrival=arrival,
                    length=length,
                    queue=queue.id,
                    slack=queue.slack_slots,
                    profile=profiles[pid],
                )
            )
    return jobs


def write_jobs(jobs: list[Job], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["job_id", "arrival_slot", "length_slots", "profile_id"])
        for job in jobs:
            length = int(job.length) if float(job.length).is_integer() else job.length
            writer.writerow([job.id, job.arrival, length, job.profile.profile_id])


def synthesize_jobs(
    rate: float,
    horizon_slots: int,
    profiles: dict[str, ScalingProfile],
    queues: list[QueueConfig] | tuple[QueueConfig, ...],
    seed: int = 0,
    length_choices: tuple[int, ...] = (1, 2, 4, 8, 12, 16, 24),
    length_weights: tuple[float, ...] | None = None,
) -> list[Job]:
    """Deterministic synthetic job trace: Poisson arrivals per slot, lengths
    drawn from a discrete distribution, profiles assigned uniformly.

    The defaults skew toward short jobs, loosely mimicking public cluster
    traces dominated by sub-day work.
    """
    if rate < 0:
        raise DomainError("arrival rate must be >= 0")
    if length_weights is None:
        length_weights = tuple(1.0 / (i + 1) for i in range(len(length_choices)))
    if len(length_weights) != len(length_choices):
        raise DomainError("length_weights must match length_choices")
    wsum = sum(length_weights)
    weights = [w / wsum for w in length_weights]
    rng = np.random.default_rng(seed)
    pids = sorted(profiles)
    jobs: list[Job] = []
    for t in range(horizon_slots):
        for _ in range(int(rng.poisson(rate))):
            length = int(rng.choice(length_choices, p=weights))
            pid = pids[int(rng.integers(len(pids)))]
            queue = route_to_queue(length, queues)
            jobs.append(
                Job(
                    id=f"j{len(jobs):05d}",
                    arrival=t,
                    length=float(length),
                    queue=queue.id,
                    slack=queue.slack_slots,
                    profile=profiles[pid],
                )
            )
    return jobs


def parse_length_dist(spec: str) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Parse a job-length distribution spec into (choices, weights).

    Accepted forms: ``mixed`` (short-skewed default), ``uniform:LO,HI``
    (integer lengths, equal weight) and ``fixed:N``.
    """
    name, _, arg = spec.partition(":")
    if name == "mixed":
        choices = (1, 2, 4, 8, 12, 16, 24)
        return choices, tuple(1.0 / (i + 1) for i in range(len(choices)))
    if name == "uniform":
        try:
            lo, hi = (int(x) for x in arg.split(","))
        except ValueError:
            raise DomainError(f"bad uniform length spec {spec!r}, want uniform:LO,HI")
        if not 0 < lo <= hi:
            raise DomainError(f"bad uniform length bounds in {spec!r}")
        choices = tuple(range(lo, hi + 1))
        return choices, tuple(1.0 for _ in choices)
    if name == "fixed":
        try:
            n = int(arg)
        except ValueError:
            raise DomainError(f"bad fixed length spec {spec!r}, want fixed:N")
        if n <= 0:
            raise DomainError(f"fixed length must be positive in {spec!r}")
        return (n,), (1.0,)
    raise DomainError(
        f"unknown length distribution {name!r}; valid: mixed, uniform:LO,HI, fixed:N"
    )


def estimate_utilization(jobs: list[Job], max_capacity: int, horizon_slots: int) -> float:
    """Work demand at minimum scale over cluster capacity: the knob the
    generator's arrival rate is tuned against."""
    if max_capacity <= 0 or horizon_slots <= 0:
        return 0.0
    demand = sum(job.length * job.profile.k_min for job in jobs)
    return demand / (max_capacity * horizon_slots)


def rate_for_utilization(
    target: float,
    max_capacity: int,
    profiles: dict[str, ScalingProfile],
    length_choices: tuple[int, ...] = (1, 2, 4, 8, 12, 16, 24),
    length_weights: tuple[float, ...] | None = None,
) -> float:
    """Arrival rate (jobs/slot) expected to hit the target utilization."""
    if length_weights is None:
        length_weights = tuple(1.0 / (i + 1) for i in range(len(length_choices)))
    wsum = sum(length_weights)
    mean_len = sum(l * w for l, w in zip(length_choices, length_weights)) / wsum
    mean_kmin = sum(p.k_min for p in profiles.values()) / len(profiles)
    return target * max_capacity / (mean_len * mean_kmin)


def synthesize_carbon_trace(
    horizon_slots: int,
    seed: int = 0,
    mean: float = 200.0,
    amplitude: float = 100.0,
    period_slots: int = 24,
    noise_sigma: float = 10.0,
    step_minutes: int = 60,
    start: datetime | None = None,
) -> CarbonTrace:
    """Seeded diurnal carbon-intensity trace: a sinusoid plus Gaussian noise,
    floored at a small positive value."""
    rng = np.random.default_rng(seed)
    ts = np.arange(horizon_slots)
    values = mean + amplitude * np.sin(2.0 * np.pi * ts / period_slots)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=horizon_slots)
    values = np.maximum(values, 1.0)
    return CarbonTrace(
        start_time=start or datetime(2022, 4, 1),
        step_minutes=step_minutes,
        values=tuple(float(v) for v in values),
        region="synthetic",
    )


def default_profiles(k_max: int = 8) -> dict[str, ScalingProfile]:
    """Built-in profile library spanning high, moderate and low scalability
    plus an inelastic profile, for synthetic experiments."""
    decay = {"high": 0.97, "moderate": 0.85, "low": 0.60}
    profiles: dict[str, ScalingProfile] = {}
    for name, d in decay.items():
        marginal = tuple(round(d ** i, 6) for i in range(k_max))
        net = tuple(round(40.0 * (1.0 - d) * i, 6) for i in range(k_max))
        profiles[name] = ScalingProfile(
            profile_id=name, k_min=1, k_max=k_max, marginal=marginal, net_gb_per_slot=net
        )
    profiles["rigid"] = ScalingProfile(
        profile_id="rigid", k_min=1, k_max=1, marginal=(1.0,), net_gb_per_slot=(0.0,)
    )
    return profiles


def default_queues() -> tuple[QueueConfig, ...]:
    """Three length-based queues: short jobs get 6 slots of slack, medium 24,
    long 48 (lengths in slots, boundaries at 2 and 12)."""
    return (
        QueueConfig(id="short", slack_slots=6, length_range=(0.0, 2.0)),
        QueueConfig(id="medium", slack_slots=24, length_range=(2.0, 12.0)),
        QueueConfig(id="long", slack_slots=48, length_range=(12.0, math.inf)),
    )


def load_cluster_config(path) -> ClusterConfig:
    """Parse the key/value cluster configuration file.

    Recognized keys: max_capacity, slot_minutes, delta_t_minutes,
    power_per_server_kw, eta_net_w_per_gbps, switch_cost_kwh, queues and
    replay_offsets. Queues are ``id:slack_slots:low-high`` triples separated
    by commas, with ``inf`` allowed as the upper bound.
    """
    raw: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(path, lineno, f"expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()

    def grab(key, cast, default):
        if key not in raw:
            return default
        try:
            return cast(raw.pop(key))
        except (TypeError, ValueError):
            raise ParseError(path, 1, f"bad value for {key!r}")

    queues: tuple[QueueConfig, ...]
    if "queues" in raw:
        queues_spec = raw.pop("queues")
        parsed = []
        for part in queues_spec.split(","):
            part = part.strip()
            if not part:
                continue
            pieces = part.split(":")
            if len(pieces) != 3 or "-" not in pieces[2]:
                raise ParseError(path, 1, f"bad queue spec {part!r}, want id:slack:low-high")
            qid, slack, bounds = pieces
            lo, hi = bounds.split("-", 1)
            parsed.append(
                QueueConfig(
                    id=qid.strip(),
                    slack_slots=int(slack),
                    length_range=(float(lo), math.inf if hi.strip() == "inf" else float(hi)),
                )
            )
        queues = tuple(parsed)
    else:
        queues = default_queues()

    replay_offsets = ()
    if "replay_offsets" in raw:
        replay_offsets = tuple(int(x) for x in raw.pop("replay_offsets").split(",") if x.strip())

    config = ClusterConfig(
        max_capacity=grab("max_capacity", int, 10),
        slot_minutes=grab("slot_minutes", int, 60),
        delta_t_minutes=grab("delta_t_minutes", int, 5),
        power_per_server_kw=grab("power_per_server_kw", float, 0.1),
        eta_net_w_per_gbps=grab("eta_net_w_per_gbps", float, 0.1),
        switch_cost_kwh=grab("switch_cost_kwh", float, 0.0),
        queues=queues,
    )
    if raw:
        raise ParseError(path, 1, f"unknown config keys: {sorted(raw)}")
    # Replay offsets travel with the config file but are not a cluster
    # property; stash them on the side for the CLI.
    object.__setattr__(config, "_replay_offsets", replay_offsets)
    return config


def config_replay_offsets(config: ClusterConfig) -> tuple[int, ...]:
    return getattr(config, "_replay_offsets", ())
