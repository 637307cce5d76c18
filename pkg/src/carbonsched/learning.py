"""Historical learning: featurize system states, extract (state -> decision)
cases from offline-optimal schedules, and serve nearest-neighbor queries
over a rolling-window knowledge base.

The feature vector is, in fixed order: carbon intensity, its one-slot
backward gradient, its rank against the day-ahead forecast, the per-queue
count of jobs in the system, and the mean elasticity of those jobs.
Distances are Euclidean over min-max normalized features with equal
weights. The index is a small KD-tree built on the same distance function
as the linear-scan reference, so both routes agree to the last bit and
ties always resolve by insertion order.
"""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from datetime import datetime, timedelta

from .errors import EmptyKnowledgeBaseError, InfeasibleError, ParseError
from .model import IDLE_THRESHOLD, CarbonTrace, Job, QueueConfig
from .oracle import OracleResult
from .traces import forecast_window

FORECAST_SLOTS = 24


@dataclass(frozen=True)
class SystemState:
    """Featurized cluster state at one provisioning instant."""

    ci: float
    ci_gradient: float
    ci_rank: float
    queue_lengths: tuple[int, ...]
    mean_elasticity: float

    def vector(self) -> tuple[float, ...]:
        return (self.ci, self.ci_gradient, self.ci_rank,
                *(float(n) for n in self.queue_lengths), self.mean_elasticity)


@dataclass(frozen=True)
class Case:
    """One learned mapping from a system state to the capacity and threshold
    an offline-optimal run chose in that state."""

    state: SystemState
    capacity: int
    threshold: float
    created_at: datetime


def job_elasticity(job: Job) -> float:
    """Scalar elasticity: mean marginal throughput above the base scale,
    which is 1 for perfectly linear scaling and 0 for a rigid job."""
    if job.profile.k_max == job.profile.k_min:
        return 0.0
    tail = job.profile.marginal[1:]
    return sum(tail) / len(tail)


def featurize(
    t: int,
    trace: CarbonTrace,
    jobs_in_system: list[Job],
    queues: list[QueueConfig] | tuple[QueueConfig, ...],
) -> SystemState:
    """Build the state vector for slot t.

    The rank compares the current intensity against the next 24 forecast
    slots (t excluded): the fraction of them strictly below CI_t, so 0 means
    no better slot is coming and 1 means every coming slot is better.
    """
    ci = trace.ci(t)
    gradient = ci - trace.ci(t - 1) if t >= 1 else 0.0
    ahead = forecast_window(trace, t + 1, FORECAST_SLOTS)
    rank = sum(1 for v in ahead if v < ci) / FORECAST_SLOTS
    counts = tuple(sum(1 for j in jobs_in_system if j.queue == q.id) for q in queues)
    if jobs_in_system:
        elasticity = sum(job_elasticity(j) for j in jobs_in_system) / len(jobs_in_system)
    else:
        elasticity = 0.0
    return SystemState(
        ci=ci,
        ci_gradient=gradient,
        ci_rank=rank,
        queue_lengths=counts,
        mean_elasticity=elasticity,
    )


def jobs_in_system_under(result: OracleResult, jobs: list[Job], t: int) -> list[Job]:
    """Jobs that have arrived and are still unfinished at slot t when the
    cluster follows the given offline schedule."""
    active = []
    for job in jobs:
        if job.arrival > t:
            continue
        done = result.completion_time(job.id)
        if done is None or done > t:
            active.append(job)
    return active


def extract_cases(
    result: OracleResult,
    trace: CarbonTrace,
    jobs: list[Job],
    queues: list[QueueConfig] | tuple[QueueConfig, ...],
    window_slots: int,
) -> list[Case]:
    """One case per slot of the historical window, stating what the offline
    run provisioned and admitted in the state it was in."""
    if not result.feasible:
        raise InfeasibleError("cannot learn from an infeasible schedule")
    covered = len(result.per_slot_capacity)
    cases = []
    for t in range(window_slots):
        state = featurize(t, trace, jobs_in_system_under(result, jobs, t), queues)
        # Slots past the last deadline are idle by construction.
        capacity = result.per_slot_capacity[t] if t < covered else 0
        threshold = result.per_slot_threshold[t] if t < covered else IDLE_THRESHOLD
        cases.append(
            Case(
                state=state,
                capacity=capacity,
                threshold=threshold,
                created_at=trace.timestamp_at(t),
            )
        )
    return cases


class _KDNode:
    __slots__ = ("index", "axis", "left", "right")

    def __init__(self, index, axis, left, right):
        self.index = index
        self.axis = axis
        self.left = left
        self.right = right


def _build_kdtree(points: list[tuple[float, ...]], indices: list[int], depth: int):
    if not indices:
        return None
    axis = depth % len(points[0])
    indices = sorted(indices, key=lambda i: (points[i][axis], i))
    mid = len(indices) // 2
    return _KDNode(
        index=indices[mid],
        axis=axis,
        left=_build_kdtree(points, indices[:mid], depth + 1),
        right=_build_kdtree(points, indices[mid + 1:], depth + 1),
    )


def _sqdist(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    total = 0.0
    for x, y in zip(a, b):
        d = x - y
        total += d * d
    return total


def _knn_search(node, points, query, kk, heap):
    """Best-first descent with backtracking. ``heap`` holds the current best
    (sqdist, index) pairs, worst kept at heap[0] via negation; ties prefer
    the smaller insertion index."""
    if node is None:
        return
    d = _sqdist(points[node.index], query)
    entry = (-d, -node.index)
    if len(heap) < kk:
        heapq.heappush(heap, entry)
    elif entry > heap[0]:
        heapq.heapreplace(heap, entry)
    axis_gap = query[node.axis] - points[node.index][node.axis]
    near, far = (node.left, node.right) if axis_gap <= 0 else (node.right, node.left)
    _knn_search(near, points, query, kk, heap)
    worst = -heap[0][0]
    if len(heap) < kk or axis_gap * axis_gap <= worst:
        _knn_search(far, points, query, kk, heap)


class KnowledgeBase:
    """Aged collection of cases with a KD-tree over normalized features.

    Safe for concurrent reads once built; ``refresh`` returns a new instance
    rather than mutating in place.
    """

    def __init__(self, cases: list[Case], window_days: int = 14):
        self.cases: list[Case] = list(cases)
        self.window_days = window_days
        self.feature_count = len(cases[0].state.vector()) if cases else 0
        self.normalization: list[tuple[float, float]] = []
        self._points: list[tuple[float, ...]] = []
        self._root = None
        if self.cases:
            self._rebuild()

    def _rebuild(self):
        vectors = [c.state.vector() for c in self.cases]
        dims = len(vectors[0])
        if any(len(v) != dims for v in vectors):
            raise ValueError("inconsistent feature vector lengths in knowledge base")
        self.feature_count = dims
        self.normalization = [
            (min(v[d] for v in vectors), max(v[d] for v in vectors)) for d in range(dims)
        ]
        self._points = [self.normalize(v, clamp=False) for v in vectors]
        self._root = _build_kdtree(self._points, list(range(len(self._points))), 0)

    def normalize(self, vector: tuple[float, ...], clamp: bool = True) -> tuple[float, ...]:
        """Min-max scale a raw feature vector; query vectors clamp to [0, 1]
        so unseen extremes cannot dominate the distance."""
        out = []
        for d, x in enumerate(vector):
            lo, hi = self.normalization[d]
            v = 0.0 if hi <= lo else (x - lo) / (hi - lo)
            if clamp:
                v = min(max(v, 0.0), 1.0)
            out.append(v)
        return tuple(out)

    def __len__(self) -> int:
        return len(self.cases)


def query(kb: KnowledgeBase, state: SystemState, kk: int = 5) -> list[tuple[Case, float]]:
    """The kk nearest stored cases by Euclidean distance in normalized
    feature space, nearest first; ties resolve by insertion order."""
    if len(kb) == 0:
        raise EmptyKnowledgeBaseError(
            "knowledge base is empty; run the learning phase first"
        )
    kk = min(kk, len(kb))
    q = kb.normalize(state.vector())
    heap: list[tuple[float, int]] = []
    _knn_search(kb._root, kb._points, q, kk, heap)
    ranked = sorted((-nd, -ni) for nd, ni in heap)
    return [(kb.cases[i], math.sqrt(sq)) for sq, i in ranked]


def query_linear(kb: KnowledgeBase, state: SystemState, kk: int = 5) -> list[tuple[Case, float]]:
    """Reference linear scan with identical distance and tie semantics; the
    index must agree with this on every query."""
    if len(kb) == 0:
        raise EmptyKnowledgeBaseError(
            "knowledge base is empty; run the learning phase first"
        )
    kk = min(kk, len(kb))
    q = kb.normalize(state.vector())
    scored = sorted((_sqdist(p, q), i) for i, p in enumerate(kb._points))
    return [(kb.cases[i], math.sqrt(sq)) for sq, i in scored[:kk]]


def refresh(kb: KnowledgeBase, new_cases: list[Case], now: datetime) -> KnowledgeBase:
    """Age out cases older than the rolling window, insert the new ones, and
    rebuild normalization and the index."""
    horizon = timedelta(days=kb.window_days)
    kept = [c for c in kb.cases if now - c.created_at <= horizon]
    kept.extend(c for c in new_cases if now - c.created_at <= horizon)
    return KnowledgeBase(kept, window_days=kb.window_days)


def save_knowledge_base(kb: KnowledgeBase, path, queues, extra_meta: dict | None = None) -> None:
    """Persist cases to CSV with a commented header carrying the window,
    queue order, normalization bounds and any extra metadata."""
    queue_ids = [q.id for q in queues]
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        fh.write(f"# window_days={kb.window_days}\n")
        fh.write(f"# queues={','.join(queue_ids)}\n")
        if kb.normalization:
            lo = ",".join(repr(b[0]) for b in kb.normalization)
            hi = ",".join(repr(b[1]) for b in kb.normalization)
            fh.write(f"# norm_lo={lo}\n")
            fh.write(f"# norm_hi={hi}\n")
        for key, value in sorted((extra_meta or {}).items()):
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["created_at", "capacity", "threshold", "ci", "ci_gradient", "ci_rank"]
            + [f"n_{qid}" for qid in queue_ids]
            + ["mean_elasticity"]
        )
        for case in kb.cases:
            writer.writerow(
                [case.created_at.isoformat(), case.capacity, repr(case.threshold),
                 repr(case.state.ci), repr(case.state.ci_gradient), repr(case.state.ci_rank)]
                + list(case.state.queue_lengths)
                + [repr(case.state.mean_elasticity)]
            )


def load_knowledge_base(path) -> tuple[KnowledgeBase, dict]:
    """Load a persisted knowledge base; the index is rebuilt from the rows.
    Returns the base and the header metadata."""
    meta: dict[str, str] = {}
    rows: list[list[str]] = []
    header: list[str] | None = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, value = body.split("=", 1)
                    meta[key.strip()] = value.strip()
                continue
            if not line.strip():
                continue
            parsed = next(csv.reader([line]))
            if header is None:
                header = parsed
            else:
                rows.append(parsed)
    if header is None:
        raise ParseError(path, 1, "knowledge base file has no case table")
    queue_ids = [c[2:] for c in header if c.startswith("n_")]
    cases = []
    for i, row in enumerate(rows, start=1):
        record = dict(zip(header, row))
        try:
            state = SystemState(
                ci=float(record["ci"]),
                ci_gradient=float(record["ci_gradient"]),
                ci_rank=float(record["ci_rank"]),
                queue_lengths=tuple(int(record[f"n_{qid}"]) for qid in queue_ids),
                mean_elasticity=float(record["mean_elasticity"]),
            )
            cases.append(
                Case(
                    state=state,
                    capacity=int(record["capacity"]),
                    threshold=float(record["threshold"]),
                    created_at=datetime.fromisoformat(record["created_at"]),
                )
            )
        except (KeyError, TypeError, ValueError):
            raise ParseError(path, i, f"bad case row {row!r}")
    window_days = int(meta.get("window_days", 14))
    return KnowledgeBase(cases, window_days=window_days), meta
