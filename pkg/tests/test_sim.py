"""Learn-then-execute pipeline, the comparison harness, and its outcome
invariants (log-to-total consistency, work conservation, determinism)."""

import json

import numpy as np
import pytest

from carbonsched.errors import DomainError, InfeasibleError, TraceRangeError
from carbonsched.model import cumulative_throughput, total_carbon
from carbonsched.oracle import brute_force_schedule, retry_with_extension
from carbonsched.sim import (
    POLICY_NAMES,
    compare,
    default_horizon,
    evaluate_schedule,
    run_execution,
    run_learning,
)
from carbonsched import traces

from conftest import make_cluster, make_job, make_trace


def _week_setup(seed_hist=5, seed_eval=9, capacity=10, rate=1.0, slots=168):
    profiles = traces.default_profiles(k_max=4)
    queues = traces.default_queues()
    cluster = make_cluster(capacity, delta_t_minutes=5, eta=0.0, queues=queues)
    trace = traces.synthesize_carbon_trace(slots + 120, seed=3)
    hist = traces.synthesize_jobs(rate, slots, profiles, queues, seed=seed_hist)
    evals = traces.synthesize_jobs(rate, slots, profiles, queues, seed=seed_eval)
    return profiles, queues, cluster, trace, hist, evals


# ---------------------------------------------------------------------------
# run_learning
# ---------------------------------------------------------------------------

def test_learning_one_case_per_window_slot():
    _, _, cluster, trace, hist, _ = _week_setup(rate=0.5)
    kb = run_learning(hist, trace, cluster, replay_offsets=(0,), window_slots=168)
    assert len(kb) == 168


def test_learning_two_offsets_double_the_cases():
    _, _, cluster, trace, hist, _ = _week_setup(rate=0.5)
    kb = run_learning(hist, trace, cluster, replay_offsets=(0, 24), window_slots=168)
    assert len(kb) == 336


def test_learning_offset_beyond_trace():
    _, _, cluster, trace, hist, _ = _week_setup(rate=0.5)
    with pytest.raises(TraceRangeError):
        run_learning(hist, trace, cluster, replay_offsets=(10_000,), window_slots=168)


def test_learning_error_when_every_replay_is_infeasible():
    job = make_job("a", length=2, slack=0, marginal=(1.0,))
    trace = make_trace([1.0] * 60)
    cluster = make_cluster(0, delta_t_minutes=60)
    with pytest.raises(InfeasibleError):
        run_learning([job], trace, cluster, replay_offsets=(0,), window_slots=4, max_rounds=2)


# ---------------------------------------------------------------------------
# run_execution
# ---------------------------------------------------------------------------

def test_execution_empty_job_list():
    _, _, cluster, trace, hist, _ = _week_setup(rate=0.5)
    kb = run_learning(hist, trace, cluster, replay_offsets=(0,), window_slots=168)
    stats = run_execution([], trace, cluster, kb)
    assert stats.total_carbon_g == 0.0
    assert stats.mean_wait_hours == 0.0
    assert stats.completed == 0


def test_execution_zero_capacity_flags_everything():
    queues = traces.default_queues()
    job = make_job("a", length=1, slack=2, marginal=(1.0,), queue="short")
    trace = make_trace([100.0] * 60)
    cluster_learn = make_cluster(2, delta_t_minutes=60, queues=queues)
    kb = run_learning([job], trace, cluster_learn, replay_offsets=(0,), window_slots=4)
    cluster_zero = make_cluster(0, delta_t_minutes=60, queues=queues)
    stats = run_execution([job], trace, cluster_zero, kb, horizon=10)
    assert stats.incomplete_jobs == ("a",)
    assert stats.violation_rate == 1.0
    assert stats.total_carbon_g == 0.0


def test_execution_self_replay_tracks_oracle_closely():
    # Learning on the exact evaluation window; the learned policy must stay
    # within a few percent of the offline schedule it was trained on. The
    # window defaults to the latest deadline so late arrivals are covered.
    _, _, cluster, trace, _, evals = _week_setup(rate=1.0)
    kb = run_learning(evals, trace, cluster, replay_offsets=(0,))
    stats = run_execution(evals, trace, cluster, kb)
    oracle = retry_with_extension(evals, trace, cluster)
    oracle_carbon = total_carbon(oracle.schedule, evals, trace, cluster)
    assert stats.total_carbon_g <= oracle_carbon * 1.05
    assert not stats.incomplete_jobs


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def test_compare_rejects_unknown_policy():
    _, _, cluster, trace, _, evals = _week_setup(rate=0.3)
    with pytest.raises(DomainError):
        compare(evals, trace, cluster, ["fifo"])


def test_compare_requires_kb_for_learned_policy():
    _, _, cluster, trace, _, evals = _week_setup(rate=0.3)
    with pytest.raises(DomainError):
        compare(evals, trace, cluster, ["carbonflex"])


def test_compare_single_policy_row():
    _, _, cluster, trace, _, evals = _week_setup(rate=0.5)
    outcome = compare(evals, trace, cluster, ["carbon-agnostic"])
    assert list(outcome.per_policy) == ["carbon-agnostic"]
    assert outcome.per_policy["carbon-agnostic"].savings_pct == 0.0


def test_compare_constant_trace_gives_no_savings():
    profiles = traces.default_profiles(k_max=3)
    queues = traces.default_queues()
    cluster = make_cluster(8, delta_t_minutes=60, eta=0.0, queues=queues)
    trace = make_trace([150.0] * 220)
    evals = traces.synthesize_jobs(0.6, 100, profiles, queues, seed=21)
    outcome = compare(evals, trace, cluster, ["carbon-agnostic", "oracle", "wait-awhile"])
    assert outcome.per_policy["oracle"].savings_pct == pytest.approx(0.0, abs=1e-9)
    assert outcome.per_policy["wait-awhile"].savings_pct == pytest.approx(0.0, abs=1e-9)


def test_compare_diurnal_trace_orders_policies():
    _, _, cluster, trace, hist, evals = _week_setup()
    kb = run_learning(hist, trace, cluster, replay_offsets=(0,), window_slots=168)
    outcome = compare(
        evals, trace, cluster, ["carbon-agnostic", "carbonflex", "oracle"], kb=kb,
    )
    s = {name: st.savings_pct for name, st in outcome.per_policy.items()}
    assert s["oracle"] >= s["carbonflex"] >= 0.0
    assert s["carbon-agnostic"] == 0.0


def test_log_rows_sum_to_total_and_price_energy():
    _, _, cluster, trace, hist, evals = _week_setup(rate=0.8)
    kb = run_learning(hist, trace, cluster, replay_offsets=(0,), window_slots=168)
    outcome = compare(evals, trace, cluster, list(POLICY_NAMES), kb=kb)
    for stats in outcome.per_policy.values():
        for row in stats.log:
            assert row.carbon_g == row.energy_kwh * row.ci
        assert sum(r.carbon_g for r in stats.log) == pytest.approx(
            stats.total_carbon_g, rel=1e-9, abs=1e-9
        )


def test_evaluate_schedule_consistent_with_model_accounting():
    rng = np.random.default_rng(2)
    jobs = [
        make_job(f"j{i}", arrival=int(rng.integers(0, 4)), length=int(rng.integers(1, 3)),
                 slack=2, marginal=(1.0, 0.8))
        for i in range(4)
    ]
    trace = make_trace([float(v) for v in rng.uniform(20, 300, 40)])
    cluster = make_cluster(4, delta_t_minutes=5, eta=0.0)
    result = retry_with_extension(jobs, trace, cluster)
    stats = evaluate_schedule("oracle", result.schedule, jobs, trace, cluster)
    assert stats.total_carbon_g == pytest.approx(
        total_carbon(result.schedule, jobs, trace, cluster), rel=1e-12
    )


def test_work_conservation_within_subslot_quantum():
    _, _, cluster, trace, hist, evals = _week_setup(rate=0.6)
    outcome = compare(evals, trace, cluster, ["carbon-agnostic", "oracle", "wait-awhile"])
    for name in ("carbon-agnostic", "oracle", "wait-awhile"):
        assert not outcome.per_policy[name].incomplete_jobs
    result = retry_with_extension(evals, trace, cluster)
    for job in evals:
        sched = result.schedule
        done = sched.completion[job.id]
        assert done is not None
        work = sum(
            cumulative_throughput(job.profile, k) * sched.active_fraction(job.id, t)
            for t, k in sched.allocations[job.id].items()
        )
        final_rate = cumulative_throughput(job.profile, sched.allocations[job.id][done[0]])
        assert job.length - 1e-9 <= work <= job.length + final_rate / cluster.subslots + 1e-9


def test_monotone_slack_never_hurts_exhaustive_optimum():
    rng = np.random.default_rng(41)
    for _ in range(20):
        marg = (1.0, round(float(rng.uniform(0.5, 0.95)), 4))
        base_jobs = [
            make_job(f"j{i}", arrival=int(rng.integers(0, 2)), length=int(rng.integers(1, 3)),
                     slack=0, marginal=marg)
            for i in range(int(rng.integers(1, 3)))
        ]
        trace = make_trace([float(v) for v in rng.uniform(10, 300, 12)])
        cluster = make_cluster(4, delta_t_minutes=60, eta=0.0)
        previous = None
        for extra in (0, 1, 2):
            jobs = [
                make_job(j.id, arrival=j.arrival, length=j.length, slack=j.slack + extra,
                         marginal=marg)
                for j in base_jobs
            ]
            result = brute_force_schedule(jobs, trace, cluster)
            assert result.feasible
            carbon = total_carbon(result.schedule, jobs, trace, cluster)
            if previous is not None:
                assert carbon <= previous + 1e-9
            previous = carbon


def test_outcome_json_is_deterministic():
    _, _, cluster, trace, hist, evals = _week_setup(rate=0.7)
    kb = run_learning(hist, trace, cluster, replay_offsets=(0,), window_slots=168)
    a = compare(evals, trace, cluster, ["carbon-agnostic", "carbonflex"], kb=kb)
    b = compare(evals, trace, cluster, ["carbon-agnostic", "carbonflex"], kb=kb)
    assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(
        b.to_json_dict(), sort_keys=True
    )


def test_default_horizon_leaves_forecast_room():
    _, _, cluster, trace, _, evals = _week_setup(rate=0.5)
    horizon = default_horizon(evals, trace, cluster)
    assert horizon + 25 <= len(trace)
    assert horizon >= max(int(j.deadline) for j in evals)
