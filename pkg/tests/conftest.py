"""Shared fixtures and builders for the test suite."""

import math
from datetime import datetime

import pytest

from carbonsched.model import CarbonTrace, ClusterConfig, Job, QueueConfig, ScalingProfile

CATCH_ALL_QUEUE = QueueConfig(id="q", slack_slots=0, length_range=(0.0, math.inf))


def make_profile(marginal, net=None, pid="p", k_min=1):
    marginal = tuple(marginal)
    net = tuple(net) if net is not None else tuple(0.0 for _ in marginal)
    return ScalingProfile(
        profile_id=pid,
        k_min=k_min,
        k_max=k_min + len(marginal) - 1,
        marginal=marginal,
        net_gb_per_slot=net,
    )


def make_job(jid="j0", arrival=0, length=1.0, slack=0, marginal=(1.0,), net=None, queue="q"):
    return Job(
        id=jid,
        arrival=arrival,
        length=float(length),
        queue=queue,
        slack=slack,
        profile=make_profile(marginal, net, pid=f"prof-{jid}"),
    )


def make_trace(values, step_minutes=60, start=None):
    return CarbonTrace(
        start_time=start or datetime(2022, 4, 1),
        step_minutes=step_minutes,
        values=tuple(float(v) for v in values),
        region="test",
    )


def make_cluster(max_capacity, slot_minutes=60, delta_t_minutes=5, power=0.1,
                 eta=0.1, switch=0.0, queues=(CATCH_ALL_QUEUE,)):
    return ClusterConfig(
        max_capacity=max_capacity,
        queues=tuple(queues),
        slot_minutes=slot_minutes,
        delta_t_minutes=delta_t_minutes,
        power_per_server_kw=power,
        eta_net_w_per_gbps=eta,
        switch_cost_kwh=switch,
    )


@pytest.fixture
def unit_cluster():
    """One-hour slots at whole-slot granularity, 0.1 kW servers, no network."""
    return make_cluster(max_capacity=4, delta_t_minutes=60, eta=0.0)
