"""Command-line front end.

Subcommands:
  learn     replay history through the offline optimizer, write the knowledge base
  run       compare policies on an evaluation trace, write outcome + logs + figures
  synth     generate a synthetic job trace (and optionally profiles / carbon)
  validate  schema-check input files without running anything

Exit codes: 0 success, 1 runtime infeasibility, 2 usage or parse errors.
Identical inputs and seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

from .baselines import mean_lengths_by_queue
from .errors import CarbonSchedError, DomainError, InfeasibleError, ParseError, TraceRangeError
from .learning import load_knowledge_base, save_knowledge_base
from .policy import ProvisioningParams
from .report import format_table, write_report
from .sim import POLICY_NAMES, compare, run_learning
from . import traces

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_USAGE = 2


def _offsets(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad offset list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carbonsched",
        description="Carbon-aware cluster provisioning and scheduling simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    learn = sub.add_parser("learn", help="build the knowledge base from a historical window")
    learn.add_argument("--config", required=True, help="cluster config file")
    learn.add_argument("--carbon", required=True, help="carbon-intensity CSV")
    learn.add_argument("--jobs", required=True, help="historical job trace CSV")
    learn.add_argument("--profiles", required=True, help="scaling-profile CSV")
    learn.add_argument("--out", required=True, help="knowledge-base CSV to write")
    learn.add_argument("--replay-offsets", type=_offsets, default=None,
                       help="comma-separated start offsets, e.g. 0,24 (default from config or 0)")
    learn.add_argument("--window-slots", type=int, default=None,
                       help="historical window length (default: latest job deadline)")
    learn.add_argument("--window-days", type=int, default=14,
                       help="rolling-window age limit for stored cases")
    learn.add_argument("--max-rounds", type=int, default=10,
                       help="slack-extension rounds before a replay is abandoned")

    run = sub.add_parser("run", help="compare scheduling policies on an evaluation trace")
    run.add_argument("--config", required=True)
    run.add_argument("--carbon", required=True)
    run.add_argument("--jobs", required=True)
    run.add_argument("--profiles", required=True)
    run.add_argument("--policies", required=True,
                     help=f"comma-separated subset of: {', '.join(POLICY_NAMES)}")
    run.add_argument("--kb", default=None, help="knowledge base (required for carbonflex)")
    run.add_argument("--out-dir", required=True)
    run.add_argument("--seed", type=int, default=0, help="recorded in the outcome for provenance")
    run.add_argument("--kk", type=int, default=5, help="neighbors retrieved per provisioning step")
    run.add_argument("--delta", type=float, default=0.5, help="acceptable mean match distance")
    run.add_argument("--epsilon", type=float, default=0.1, help="tolerated recent violation rate")
    run.add_argument("--violation-window", type=int, default=1,
                     help="lookback (slots) for the violation rate")
    run.add_argument("--horizon", type=int, default=None, help="evaluation horizon in slots")
    run.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    synth = sub.add_parser("synth", help="generate a synthetic job trace")
    synth.add_argument("--rate", type=float, default=None, help="mean arrivals per slot")
    synth.add_argument("--target-utilization", type=float, default=None,
                       help="tune the rate to hit this utilization instead")
    synth.add_argument("--capacity", type=int, default=None,
                       help="cluster capacity the utilization target refers to")
    synth.add_argument("--slots", type=int, required=True, help="trace length in slots")
    synth.add_argument("--length-dist", default="mixed",
                       help="job-length distribution: mixed, uniform:LO,HI or fixed:N")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="job CSV to write")
    synth.add_argument("--profiles", default=None,
                       help="profile CSV to draw from (default: built-in library)")
    synth.add_argument("--profiles-out", default=None,
                       help="also write the profile library used to this CSV")
    synth.add_argument("--carbon-out", default=None,
                       help="also write a synthetic diurnal carbon trace to this CSV")

    val = sub.add_parser("validate", help="schema-check config, profiles, carbon and job files")
    val.add_argument("--config", required=True)
    val.add_argument("--carbon", required=True)
    val.add_argument("--jobs", required=True)
    val.add_argument("--profiles", required=True)

    return parser


def _load_inputs(args):
    cluster = traces.load_cluster_config(args.config)
    profiles = traces.load_profiles(args.profiles)
    carbon = traces.load_carbon_trace(args.carbon)
    jobs = traces.load_jobs(args.jobs, cluster.queues, profiles)
    return cluster, profiles, carbon, jobs


def cmd_learn(args) -> int:
    cluster, _profiles, carbon, jobs = _load_inputs(args)
    offsets = args.replay_offsets
    if offsets is None:
        offsets = traces.config_replay_offsets(cluster) or (0,)
    report: list = []
    kb = run_learning(
        jobs, carbon, cluster,
        replay_offsets=offsets,
        window_slots=args.window_slots,
        window_days=args.window_days,
        max_rounds=args.max_rounds,
        replay_report=report,
    )
    meta = {
        f"mean_length_{q}": repr(v) for q, v in sorted(mean_lengths_by_queue(jobs).items())
    }
    save_knowledge_base(kb, args.out, cluster.queues, extra_meta=meta)
    print(f"learned {len(kb)} cases from {len(offsets)} replay(s) of {len(jobs)} jobs")
    feasible = sum(1 for _, ok, _ in report if ok)
    extended = sum(n for _, ok, n in report if ok)
    print(
        f"replays feasible: {feasible}/{len(report)}"
        + (f" (slack extended for {extended} job-rounds)" if extended else "")
    )
    for offset, ok, _ in report:
        if not ok:
            print(f"warning: replay at offset {offset} stayed infeasible and was skipped",
                  file=sys.stderr)
    print(f"knowledge base written to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cluster, _profiles, carbon, jobs = _load_inputs(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in POLICY_NAMES]
    if unknown:
        print(
            f"error: unknown policy name(s) {', '.join(unknown)}; "
            f"valid names: {', '.join(POLICY_NAMES)}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    kb = None
    mean_lengths = None
    if args.kb:
        kb, meta = load_knowledge_base(args.kb)
        learned_means = {
            key[len("mean_length_"):]: float(value)
            for key, value in meta.items()
            if key.startswith("mean_length_")
        }
        if learned_means:
            mean_lengths = learned_means
    elif "carbonflex" in policies:
        print("error: --kb is required when running the carbonflex policy", file=sys.stderr)
        return EXIT_USAGE
    params = ProvisioningParams(
        kk=args.kk, delta=args.delta, epsilon=args.epsilon,
        violation_window_slots=args.violation_window,
    )
    outcome = compare(
        jobs, carbon, cluster, policies,
        kb=kb, params=params, mean_lengths=mean_lengths, horizon=args.horizon,
    )
    config_echo = {
        "config": os.path.abspath(args.config),
        "carbon": os.path.abspath(args.carbon),
        "jobs": os.path.abspath(args.jobs),
        "profiles": os.path.abspath(args.profiles),
        "kb": os.path.abspath(args.kb) if args.kb else None,
        "policies": policies,
        "seed": args.seed,
        "kk": args.kk,
        "delta": args.delta,
        "epsilon": args.epsilon,
        "violation_window": args.violation_window,
        "horizon": args.horizon,
        "max_capacity": cluster.max_capacity,
        "slot_minutes": cluster.slot_minutes,
        "delta_t_minutes": cluster.delta_t_minutes,
    }
    artifacts = write_report(outcome, carbon, args.out_dir, config=config_echo,
                             figures=not args.no_figures)
    print(format_table(outcome))
    print(f"outcome written to {artifacts['outcome']}")
    incomplete = [
        name for name, stats in outcome.per_policy.items() if stats.incomplete_jobs
    ]
    if incomplete:
        print(f"warning: incomplete jobs under: {', '.join(incomplete)}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.profiles:
        profiles = traces.load_profiles(args.profiles)
    else:
        profiles = traces.default_profiles()
    queues = traces.default_queues()
    if args.rate is None and args.target_utilization is None:
        print("error: pass either --rate or --target-utilization", file=sys.stderr)
        return EXIT_USAGE
    choices, weights = traces.parse_length_dist(args.length_dist)
    rate = args.rate
    capacity = args.capacity or 10
    if rate is None:
        rate = traces.rate_for_utilization(
            args.target_utilization, capacity, profiles,
            length_choices=choices, length_weights=weights,
        )
    jobs = traces.synthesize_jobs(
        rate, args.slots, profiles, queues, seed=args.seed,
        length_choices=choices, length_weights=weights,
    )
    traces.write_jobs(jobs, args.out)
    util = traces.estimate_utilization(jobs, capacity, args.slots)
    print(
        f"wrote {len(jobs)} jobs to {args.out}; estimated utilization "
        f"{util:.3f} at capacity {capacity}",
        file=sys.stderr,
    )
    if args.profiles_out:
        traces.write_profiles(profiles, args.profiles_out)
    if args.carbon_out:
        # Cover the latest deadline plus drain and the day-ahead forecast:
        # job windows can extend a full long-queue slack past the horizon.
        slack_margin = max((q.slack_slots for q in queues), default=0)
        extent = args.slots + slack_margin + 26 + max(
            (int(j.length) for j in jobs), default=0
        )
        trace = traces.synthesize_carbon_trace(extent + 48, seed=args.seed)
        traces.write_carbon_trace(trace, args.carbon_out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cluster, profiles, carbon, jobs = _load_inputs(args)
    print(
        f"config ok: M={cluster.max_capacity}, slot={cluster.slot_minutes}min, "
        f"delta_t={cluster.delta_t_minutes}min, queues={[q.id for q in cluster.queues]}"
    )
    print(f"profiles ok: {len(profiles)} ({', '.join(sorted(profiles))})")
    print(f"carbon ok: {len(carbon)} slots from {carbon.timestamp_at(0).isoformat()}")
    print(f"jobs ok: {len(jobs)}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handlers = {
        "learn": cmd_learn,
        "run": cmd_run,
        "synth": cmd_synth,
        "validate": cmd_validate,
    }
    try:
        return handlers[args.command](args)
    except (ParseError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleError, TraceRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CarbonSchedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
