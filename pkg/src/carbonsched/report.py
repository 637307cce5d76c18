"""Report rendering: the savings table, per-policy decision-log CSVs, the
outcome JSON, and the figures written next to them.

Figures use a fixed style and carry no timestamps, so identical runs
produce identical files.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .model import CarbonTrace
from .sim import SimOutcome

_POLICY_COLORS = {
    "carbon-agnostic": "#888888",
    "gaia": "#8c564b",
    "wait-awhile": "#1f77b4",
    "carbonscaler": "#ff7f0e",
    "carbonflex": "#2ca02c",
    "oracle": "#111111",
}


def format_table(outcome: SimOutcome) -> str:
    """Plain-text summary: one row per policy with carbon, savings and wait."""
    header = f"{'policy':<16} {'carbon_g':>14} {'savings_%':>10} {'mean_wait_h':>12} {'viol_rate':>10}"
    lines = [header, "-" * len(header)]
    for name, stats in outcome.per_policy.items():
        lines.append(
            f"{name:<16} {stats.total_carbon_g:>14.3f} {stats.savings_pct:>10.2f} "
            f"{stats.mean_wait_hours:>12.2f} {stats.violation_rate:>10.3f}"
        )
    return "\n".join(lines)


def write_outcome_json(outcome: SimOutcome, path, config: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(outcome.to_json_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_policy_logs(outcome: SimOutcome, out_dir) -> list[str]:
    """One decision-log CSV per policy: slot, ci, mode, m_t, rho, forced
    jobs, allocations, energy and carbon."""
    paths = []
    for name, stats in outcome.per_policy.items():
        path = os.path.join(out_dir, f"log_{name.replace('-', '_')}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema={outcome.schema_version}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["slot", "ci", "mode", "m_t", "rho", "forced_jobs", "allocations",
                 "energy_kwh", "carbon_g"]
            )
            for row in stats.log:
                writer.writerow([
                    row.slot,
                    repr(row.ci),
                    row.mode,
                    row.m_t,
                    repr(row.rho),
                    ";".join(row.forced_jobs),
                    ";".join(f"{jid}={k}" for jid, k in row.allocations),
                    repr(row.energy_kwh),
                    repr(row.carbon_g),
                ])
        paths.append(path)
    return paths


def render_savings_figure(outcome: SimOutcome, path) -> None:
    """Bar chart of total emissions per policy with savings annotated on top."""
    names = list(outcome.per_policy)
    carbons = [outcome.per_policy[n].total_carbon_g for n in names]
    savings = [outcome.per_policy[n].savings_pct for n in names]
    colors = [_POLICY_COLORS.get(n, "#444444") for n in names]
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(names), 3.4))
    bars = ax.bar(names, carbons, color=colors)
    for bar, pct in zip(bars, savings):
        ax.annotate(
            f"{pct:.1f}%",
            (bar.get_x() + bar.get_width() / 2, bar.get_height()),
            ha="center", va="bottom", fontsize=8,
        )
    ax.set_ylabel("carbon (g CO2eq)")
    ax.set_title("total emissions and savings vs carbon-agnostic")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_timeline_figure(outcome: SimOutcome, trace: CarbonTrace, path) -> None:
    """Carbon-intensity curve with each policy's occupied capacity below it."""
    horizon = max((len(stats.log) for stats in outcome.per_policy.values()), default=0)
    if horizon == 0:
        horizon = min(len(trace), 24)
    fig, (top, bottom) = plt.subplots(
        2, 1, figsize=(8, 4.6), sharex=True, height_ratios=[1, 1.6]
    )
    ts = list(range(horizon))
    top.plot(ts, [trace.ci(t) for t in ts], color="#555555", lw=1.2)
    top.set_ylabel("CI (g/kWh)")
    for name, stats in outcome.per_policy.items():
        occupancy = {row.slot: sum(k for _, k in row.allocations) for row in stats.log}
        bottom.step(
            ts, [occupancy.get(t, 0) for t in ts], where="post",
            label=name, color=_POLICY_COLORS.get(name, "#444444"), lw=1.1,
        )
    bottom.set_xlabel("slot")
    bottom.set_ylabel("busy servers")
    bottom.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(outcome: SimOutcome, trace: CarbonTrace, out_dir,
                 config: dict | None = None, figures: bool = True) -> dict[str, object]:
    """Emit the outcome JSON, per-policy logs and (optionally) the figures
    into ``out_dir``; returns the artifact paths."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "outcome.json")
    write_outcome_json(outcome, json_path, config)
    log_paths = write_policy_logs(outcome, out_dir)
    artifacts: dict[str, object] = {"outcome": json_path, "logs": log_paths}
    if figures:
        savings_path = os.path.join(out_dir, "carbon_savings.png")
        timeline_path = os.path.join(out_dir, "cluster_timeline.png")
        render_savings_figure(outcome, savings_path)
        render_timeline_figure(outcome, trace, timeline_path)
        artifacts["figures"] = [savings_path, timeline_path]
    return artifacts
