"""Metrics tables, summary statistics, and distribution plots.

Consumes planner evaluation results (and optionally a second variant for a
paired comparison) or rollout logs; writes machine-readable JSONL tables,
a JSON summary, and static distribution plots per metric.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .planner import EvalResult  # noqa: E402
from .simulate import RolloutLog  # noqa: E402

METRIC_NAMES = ("ade", "fde", "heading_violation", "velocity_violation")


def _stats(arr: np.ndarray) -> dict:
    out = {
        "mean": float(np.mean(arr)),
        "median": float(np.median(arr)),
        "q25": float(np.percentile(arr, 25)),
        "q75": float(np.percentile(arr, 75)),
    }
    return out


def metrics_report(results: dict[str, EvalResult], outdir,
                   make_plots: bool = True) -> dict:
    """Write per-sample tables, summary, and plots for one or two variants.

    With two variants sharing sample ids, a paired per-sample delta table
    (second minus first, in insertion order) is written as well. Returns
    the summary record.
    """
    if not results:
        raise ValueError("no evaluation results to report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    summary: dict = {"variants": {}}
    for label, res in results.items():
        with open(outdir / f"metrics_{label}.jsonl", "w") as fh:
            for i, sid in enumerate(res.ids):
                fh.write(json.dumps({
                    "id": sid, "ade": float(res.ade[i]), "fde": float(res.fde[i]),
                    "heading_violation": float(res.heading_violation[i]),
                    "velocity_violation": float(res.velocity_violation[i]),
                }) + "\n")
        stats = {name: _stats(getattr(res, name)) for name in METRIC_NAMES}
        for name in ("heading_violation", "velocity_violation"):
            stats[name]["rate"] = float(np.mean(getattr(res, name) > 0))
        summary["variants"][label] = {"n_samples": len(res.ids), **stats}

    if len(results) == 2:
        (a_label, a), (b_label, b) = results.items()
        ids_a = {sid: i for i, sid in enumerate(a.ids)}
        deltas = {name: [] for name in METRIC_NAMES}
        with open(outdir / f"paired_{b_label}_vs_{a_label}.jsonl", "w") as fh:
            for j, sid in enumerate(b.ids):
                if sid not in ids_a:
                    continue
                i = ids_a[sid]
                row = {"id": sid}
                for name in METRIC_NAMES:
                    d = float(getattr(b, name)[j] - getattr(a, name)[i])
                    row[name] = d
                    deltas[name].append(d)
                fh.write(json.dumps(row) + "\n")
        summary["paired"] = {
            "baseline": a_label, "candidate": b_label,
            "n_pairs": len(deltas["ade"]),
            **{name: _stats(np.asarray(vals)) for name, vals in deltas.items()
               if vals},
        }

    if make_plots:
        for name in METRIC_NAMES:
            fig, ax = plt.subplots(figsize=(4, 3))
            data = [getattr(res, name) for res in results.values()]
            ax.violinplot(data, showmedians=True)
            ax.set_xticks(range(1, len(results) + 1))
            ax.set_xticklabels(list(results.keys()))
            ax.set_ylabel(name)
            fig.tight_layout()
            fig.savefig(outdir / f"{name}.png", dpi=120)
            plt.close(fig)

    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary


def rollout_report(logs: list[RolloutLog], outdir, make_plots: bool = True) -> dict:
    """Summarize closed-loop rollouts: outcomes, barrier margins, commands."""
    if not logs:
        raise ValueError("no rollout logs to report")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for log in logs:
        h_vals = [r.h_value for r in log.records if math.isfinite(r.h_value)]
        rows.append({
            "scene": log.scene, "ego_id": log.ego_id, "status": log.status,
            "steps": len(log.records),
            "min_h": min(h_vals) if h_vals else None,
            "max_v_sag": max((abs(r.v_sag) for r in log.records), default=0.0),
            "max_dtheta": max((abs(r.dtheta) for r in log.records), default=0.0),
        })
    with open(outdir / "rollouts.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    n = len(rows)
    summary = {
        "n_rollouts": n,
        "reached_goal_rate": sum(r["status"] == "reached_goal" for r in rows) / n,
        "solver_failure_rate": sum(r["status"] == "solver_failure" for r in rows) / n,
        "min_h_overall": min((r["min_h"] for r in rows if r["min_h"] is not None),
                             default=None),
    }
    if make_plots:
        fig, ax = plt.subplots(figsize=(4, 3))
        for log in logs:
            vs = [r.v_sag for r in log.records]
            ax.plot(np.arange(len(vs)) * 0.4, vs, alpha=0.6)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("commanded sagittal velocity [m/s]")
        fig.tight_layout()
        fig.savefig(outdir / "rollout_velocity.png", dpi=120)
        plt.close(fig)
    with open(outdir / "rollout_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
