"""Reports rendered from persisted artifacts only: telemetry CSV and episode records.

Every figure is written as SVG next to a CSV holding exactly the plotted data.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import mannwhitneyu  # noqa: E402

from .phantom import Case  # noqa: E402
from .plan_eval import dvh_edges  # noqa: E402
from .rollout import EpisodeRecord  # noqa: E402


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    # A fixed hash salt and no date metadata keep the SVG byte-stable across runs.
    plt.rcParams["svg.hashsalt"] = "planforge"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


# -- training curves -------------------------------------------------------------------

TRAINING_PANELS = (
    ("mean_best_relative", "performance (best relative score)"),
    ("mean_return", "episode return"),
    ("loss", "TD loss"),
    ("mean_q_tot", "mean Q_tot"),
)


def training_curves(telemetry: dict[str, np.ndarray], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ep = telemetry["episode"]
    rows = zip(*(telemetry[c] for c in ["episode", "step"] + [k for k, _ in TRAINING_PANELS]))
    csv_path = _write_csv(out / "training_curves.csv",
                          ["episode", "step"] + [k for k, _ in TRAINING_PANELS],
                          ([int(e), int(s), *vals] for e, s, *vals in rows))
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for ax, (key, title) in zip(axes.ravel(), TRAINING_PANELS):
        y = telemetry[key]
        ok = np.isfinite(y)
        ax.plot(ep[ok], y[ok], lw=1.2)
        ax.set_title(title, fontsize=10)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("collection round")
    fig.tight_layout()
    return [csv_path, _save(fig, out / "training_curves.svg")]


# -- evaluation ----------------------------------------------------------------------

def best_index(rec: EpisodeRecord) -> int:
    return int(np.argmax(rec.scores))


def per_case_rows(records: Sequence[EpisodeRecord], policy: str) -> list[list]:
    return [[r.case_id, policy, r.seed, round(100 * r.relative_scores[0], 6),
             round(100 * r.best_relative, 6), round(100 * r.relative_scores[-1], 6), best_index(r)]
            for r in records]


def metric_table(records: Sequence[EpisodeRecord]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Mean metric values and scores at each episode's best state."""
    labels = list(records[0].metric_labels)
    vals = np.stack([r.metric_values[best_index(r)] for r in records])
    scores = np.stack([r.metric_scores[best_index(r)] for r in records])
    return labels, vals.mean(0), scores.mean(0)


def compare(greedy: Sequence[float], random: Sequence[float]) -> dict:
    """Two-sided Mann-Whitney U test on best relative scores (percent)."""
    g, r = np.asarray(greedy, float), np.asarray(random, float)
    out = {"greedy_mean_pct": float(g.mean()), "greedy_std_pct": float(g.std()),
           "random_mean_pct": float(r.mean()), "random_std_pct": float(r.std()),
           "difference_pct": float(g.mean() - r.mean()), "n": int(len(g))}
    if len(g) and len(r) and not (np.all(g == g[0]) and np.all(r == g[0])):
        res = mannwhitneyu(g, r, alternative="two-sided")
        out.update(u_statistic=float(res.statistic), p_value=float(res.pvalue))
    return out


def eval_report(greedy: Sequence[EpisodeRecord], random: Sequence[EpisodeRecord],
                cases: Sequence[Case], out_dir: str | Path) -> dict:
    """Per-case scores, per-metric table, mean DVH and score trajectories, greedy vs random."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {c.id: c for c in cases}
    header = ["case_id", "policy", "seed", "initial_relative_pct", "best_relative_pct",
              "final_relative_pct", "best_step"]
    _write_csv(out / "per_case.csv", header, per_case_rows(greedy, "greedy") + per_case_rows(random, "random"))

    labels, gv, gs = metric_table(greedy)
    _, rv, rs = metric_table(random)
    maxima = _metric_maxima(labels)
    _write_csv(out / "metrics.csv",
               ["metric", "greedy_value", "greedy_score", "random_value", "random_score", "max_score"],
               ([l, gv[i], gs[i], rv[i], rs[i], maxima[i]] for i, l in enumerate(labels)))

    _mean_dvh(greedy, random, by_id, out)
    _trajectories(greedy, random, out)

    summary = compare([100 * r.best_relative for r in greedy], [100 * r.best_relative for r in random])
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _metric_maxima(labels: Sequence[str]) -> list[float]:
    from .plan_eval import CRITERIA
    table = {c.metric.label: c.max_score for c in CRITERIA}
    return [table[l] for l in labels]


def _mean_dvh(greedy, random, by_id, out: Path):
    """Mean DVH over episodes at the initial state and at the best greedy/random states."""
    case0 = by_id[greedy[0].case_id]
    names = case0.structures.names
    edges = dvh_edges(case0.prescription_gy, greedy[0].dvh.shape[-1])
    curves = {
        "initial": np.mean([r.dvh[0] for r in greedy], 0),
        "greedy": np.mean([r.dvh[best_index(r)] for r in greedy], 0),
        "random": np.mean([r.dvh[best_index(r)] for r in random], 0),
    }
    rows = []
    for label, dvh in curves.items():
        for s, name in enumerate(names):
            rows.append([label, name, *np.round(dvh[s], 9)])
    _write_csv(out / "mean_dvh.csv", ["state", "structure", *[f"{e:.6g}" for e in edges]], rows)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    styles = {"initial": ":", "greedy": "-", "random": "--"}
    colors = plt.cm.tab20(np.linspace(0, 1, max(len(names), 2)))
    for label, dvh in curves.items():
        for s, name in enumerate(names):
            ax.plot(edges, 100 * dvh[s], styles[label], color=colors[s], lw=1.1,
                    label=f"{name} ({label})" if len(names) <= 4 or label == "greedy" else None)
    ax.set_xlabel("dose (Gy)")
    ax.set_ylabel("volume (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save(fig, out / "mean_dvh.svg")


def _trajectories(greedy, random, out: Path):
    rows = []
    for policy, recs in (("greedy", greedy), ("random", random)):
        for r in recs:
            for t, s in enumerate(r.relative_scores):
                rows.append([policy, r.case_id, r.seed, t, round(100 * s, 6)])
    _write_csv(out / "trajectories.csv", ["policy", "case_id", "seed", "step", "relative_pct"], rows)

    fig, ax = plt.subplots(figsize=(7, 4))
    for policy, recs, color in (("greedy", greedy, "C0"), ("random", random, "C3")):
        traj = np.stack([100 * r.relative_scores for r in recs])
        for row in traj:
            ax.plot(row, color=color, alpha=0.15, lw=0.8)
        ax.plot(traj.mean(0), color=color, lw=2, label=f"{policy} (mean)")
    ax.set_xlabel("tuning step")
    ax.set_ylabel("relative plan score (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, out / "trajectories.svg")


def episode_trace(record: EpisodeRecord, names: Sequence[str], out_dir: str | Path) -> list[Path]:
    """Score and tuned coordinates through one episode."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[t, round(100 * record.relative_scores[t], 6), *record.x[t]] for t in range(len(record.scores))]
    csv_path = _write_csv(out / "episode_trace.csv", ["step", "relative_pct", *names], rows)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    a1.plot(100 * record.relative_scores, marker="o")
    a1.set_ylabel("relative score (%)")
    a1.grid(alpha=0.3)
    for j, name in enumerate(names):
        a2.step(range(len(record.x)), record.x[:, j], where="post", label=name)
    a2.set_ylabel("tuner coordinate")
    a2.set_xlabel("tuning step")
    a2.legend(fontsize=7)
    a2.grid(alpha=0.3)
    fig.tight_layout()
    return [csv_path, _save(fig, out / "episode_trace.svg")]
