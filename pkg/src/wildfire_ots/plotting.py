"""Matplotlib figures for experiment output.  Files only; never opens a window."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def histogram_figure(counts: list[int], path, title: str = "") -> Path:
    """Bar chart of how many lines fail in at least k scenarios."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ks = list(range(1, len(counts) + 1))
    ax.bar(ks, counts, width=0.8, color="#b5523b")
    ax.set_xlabel("k (scenarios)")
    ax.set_ylabel("lines failed in >= k scenarios")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def objective_figure(rows: list[dict], path) -> Path:
    """Objective against scenario count, one line per formulation/method/scaling."""
    series = defaultdict(list)
    for row in rows:
        if row["status"] != "optimal":
            continue
        label = f"{row['formulation']} {row['method']} x{row['scaling']}"
        series[label].append((int(row["n_scenarios"]), float(row["objective"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(series):
        pts = sorted(series[label])
        # several seeds per count: plot the mean
        by_n = defaultdict(list)
        for n, v in pts:
            by_n[n].append(v)
        xs = sorted(by_n)
        ax.plot(xs, [sum(by_n[n]) / len(by_n[n]) for n in xs], marker="o", label=label)
    ax.set_xlabel("number of scenarios")
    ax.set_ylabel("expected cost ($)")
    ax.legend(fontsize="small")
    return _save(fig, path)


def shed_figure(summary: list[dict], path) -> Path:
    """Grouped bars of mean expected load shed per arm and formulation."""
    arms = sorted({r["arm"] for r in summary})
    forms = sorted({r["formulation"] for r in summary})
    value = {(r["arm"], r["formulation"]): float(r["mean_shed_mw"]) for r in summary}
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(forms), 1)
    for f_i, form in enumerate(forms):
        xs = [a_i + f_i * width for a_i in range(len(arms))]
        ax.bar(xs, [value.get((arm, form), 0.0) for arm in arms], width=width, label=form)
    ax.set_xticks([a_i + width * (len(forms) - 1) / 2 for a_i in range(len(arms))])
    ax.set_xticklabels(arms)
    ax.set_ylabel("mean expected load shed (MW)")
    ax.legend()
    return _save(fig, path)
