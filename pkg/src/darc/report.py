"""Delimited outputs and the matching figures for eval, stress and training runs."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ScoreRecord, cross_domain_average, domain_means  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
    "savefig.dpi": 150,
}


def _fmt(x: float) -> str:
    return f"{100.0 * x:.2f}"


def write_records(path: Path | str, records: Sequence[ScoreRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "image_id", "aji", "dice"])
        for r in records:
            w.writerow([r.dataset, r.image_id, repr(r.aji), repr(r.dice)])


def read_records(path: Path | str) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        return [ScoreRecord(row["dataset"], row["image_id"], float(row["aji"]), float(row["dice"]))
                for row in csv.DictReader(fh)]


def summary_row(method: str, records: Sequence[ScoreRecord],
                held_out: Sequence[str]) -> list[str]:
    """One table row: method, then AJI/Dice per held-out domain, then the cross-domain average.

    Scores are percentages, two decimals.
    """
    means = domain_means(records)
    row = [method]
    for d in held_out:
        a, dc = means[d]
        row += [_fmt(a), _fmt(dc)]
    avg_aji, avg_dice = cross_domain_average(records, held_out)
    return row + [_fmt(avg_aji), _fmt(avg_dice)]


def summary_header(held_out: Sequence[str]) -> list[str]:
    head = ["method"]
    for d in held_out:
        head += [f"{d}_aji", f"{d}_dice"]
    return head + ["average_aji", "average_dice"]


def write_summary(path: Path | str, rows: Sequence[list[str]], held_out: Sequence[str]) -> str:
    """Write the summary CSV and return the same table as aligned text."""
    header = summary_header(held_out)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = [" | ".join(str(c).rjust(widths[i]) for i, c in enumerate(r)) for r in [header, *rows]]
    lines.insert(1, "-+-".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"


def plot_domain_scores(path: Path | str, records: Sequence[ScoreRecord], title: str = "") -> None:
    means = domain_means(records)
    names = list(means)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = range(len(names))
        ax.bar([x - 0.2 for x in xs], [100 * means[n][0] for n in names], 0.4, label="AJI")
        ax.bar([x + 0.2 for x in xs], [100 * means[n][1] for n in names], 0.4, label="Dice")
        ax.set_xticks(list(xs), names)
        ax.set_ylim(0, 100)
        ax.set_ylabel("score (%)")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def write_stress(path: Path | str, rows: Sequence[dict[str, float]]) -> None:
    """CSV laid out like the stress table: one row per metric, one column per factor."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + [f"B={r['B']:g}" for r in rows])
        w.writerow(["AJI"] + [_fmt(r["aji"]) for r in rows])
        w.writerow(["Dice"] + [_fmt(r["dice"]) for r in rows])


def plot_stress(path: Path | str, rows: Sequence[dict[str, float]], label: str = "") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        Bs = [r["B"] for r in rows]
        ax.plot(Bs, [100 * r["aji"] for r in rows], "o-", label="AJI")
        ax.plot(Bs, [100 * r["dice"] for r in rows], "s-", label="Dice")
        ax.set_xlabel("background expansion factor B")
        ax.set_ylabel("score (%)")
        ax.set_xticks(Bs)
        if label:
            ax.set_title(label)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_losses(path: Path | str, history: Sequence[dict[str, float]]) -> None:
    if not history:
        return
    its = [h["iteration"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in ("seg_bce", "contour_bce", "rph_bce", "rph_mse"):
            vals = [h[key] for h in history]
            if any(vals):
                ax.plot(its, vals, lw=0.8, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
