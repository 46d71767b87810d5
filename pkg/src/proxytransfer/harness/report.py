"""Aggregate RunRecords into mean ± std accuracy tables and a learning-curve plot."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ReportingError
from .protocol import RunRecord, load_records

# Config keys that may legitimately differ between runs of one group.
_FREE_KEYS = {"seeds", "out", "init", "label", "fold_limit", "save_checkpoints", "checkpoint",
              "eval_mode", "n_c", "r_percent", "task"}


@dataclass
class ReportRow:
    n_c: int
    r_percent: float
    init: str
    runs: int
    aborted: int
    mean: float  # percent
    std: float  # percent, sample std (0 for a single run)

    @property
    def cell(self) -> str:
        return format_cell(self.mean, self.std)


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def mean_std_percent(accuracies) -> tuple[float, float]:
    acc = np.asarray(accuracies, dtype=np.float64) * 100.0
    if acc.size == 0:
        return float("nan"), float("nan")
    std = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
    return float(acc.mean()), std


def _comparable(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in _FREE_KEYS}


def aggregate(records: list[RunRecord]) -> list[ReportRow]:
    """One row per (n_c, R%, init), sorted by init then n_c.

    Raises :class:`ReportingError` when a group holds runs whose configs
    differ in anything but seed/fold bookkeeping.
    """
    if not records:
        raise ReportingError("no run records to report")
    groups: dict[tuple, list[RunRecord]] = {}
    for rec in records:
        if rec.n_c is None:
            raise ReportingError(f"run {rec.run_id} is not a fine-tuning run")
        key = (rec.n_c, round(rec.r_percent or 0.0, 6), rec.init)
        groups.setdefault(key, []).append(rec)
    rows = []
    for (n_c, r, init), recs in groups.items():
        ref = _comparable(recs[0].config)
        for rec in recs[1:]:
            other = _comparable(rec.config)
            if other != ref:
                diff = sorted(k for k in set(ref) | set(other) if ref.get(k) != other.get(k))
                raise ReportingError(f"group (n_c={n_c}, init={init}) mixes configs differing in {diff}")
        done = [r_.test_accuracy for r_ in recs if not r_.aborted]
        mean, std = mean_std_percent(done)
        rows.append(ReportRow(n_c, r, init, len(done), len(recs) - len(done), mean, std))
    rows.sort(key=lambda row: (row.init, row.n_c))
    return rows


def to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_c", "r_percent", "init", "runs", "aborted", "mean_acc", "std_acc"])
    for row in rows:
        w.writerow([row.n_c, f"{row.r_percent:.2f}", row.init, row.runs, row.aborted, f"{row.mean:.2f}", f"{row.std:.2f}"])
    return buf.getvalue()


def to_text(rows: list[ReportRow]) -> str:
    header = ["N_c", "R%", "Initialization", "Runs", "Accuracy (%)"]
    body = [[str(r.n_c), f"{r.r_percent:.2f}", r.init, f"{r.runs}" + (f" ({r.aborted} aborted)" if r.aborted else ""),
             r.cell] for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def plot_curves(rows: list[ReportRow], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for init in sorted({r.init for r in rows}):
        pts = sorted((r.n_c, r.mean, r.std) for r in rows if r.init == init and r.runs)
        if not pts:
            continue
        x, m, s = map(np.asarray, zip(*pts))
        ax.errorbar(x, m, yerr=s, marker="o", capsize=3, label=init)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training items per class (N_c)")
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def report(runs_dir, out_dir=None) -> list[ReportRow]:
    """Read ``runs_dir/*.json`` and write report.csv, report.txt and curves.svg."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise ReportingError(f"runs directory not found: {runs_dir}")
    rows = aggregate(load_records(runs_dir))
    out = Path(out_dir) if out_dir is not None else runs_dir.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(to_csv(rows))
    (out / "report.txt").write_text(to_text(rows))
    plot_curves(rows, out / "curves.svg")
    return rows
