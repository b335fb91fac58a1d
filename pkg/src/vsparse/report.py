"""Figure rendering for training logs and evaluation reports.

Plots are written next to the delimited output they illustrate: the
training CSV gets a loss-curve PNG, evaluation reports get a grouped
recall bar chart.  matplotlib runs on the Agg backend so this works in
headless jobs.
"""

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import FormatError, UsageError

LOSS_COLUMNS = ("loss_entity", "loss_predicate", "loss_role", "loss_total")


def read_train_log(path):
    """Parse a training CSV into {column: list of floats}."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise FormatError(f"{path}: not a training log (missing 'step' column)")
        cols = {name: [] for name in reader.fieldnames}
        for lineno, row in enumerate(reader, start=2):
            for name in cols:
                value = row.get(name)
                if value is None or value == "":
                    raise FormatError(f"{path}:{lineno}: missing value for '{name}'")
                try:
                    cols[name].append(float(value))
                except ValueError:
                    raise FormatError(
                        f"{path}:{lineno}: bad number {value!r} in '{name}'") from None
    if not cols["step"]:
        raise FormatError(f"{path}: training log has no data rows")
    return cols


def plot_loss_curves(log_path, out_path=None, smooth=0):
    """Render loss curves from a training CSV; returns the PNG path.

    smooth > 1 applies a trailing moving average of that window to each
    curve (the raw step axis is kept).
    """
    cols = read_train_log(log_path)
    if out_path is None:
        out_path = os.path.splitext(log_path)[0] + ".png"
    steps = cols["step"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name in LOSS_COLUMNS:
        if name not in cols:
            continue
        values = cols[name]
        if smooth and smooth > 1:
            values = _moving_average(values, smooth)
        ax.plot(steps, values, label=name.replace("loss_", ""),
                linewidth=1.8 if name == "loss_total" else 1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", frameon=False)
    ax.grid(True, alpha=0.25)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def _moving_average(values, window):
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_recall_chart(reports, out_path):
    """Grouped bar chart of recall per protocol and K; returns the path."""
    if not reports:
        raise UsageError("no evaluation reports to plot")
    ks = sorted({int(k) for rep in reports for k in rep["recalls"]})
    protocols = [rep["protocol"] for rep in reports]
    width = 0.8 / max(1, len(ks))
    fig, ax = plt.subplots(figsize=(1.8 * len(protocols) + 2.5, 4.0))
    for j, k in enumerate(ks):
        xs = [i + (j - (len(ks) - 1) / 2.0) * width for i in range(len(protocols))]
        ys = [rep["recalls"].get(str(k), 0.0) for rep in reports]
        bars = ax.bar(xs, ys, width=width * 0.92, label=f"R@{k}")
        for bar, y in zip(bars, ys):
            ax.annotate(f"{y:.2f}", (bar.get_x() + bar.get_width() / 2, y),
                        ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(protocols)))
    ax.set_xticklabels(protocols)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("recall")
    ax.legend(loc="upper right", frameon=False)
    ax.grid(True, axis="y", alpha=0.25)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_reports(reports, directory, stem="eval"):
    """Write reports as JSON plus the companion recall chart.

    Returns (json_path, png_path).
    """
    os.makedirs(directory, exist_ok=True)
    json_path = os.path.join(directory, f"{stem}.json")
    with open(json_path, "w") as fh:
        json.dump(reports, fh, indent=2)
        fh.write("\n")
    png_path = plot_recall_chart(reports, os.path.join(directory, f"{stem}.png"))
    return json_path, png_path
