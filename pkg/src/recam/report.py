"""Results tables (JSON and aligned text) and figures for run directories."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigurationError, DataError  # noqa: E402

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.jsonl"
RESULTS_JSON = "results.json"
RESULTS_TXT = "results.txt"
ACCURACY_FIGURE = "accuracy.png"
CURVE_FIGURE = "training_curve.png"


def make_results(rows: Sequence[dict], columns: Optional[Sequence[str]] = None,
                 baseline: Optional[str] = None, title: str = "Accuracy") -> dict:
    """``rows`` are ``{"name": str, "values": {column: accuracy}}`` with accuracies in [0, 1]."""
    rows = [{"name": str(r["name"]), "values": {str(k): float(v) for k, v in r["values"].items()}}
            for r in rows]
    if columns is None:
        columns = []
        for r in rows:
            columns += [c for c in r["values"] if c not in columns]
    names = [r["name"] for r in rows]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate row names in {names}")
    if baseline is not None and baseline not in names:
        raise ConfigurationError(f"baseline {baseline!r} is not one of {names}")
    return {"title": title, "baseline": baseline, "columns": list(columns), "rows": rows}


def format_cell(value: Optional[float], base: Optional[float] = None) -> str:
    if value is None:
        return "-"
    cell = f"{value * 100:.2f}%"
    if base is not None:
        cell += f" ({(value - base) * 100:+.2f}%)"
    return cell


def render_table(results: dict) -> str:
    cols = results["columns"]
    baseline = results.get("baseline")
    base_row = next((r for r in results["rows"] if r["name"] == baseline), None)
    header = ["model"] + cols
    body = []
    for row in results["rows"]:
        cells = [row["name"]]
        for c in cols:
            v = row["values"].get(c)
            b = None
            if base_row is not None and row is not base_row:
                b = base_row["values"].get(c)
            cells.append(format_cell(v, b if v is not None else None))
        body.append(cells)
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        first = line[0].ljust(widths[0])
        rest = [cell.rjust(w) for cell, w in zip(line[1:], widths[1:])]
        return "  ".join([first] + rest).rstrip()

    lines = [results.get("title", "Accuracy")]
    if baseline is not None:
        lines.append(f"deltas against baseline: {baseline}")
    lines += [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(line) for line in body]
    return "\n".join(lines) + "\n"


def read_metrics(path: Path) -> List[dict]:
    if not Path(path).exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_accuracy(results: dict, path: Path) -> Path:
    cols, rows = results["columns"], results["rows"]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows) * max(1, len(cols))), 3.5))
    width = 0.8 / max(1, len(cols))
    for j, c in enumerate(cols):
        xs = [i + j * width for i in range(len(rows))]
        ys = [100 * r["values"].get(c, float("nan")) for r in rows]
        ax.bar(xs, ys, width=width, label=c)
    ax.set_xticks([i + width * (len(cols) - 1) / 2 for i in range(len(rows))])
    ax.set_xticklabels([r["name"] for r in rows])
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title(results.get("title", "Accuracy"))
    if cols:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curve(metrics: Sequence[dict], path: Path) -> Optional[Path]:
    curve = [m for m in metrics if {"step", "loss", "accuracy"} <= set(m)]
    train = [m for m in curve if m.get("split") == "train"]
    dev = [m for m in curve if m.get("split") == "dev"]
    if not train and not dev:
        return None
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3.2))
    for series, label in ((train, "train"), (dev, "dev")):
        if series:
            steps = [m["step"] for m in series]
            ax_loss.plot(steps, [m["loss"] for m in series], label=label)
            ax_acc.plot(steps, [m["accuracy"] for m in series], label=label)
    ax_loss.set_xlabel("optimizer step")
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_xlabel("optimizer step")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_loss.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def write_results(directory, results: dict, figures: bool = True) -> Dict[str, Path]:
    """Write ``results.json``, ``results.txt`` and (optionally) PNG figures into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {"json": directory / RESULTS_JSON, "text": directory / RESULTS_TXT}
    out["json"].write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out["text"].write_text(render_table(results), encoding="utf-8")
    if figures:
        out["accuracy_figure"] = plot_accuracy(results, directory / ACCURACY_FIGURE)
        curve = plot_training_curve(read_metrics(directory / METRICS_FILE), directory / CURVE_FIGURE)
        if curve is not None:
            out["curve_figure"] = curve
    return out


def load_results(directory) -> dict:
    path = Path(directory) / RESULTS_JSON
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_config(directory, config: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILE
    path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def combine_runs(directories: Sequence, baseline: Optional[str] = None,
                 column: Optional[str] = None, title: str = "Accuracy") -> dict:
    """One row per model name across run directories (head kind for training runs).

    Rows with the same name from different runs are merged column by column,
    so a training run and a later evaluation of it share one row.  With
    ``column`` set, only that column of each run is kept.
    """
    merged: Dict[str, Dict[str, float]] = {}
    for d in directories:
        for row in load_results(d)["rows"]:
            values = row["values"]
            if column is not None:
                values = {column: values[column]} if column in values else {}
            target = merged.setdefault(row["name"], {})
            for key, value in values.items():
                if key in target and target[key] != value:
                    raise ConfigurationError(
                        f"runs disagree on {row['name']!r} {key}: {target[key]} vs {value}")
                target[key] = value
    return make_results([{"name": n, "values": v} for n, v in merged.items()], None, baseline,
                        title)
