"""Robustness and loss curves rendered to PNG with byte-stable output."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ContractError  # noqa: E402
from .metrics import MetricsParseError, parse_document  # noqa: E402

# no Software tag and no timestamp, so identical inputs give identical bytes
_PNG_META = {"Software": None}


def load_series(metrics_files: Sequence) -> list[tuple[float, float]]:
    """(mask_ratio, miou) pairs sorted by ratio, one per metrics document."""
    pts = []
    for path in metrics_files:
        doc = parse_document(Path(path).read_text())
        if "mask_ratio" not in doc:
            raise MetricsParseError("mask_ratio", f"missing in {path}")
        pts.append((float(doc["mask_ratio"]), float(doc["miou"])))
    return sorted(pts)


def plot_mask_curves(series: dict[str, Sequence], out_path) -> Path:
    """One line per named series of metrics files: mIoU against eval mask ratio."""
    if not series or not any(series.values()):
        raise ContractError("plot needs at least one metrics file")
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for label, files in series.items():
        pts = load_series(files)
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("mask ratio")
    ax.set_ylabel("mIoU (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return out_path


def read_log(path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k, v in row.items():
                cols.setdefault(k, []).append(float(v))
    return cols


def plot_losses(logs: dict[str, object], out_path) -> Path:
    """Flow and cross-entropy loss per step for each named log.csv."""
    if not logs:
        raise ContractError("plot needs at least one log file")
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2), dpi=100)
    for label, path in logs.items():
        cols = read_log(path)
        a1.plot(cols["step"], cols["flow_loss"], label=label, lw=1)
        a2.plot(cols["step"], cols["ce_loss"], label=label, lw=1)
    a1.set_title("flow loss")
    a2.set_title("cross-entropy")
    for a in (a1, a2):
        a.set_xlabel("step")
        a.grid(alpha=0.3)
    a2.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return out_path
