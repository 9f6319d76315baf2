"""Figures rendered from report CSVs (never from live computation).

Each report kind is recognised from its CSV header; figures go to PNG files.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def kind_of(header) -> str:
    if header[:3] == ["tick", "chosen_gamma", "loss"]:
        return "control"
    if header[:3] == ["step", "d", "flag"]:
        return "detect"
    if header[:3] == ["class", "pc1", "pc2"]:
        return "pca"
    if header[:3] == ["step", "status", "loss"]:
        return "adapt"
    if header[:2] == ["epoch", "loss"]:
        return "train"
    raise DataError(f"unrecognised report header {header[:4]}")


def _col(header, rows, name):
    j = header.index(name)
    return np.array([float(r[j]) if r[j] not in ("", "nan") else np.nan for r in rows])


def _control(header, rows, ax_pair):
    ax_u, ax_s = ax_pair
    t = _col(header, rows, "tick")
    for name in header[3:]:
        ax = ax_u if name.startswith("u:") else ax_s
        ax.plot(t, _col(header, rows, name), label=name.split(":", 1)[1])
    ax_u.set_ylabel("control")
    ax_s.set_ylabel("sensor")
    ax_s.set_xlabel("tick")
    for ax in ax_pair:
        ax.legend(loc="best", fontsize="small")


def _detect(header, rows, ax, threshold=None):
    step = _col(header, rows, "step")
    d = _col(header, rows, "d")
    flag = _col(header, rows, "flag").astype(bool)
    ax.plot(step, d, lw=1.0, color="0.3", label="d")
    ax.scatter(step[flag], d[flag], s=10, color="C3", label="flagged", zorder=3)
    if threshold is not None:
        ax.axhline(threshold, ls="--", color="C3", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("Mahalanobis distance")
    ax.legend(loc="best", fontsize="small")


def _pca(header, rows, ax):
    labels = [r[0] for r in rows]
    pts = np.array([[float(r[1]), float(r[2])] for r in rows])
    for i, c in enumerate(dict.fromkeys(labels)):
        sel = [j for j, l in enumerate(labels) if l == c]
        marker = "*" if c == "<current>" else "o"
        ax.scatter(pts[sel, 0], pts[sel, 1], marker=marker, s=60 if marker == "*" else 25, label=c)
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize="small")


def _adapt(header, rows, ax):
    step = _col(header, rows, "step")
    for name in header:
        if name.startswith("d:"):
            ax.plot(step, _col(header, rows, name), label=name[2:])
    ax.set_xlabel("step")
    ax.set_ylabel("distance of p to class centroid")
    ax.legend(loc="best", fontsize="small")


def _train(header, rows, ax):
    ax.plot(_col(header, rows, "epoch"), _col(header, rows, "loss"))
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")


def render(csv_path, out_dir, threshold=None) -> str:
    """Render one report CSV to ``out_dir/<stem>.png``; returns the figure path."""
    header, rows = read_csv(csv_path)
    kind = kind_of(header)
    if kind == "control":
        fig, axes = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.2))
        _control(header, rows, axes)
    else:
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        {"detect": lambda: _detect(header, rows, ax, threshold), "pca": lambda: _pca(header, rows, ax),
         "adapt": lambda: _adapt(header, rows, ax), "train": lambda: _train(header, rows, ax)}[kind]()
    fig.tight_layout()
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(csv_path))[0]
    out = os.path.join(out_dir, f"{stem}.png")
    # fixed metadata keeps reruns byte-identical
    fig.savefig(out, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out
