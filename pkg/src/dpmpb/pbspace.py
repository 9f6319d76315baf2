"""Two-dimensional views of the PB space."""

from __future__ import annotations

import numpy as np

from .model import PBTable


def principal_axes(points, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``k`` principal directions (rows) of ``points`` (N, d).

    Sign convention: each direction's largest-magnitude loading is positive,
    so the projection is deterministic. Directions beyond the data rank (or
    beyond ``d``) are zero rows.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mu = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mu, full_matrices=False)
    axes = np.zeros((k, X.shape[1]))
    m = min(k, len(vt))
    axes[:m] = vt[:m]
    for row in axes:
        if np.any(row):
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1.0
    return mu, axes


def project(table: PBTable, extra=None, k: int = 2) -> tuple[np.ndarray, np.ndarray | None]:
    """Project every PB table entry (and optional extra vectors) onto the table's top axes."""
    mu, axes = principal_axes(table.vectors, k)
    pts = (table.vectors - mu) @ axes.T
    if extra is None:
        return pts, None
    ex = (np.atleast_2d(np.asarray(extra, dtype=np.float64)) - mu) @ axes.T
    return pts, ex


def separation(points, labels) -> tuple[float, float]:
    """(minimum between-class centroid distance, mean within-class spread).

    Spread is the mean distance of points to their class centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    classes = list(dict.fromkeys(labels))
    idx = {c: [i for i, l in enumerate(labels) if l == c] for c in classes}
    cent = {c: X[idx[c]].mean(axis=0) for c in classes}
    spread = float(np.mean([np.linalg.norm(X[i] - cent[labels[i]]) for i in range(len(X))]))
    between = [np.linalg.norm(cent[a] - cent[b]) for i, a in enumerate(classes) for b in classes[i + 1:]]
    return (float(min(between)) if between else float("nan")), spread
