"""Anomaly detection from one-step prediction error.

Errors ``e_t = s_pred_t - s_t`` are taken in normalized units over the kept
sensor outputs (or one signal's block). Calibration on normal data fixes the
error mean and covariance; live steps are scored by Mahalanobis distance and
flagged when strictly above ``d_mean + 3 * d_std``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError
from .model import ModelBundle, forward_sequence, sequence_io

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnomalyStats:
    mu: np.ndarray
    cov: np.ndarray
    cov_inv: np.ndarray
    d_mean: float
    d_std: float
    threshold: float
    eps: float
    signals: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.mu)

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "cov": self.cov.tolist(), "cov_inv": self.cov_inv.tolist(),
                "d_mean": self.d_mean, "d_std": self.d_std, "threshold": self.threshold,
                "eps": self.eps, "signals": list(self.signals)}

    @classmethod
    def from_json(cls, d: dict) -> "AnomalyStats":
        return cls(np.asarray(d["mu"], dtype=np.float64), np.asarray(d["cov"], dtype=np.float64),
                   np.asarray(d["cov_inv"], dtype=np.float64), float(d["d_mean"]),
                   float(d["d_std"]), float(d["threshold"]), float(d["eps"]),
                   tuple(d.get("signals", ())))

    def with_threshold(self, threshold: float) -> "AnomalyStats":
        return AnomalyStats(self.mu, self.cov, self.cov_inv, self.d_mean, self.d_std,
                            float(threshold), self.eps, self.signals)


class Detection(NamedTuple):
    anomalous: bool
    d: float


def stats_from_errors(errors, signals=(), sigmas=3.0) -> AnomalyStats:
    """Fit mean/covariance to error samples ``(N, k)`` and derive the threshold."""
    E = np.atleast_2d(np.asarray(errors, dtype=np.float64))
    n, k = E.shape
    if n == 0:
        raise DataError("no error samples for calibration")
    mu = E.mean(axis=0)
    cov = np.atleast_2d(np.cov(E, rowvar=False, bias=True)) if n > 1 else np.zeros((k, k))
    cov = 0.5 * (cov + cov.T)
    scale = 1e-6
    if n < k:
        log.warning("only %d error samples for %d dims; regularizing with 1e-3", n, k)
        scale = 1e-3
    eps = max(scale * float(np.trace(cov)) / k, 1e-9)
    cov_inv = np.linalg.inv(cov + eps * np.eye(k))
    cov_inv = 0.5 * (cov_inv + cov_inv.T)
    D = E - mu
    d = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", D, cov_inv, D), 0.0))
    d_mean, d_std = float(d.mean()), float(d.std())
    return AnomalyStats(mu, cov, cov_inv, d_mean, d_std, d_mean + sigmas * d_std, eps, tuple(signals))


def prediction_errors(bundle: ModelBundle, episode, pb=None, signals=None) -> np.ndarray:
    """Teacher-forced one-step errors (T-1, k) of an episode, zero initial state."""
    xs, ts = sequence_io(bundle, episode.s, episode.u, pb)
    ys, _ = forward_sequence(bundle.params, xs)
    return _select(bundle, ys[:, :bundle.shape.target_dim] - ts, signals)


def _select(bundle, e, signals):
    outs = bundle.output_slices()
    names = [s.name for s in bundle.output_signals if s.kind == "sensor"]
    if signals is not None:
        bad = [n for n in signals if n not in names]
        if bad:
            raise ConfigError(f"anomaly signals {bad} are not predicted sensors")
        names = [n for n in names if n in signals]
    idx = np.concatenate([np.arange(outs[n].start, outs[n].stop) for n in names])
    return e[..., idx]


def calibrate(bundle: ModelBundle, dataset, pb=None, signals=None, sigmas=3.0) -> AnomalyStats:
    """Error statistics on normal data; ``signals`` restricts to those sensor blocks."""
    if not len(dataset):
        raise DataError("calibration dataset is empty")
    E = np.concatenate([prediction_errors(bundle, ep, pb, signals) for ep in dataset])
    if signals is None:
        signals = [s.name for s in bundle.output_signals if s.kind == "sensor"]
    return stats_from_errors(E, signals, sigmas)


def score(stats: AnomalyStats, e) -> float:
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != stats.dim:
        raise ConfigError(f"error has dim {e.shape[-1]}, stats expect {stats.dim}")
    dlt = e - stats.mu
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", dlt, stats.cov_inv, dlt), 0.0))


def detect(stats: AnomalyStats, e) -> Detection:
    d = float(score(stats, e))
    return Detection(d > stats.threshold, d)


class StreamDetector:
    """Online scoring of live (s, u) steps; keeps the recurrent state across calls.

    ``window`` > 1 thresholds a moving average of d instead of the raw value.
    """

    def __init__(self, bundle: ModelBundle, stats: AnomalyStats | None = None, pb=None, window=1):
        self.bundle = bundle
        self.stats = stats if stats is not None else bundle.anomaly
        if self.stats is None:
            raise ConfigError("bundle carries no anomaly statistics; calibrate first")
        self.pb = bundle.current_pb if pb is None else np.asarray(pb, dtype=np.float64)
        self.state = bundle.initial_state()
        self.window = max(1, int(window))
        self._recent: list[float] = []
        self._pending = None

    def push(self, s, u):
        """Feed the step observed at t; returns a Detection once a prediction for t exists."""
        from . import netcore

        s = np.asarray(s, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        out = None
        if self._pending is not None:
            target = _targets_for(self.bundle, s, u)
            e = _select(self.bundle, self._pending[:self.bundle.shape.target_dim] - target,
                        list(self.stats.signals) or None)
            d = float(score(self.stats, e))
            self._recent = (self._recent + [d])[-self.window:]
            d_eff = float(np.mean(self._recent))
            out = Detection(d_eff > self.stats.threshold, d_eff)
        x = self.bundle.network_input(self.bundle.scale("sensor").normalize(s),
                                      self.bundle.scale("control").normalize(u), self.pb)
        self._pending, self.state = netcore.forward_step(self.bundle.params, x, self.state)
        return out


def _targets_for(bundle, s, u):
    from .model import target_vector

    return target_vector(bundle, bundle.scale("sensor").normalize(s), bundle.scale("control").normalize(u))
