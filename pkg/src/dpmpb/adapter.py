"""Online update of the current PB vector from a bounded buffer of live steps.

Only ``p`` moves: network weights, normalization and the trained PB table are
never touched. Two objectives are supported:

- ``prediction_error``: teacher-forced one-step mse over contiguous windows
  sampled from the buffer, LSTM state zeroed at each window start.
- ``style``: autoregressive rollout of a CTM from the first buffered step;
  L2 norm of the state mismatch plus ``w1`` times the L2 norm of the
  step-to-step change of predicted controls (``w1 < 0`` favours faster motion).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import netcore
from .errors import ConfigError, NumericalError, UnsupportedStructureError
from .model import CTM, ModelBundle, Rollout, sequence_io

WARMING_UP = "warming up"
UPDATED = "updated"
OBJECTIVES = ("prediction_error", "style")


class AdaptBuffer:
    """FIFO of ``(s, u)`` steps; the oldest step is evicted once ``capacity`` is reached."""

    def __init__(self, capacity: int = 300, threshold: int = 30):
        if capacity < 1:
            raise ConfigError("adapt.capacity must be >= 1")
        if not 0 <= threshold <= capacity:
            raise ConfigError("adapt.threshold must be in [0, capacity]")
        self.capacity = int(capacity)
        self.threshold = int(threshold)
        self._steps: deque = deque(maxlen=self.capacity)

    def push(self, s, u) -> "AdaptBuffer":
        s = np.array(s, dtype=np.float64)
        u = np.array(u, dtype=np.float64)
        if self._steps:
            s0, u0 = self._steps[0]
            if s.shape != s0.shape or u.shape != u0.shape:
                raise ConfigError(f"step dims {s.shape}/{u.shape} differ from buffer {s0.shape}/{u0.shape}")
        self._steps.append((s, u))
        return self

    @property
    def count(self) -> int:
        return len(self._steps)

    def __len__(self):
        return len(self._steps)

    @property
    def ready(self) -> bool:
        return self.count >= self.threshold

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Chronological ``(S, U)`` arrays."""
        return (np.array([s for s, _ in self._steps]), np.array([u for _, u in self._steps]))


@dataclass(frozen=True)
class AdaptConfig:
    n_batch: int = 4
    n_epoch: int = 5
    lr: float = 0.1
    momentum: float = 0.9
    window: int = 20
    objective: str = "prediction_error"
    w1: float = 0.0
    seed: int = 0
    # rescale p-gradients whose norm exceeds this; None disables clipping
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.n_batch < 1 or self.n_epoch < 1:
            raise ConfigError("adapt.n_batch and adapt.n_epoch must be >= 1")
        if not self.lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("adapt.lr must be > 0 and adapt.momentum in [0, 1)")
        if self.window < 2:
            raise ConfigError("adapt.window must be >= 2")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"adapt.objective must be one of {OBJECTIVES}")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("adapt.max_grad_norm must be > 0 or null")

    @classmethod
    def from_json(cls, d: dict) -> "AdaptConfig":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"adapt: unknown keys {sorted(bad)}")
        return cls(**d)


class AdaptResult(NamedTuple):
    pb: np.ndarray
    trace: list
    status: str
    velocity: np.ndarray | None = None


def _windows(n, window, n_batch, rng):
    """Start offsets of ``n_batch`` contiguous windows (whole buffer if shorter)."""
    if n <= window:
        return [0], n
    return list(rng.integers(0, n - window + 1, size=n_batch)), window


def prediction_grad(bundle: ModelBundle, S, U, pb, starts, length):
    """Teacher-forced mse and its gradient w.r.t. ``pb`` over the given windows."""
    xs, ts = [], []
    for a in starts:
        x, t = sequence_io(bundle, S[a:a + length], U[a:a + length], pb)
        xs.append(x)
        ts.append(t)
    xs = np.stack(xs, axis=1)
    ts = np.stack(ts, axis=1)
    loss, _, dx = netcore.bptt(bundle.params, xs, ts, "mse", variance_mode=bundle.shape.variance_mode)
    return loss, dx[..., -bundle.pb_dim:].sum(axis=(0, 1))


def update_pb(bundle: ModelBundle, buffer: AdaptBuffer, cfg: AdaptConfig, velocity=None,
              rng: np.random.Generator | None = None) -> AdaptResult:
    """Momentum-SGD on ``bundle.current_pb`` against the buffered prediction error.

    Below the warm-up threshold nothing changes and the status says so.
    """
    if not buffer.ready or buffer.count < 2:
        return AdaptResult(bundle.current_pb, [], WARMING_UP, velocity)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    S, U = buffer.arrays()
    _check_dims(bundle, S, U)
    p = bundle.current_pb.copy()
    trace = []
    for _ in range(cfg.n_epoch):
        starts, length = _windows(len(S), cfg.window, cfg.n_batch, rng)
        loss, g = prediction_grad(bundle, S, U, p, starts, length)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericalError("non-finite prediction loss during PB update")
        p, velocity = netcore.msgd_step(p, _clip(g, cfg.max_grad_norm), velocity, cfg.lr, cfg.momentum)
        trace.append(float(loss))
    bundle.current_pb = p  # whole-value swap; readers never see a partial vector
    return AdaptResult(p, trace, UPDATED, velocity)


def _clip(g, max_norm):
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


def _check_dims(bundle, S, U):
    if S.shape[-1] != bundle.sensor_dim or U.shape[-1] != bundle.control_dim:
        raise ConfigError(f"buffer steps have dims {S.shape[-1]}/{U.shape[-1]}, model expects "
                          f"{bundle.sensor_dim}/{bundle.control_dim}")


def _norm(x):
    """L2 norm of the whole array and its gradient (zero at the origin)."""
    n = float(np.sqrt((x * x).sum()))
    return n, (x / n if n > 0 else np.zeros_like(x))


def style_objective(bundle: ModelBundle, S, U, pb, w1: float, with_grad=True):
    """Autoregressive state matching plus ``w1`` times predicted-control speed.

    Both terms are L2 norms over the whole sequence (normalized units):
    ``||s_data - s_pred|| + w1 * ||u_pred[t] - u_pred[t-1]||``. Returns ``(loss, dL/dpb)``; the rollout starts at the first step and feeds
    back predicted sensors and controls.
    """
    if bundle.structure != CTM:
        raise UnsupportedStructureError("style update needs a CTM bundle (controls are predicted)")
    s_n = bundle.scale("sensor").normalize(S)
    u_n = bundle.scale("control").normalize(U)
    T = len(S)
    ro = Rollout(bundle, pb)
    ys = ro.run(s_n[None, 0], u_n[None, :T - 1], feed_u=True, s_fill=s_n[None, :T - 1])[0]
    o_s, v_s = ro.o_s, ro.v_s
    o_u = ro.o_u
    dy = np.zeros_like(ys)
    r = ys[:, o_s] - s_n[1:, v_s]
    loss, g = _norm(r)
    dy[:, o_s] = g
    up = ys[:, o_u]
    if len(up) >= 2 and w1 != 0.0:
        vel, gv = _norm(up[1:] - up[:-1])
        loss += w1 * vel
        dy[1:, o_u] += w1 * gv
        dy[:-1, o_u] -= w1 * gv
    if not with_grad:
        return loss, None
    _, dpb = ro.backward(dy[None])
    return loss, dpb[0]


def update_pb_style(bundle: ModelBundle, buffer: AdaptBuffer, cfg: AdaptConfig, velocity=None) -> AdaptResult:
    if bundle.structure != CTM:
        raise UnsupportedStructureError("style update needs a CTM bundle (controls are predicted)")
    if buffer.count < 2:
        return AdaptResult(bundle.current_pb, [], WARMING_UP, velocity)
    S, U = buffer.arrays()
    _check_dims(bundle, S, U)
    p = bundle.current_pb.copy()
    trace = []
    for _ in range(cfg.n_epoch):
        loss, g = style_objective(bundle, S, U, p, cfg.w1)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericalError("non-finite style loss during PB update")
        p, velocity = netcore.msgd_step(p, _clip(g, cfg.max_grad_norm), velocity, cfg.lr, cfg.momentum)
        trace.append(float(loss))
    bundle.current_pb = p
    return AdaptResult(p, trace, UPDATED, velocity)


def predicted_control_speed(bundle: ModelBundle, S, U, pb) -> float:
    """Mean |change| per step of controls in an autoregressive CTM rollout (physical units)."""
    s_n = bundle.scale("sensor").normalize(S)
    u_n = bundle.scale("control").normalize(U)
    ro = Rollout(bundle, pb)
    ys = ro.run(s_n[None, 0], u_n[None, :len(S) - 1], feed_u=True, s_fill=s_n[None, :len(S) - 1])[0]
    std = bundle.scale("control").std[ro.v_u]
    up = ys[:, ro.o_u] * std
    return float(np.abs(np.diff(up, axis=0)).mean())


class OnlinePBUpdater:
    """Stateful wrapper: push live steps, update ``p`` every ``every`` pushes once warm."""

    def __init__(self, bundle: ModelBundle, buffer: AdaptBuffer, cfg: AdaptConfig, every: int = 1):
        self.bundle = bundle
        self.buffer = buffer
        self.cfg = cfg
        self.every = max(1, int(every))
        self.velocity = None
        self.rng = np.random.default_rng(cfg.seed)
        self.n = 0

    def push(self, s, u) -> dict:
        self.buffer.push(s, u)
        self.n += 1
        status, trace = WARMING_UP, []
        if self.buffer.ready and self.n % self.every == 0:
            if self.cfg.objective == "style":
                res = update_pb_style(self.bundle, self.buffer, self.cfg, self.velocity)
            else:
                res = update_pb(self.bundle, self.buffer, self.cfg, self.velocity, self.rng)
            self.velocity, status, trace = res.velocity, res.status, res.trace
        elif self.buffer.ready:
            status = "buffering"
        return {"step": self.n, "status": status, "loss": trace[-1] if trace else None,
                "pb": self.bundle.current_pb.copy(),
                "distances": self.bundle.pb_table.class_distances(self.bundle.current_pb)}
