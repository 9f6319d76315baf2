"""Fixed recurrent stack: 4 FC, 2 LSTM, 4 FC, with hand-written BPTT.

Layer order is ``fc0 fc1 fc2 fc3 lstm0 lstm1 fc4 fc5 fc6 out``. Every FC layer
except ``out`` is followed by tanh; ``out`` is linear. All arithmetic is
float64. Arrays may carry a leading batch axis; a bare vector is treated as a
batch of one and returned without the batch axis.

Parameters are plain ``dict[str, np.ndarray]`` keyed ``"<layer>.<name>"``.
Nothing here mutates its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError

FC_IN = ("fc0", "fc1", "fc2", "fc3")
LSTM = ("lstm0", "lstm1")
FC_OUT = ("fc4", "fc5", "fc6")
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    output_dim: int
    hidden: int = 64
    variance_mode: bool = False

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"shape.{name} must be >= 1")
        if self.variance_mode and self.output_dim % 2:
            raise ConfigError("shape.output_dim must be even in variance mode")

    @property
    def target_dim(self) -> int:
        return self.output_dim // 2 if self.variance_mode else self.output_dim


class RecurrentState(NamedTuple):
    """Hidden and cell vectors stacked over the two LSTM layers: ``(2, ..., H)``."""

    h: np.ndarray
    c: np.ndarray


class AdamState(NamedTuple):
    m: dict
    v: dict
    t: int


def param_shapes(shape: NetworkShape) -> dict[str, tuple[int, ...]]:
    H = shape.hidden
    out: dict[str, tuple[int, ...]] = {}
    fan_in = shape.input_dim
    for name in FC_IN:
        out[f"{name}.W"] = (fan_in, H)
        out[f"{name}.b"] = (H,)
        fan_in = H
    for name in LSTM:
        out[f"{name}.Wx"] = (H, 4 * H)
        out[f"{name}.Wh"] = (H, 4 * H)
        out[f"{name}.b"] = (4 * H,)
    for name in FC_OUT:
        out[f"{name}.W"] = (H, H)
        out[f"{name}.b"] = (H,)
    out["out.W"] = (H, shape.output_dim)
    out["out.b"] = (shape.output_dim,)
    return out


def init_params(shape: NetworkShape, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases. LSTM matrices use per-gate fans."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shp in param_shapes(shape).items():
        if len(shp) == 1:
            params[key] = np.zeros(shp)
            continue
        fan_in, fan_out = shp
        if key.startswith("lstm"):
            fan_out = fan_out // 4
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[key] = rng.uniform(-limit, limit, size=shp)
    return params


def zero_params(shape: NetworkShape) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in param_shapes(shape).items()}


def zero_state(shape: NetworkShape, batch: int | None = None) -> RecurrentState:
    dims = (2, shape.hidden) if batch is None else (2, batch, shape.hidden)
    return RecurrentState(np.zeros(dims), np.zeros(dims))


def check_params(params: dict, shape: NetworkShape) -> None:
    expected = param_shapes(shape)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter keys mismatch: missing={missing} extra={extra}")
    for key, shp in expected.items():
        if params[key].shape != shp:
            raise ConfigError(f"parameter {key} has shape {params[key].shape}, expected {shp}")


def shape_of(params: dict) -> tuple[int, int, int]:
    """(input_dim, output_dim, hidden) read off the parameter arrays."""
    return params["fc0.W"].shape[0], params["out.W"].shape[1], params["fc0.W"].shape[1]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def split_variance(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a variance-mode output into (mean, variance)."""
    d = y.shape[-1] // 2
    return y[..., :d], softplus(y[..., d:]) + VARIANCE_FLOOR


def _as_batch(x: np.ndarray, state: RecurrentState):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        state = RecurrentState(state.h[:, None, :], state.c[:, None, :])
    return x, state, single


def _step(params, x, state, keep_cache):
    in_dim, _, H = shape_of(params)
    if x.shape[-1] != in_dim:
        raise ConfigError(f"input has dimension {x.shape[-1]}, network expects {in_dim}")
    if state.h.shape[-1] != H or state.h.shape[0] != 2:
        raise ConfigError("recurrent state does not match network width")

    acts = [x]
    a = x
    for name in FC_IN:
        a = np.tanh(a @ params[f"{name}.W"] + params[f"{name}.b"])
        acts.append(a)

    new_h, new_c, gates = [], [], []
    for layer, name in enumerate(LSTM):
        h_prev, c_prev = state.h[layer], state.c[layer]
        z = a @ params[f"{name}.Wx"] + h_prev @ params[f"{name}.Wh"] + params[f"{name}.b"]
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        a = o * tc
        new_h.append(a)
        new_c.append(c)
        gates.append((i, f, o, g, tc))
        acts.append(a)

    for name in FC_OUT:
        a = np.tanh(a @ params[f"{name}.W"] + params[f"{name}.b"])
        acts.append(a)
    y = a @ params["out.W"] + params["out.b"]

    new_state = RecurrentState(np.stack(new_h), np.stack(new_c))
    cache = (acts, gates, state) if keep_cache else None
    return y, new_state, cache


def forward_step(params: dict, x: np.ndarray, state: RecurrentState):
    """One step of the network. Returns ``(y, new_state)``."""
    xb, sb, single = _as_batch(x, state)
    y, new_state, _ = _step(params, xb, sb, keep_cache=False)
    if single:
        return y[0], RecurrentState(new_state.h[:, 0], new_state.c[:, 0])
    return y, new_state


def forward_cached(params: dict, x: np.ndarray, state: RecurrentState):
    """Batched step that also returns the cache needed by :func:`backward_step`.

    ``x`` must be 2-D ``(B, input_dim)``.
    """
    return _step(params, np.asarray(x, dtype=np.float64), state, keep_cache=True)


def backward_step(params, cache, dy, dstate_next: RecurrentState | None, grads: dict | None):
    """Reverse one :func:`forward_cached` step.

    ``dy`` is dL/dy for this step; ``dstate_next`` is dL/d(new_state) arriving
    from later steps. Parameter gradients are accumulated into ``grads`` (if
    given). Returns ``(dx, dstate_prev)``.
    """
    acts, gates, state = cache

    if grads is not None:
        grads["out.W"] += acts[-1].T @ dy
        grads["out.b"] += dy.sum(axis=0)
    da = dy @ params["out.W"].T

    idx = len(acts) - 1
    for name in reversed(FC_OUT):
        a_out, a_in = acts[idx], acts[idx - 1]
        dz = da * (1.0 - a_out * a_out)
        if grads is not None:
            grads[f"{name}.W"] += a_in.T @ dz
            grads[f"{name}.b"] += dz.sum(axis=0)
        da = dz @ params[f"{name}.W"].T
        idx -= 1

    dh_prev = np.zeros_like(state.h)
    dc_prev = np.zeros_like(state.c)
    for layer in (1, 0):
        name = LSTM[layer]
        i, f, o, g, tc = gates[layer]
        a_in = acts[idx - 1]
        h_prev, c_prev = state.h[layer], state.c[layer]
        dh = da
        dc = 0.0
        if dstate_next is not None:
            dh = dh + dstate_next.h[layer]
            dc = dstate_next.c[layer]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_prev[layer] = dc * f
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), do * o * (1.0 - o), dg * (1.0 - g * g)],
            axis=-1,
        )
        if grads is not None:
            grads[f"{name}.Wx"] += a_in.T @ dz
            grads[f"{name}.Wh"] += h_prev.T @ dz
            grads[f"{name}.b"] += dz.sum(axis=0)
        da = dz @ params[f"{name}.Wx"].T
        dh_prev[layer] = dz @ params[f"{name}.Wh"].T
        idx -= 1

    for name in reversed(FC_IN):
        a_out, a_in = acts[idx], acts[idx - 1]
        dz = da * (1.0 - a_out * a_out)
        if grads is not None:
            grads[f"{name}.W"] += a_in.T @ dz
            grads[f"{name}.b"] += dz.sum(axis=0)
        da = dz @ params[f"{name}.W"].T
        idx -= 1

    return da, RecurrentState(dh_prev, dc_prev)


def output_loss(y, target, loss_kind: str, variance_mode: bool, weight=None):
    """Summed loss of one output batch and its gradient w.r.t. ``y``.

    ``weight`` is an optional per-row (batch) multiplier, used to mask padding.
    Returns ``(sum_of_elementwise_losses, dsum/dy, element_count)``; callers
    divide by the total element count to get the mean.
    """
    w = np.ones(y.shape[:-1]) if weight is None else np.asarray(weight, dtype=np.float64)
    w = w[..., None]
    if loss_kind == "nll":
        if not variance_mode:
            raise ConfigError("nll loss requires variance_mode")
        d = y.shape[-1] // 2
        mean, raw = y[..., :d], y[..., d:]
        var = softplus(raw) + VARIANCE_FLOOR
        r = mean - target
        loss = 0.5 * np.log(2.0 * np.pi * var) + r * r / (2.0 * var)
        dvar = 0.5 / var - r * r / (2.0 * var * var)
        dy = np.concatenate([w * r / var, w * dvar * _sigmoid(raw)], axis=-1)
        return (w * loss).sum(), dy, float(w.sum()) * d
    if loss_kind != "mse":
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    d = target.shape[-1]
    r = (y[..., :d] if variance_mode else y) - target
    dy = np.zeros_like(y)
    dy[..., :d] = 2.0 * w * r
    return (w * r * r).sum(), dy, float(w.sum()) * d


def bptt(params, inputs, targets, loss_kind="mse", state=None, variance_mode=None):
    """Teacher-forced sequence loss with gradients w.r.t. parameters and inputs.

    ``inputs`` is ``(T, in)`` or ``(T, B, in)``; ``targets`` matches with the
    target width. The loss is the mean over steps, batch and target dims.
    Returns ``(loss, grad_params, grad_inputs)``.
    """
    xs = np.asarray(inputs, dtype=np.float64)
    ts = np.asarray(targets, dtype=np.float64)
    if xs.shape[0] < 1 or xs.shape[0] != ts.shape[0]:
        raise ConfigError("inputs and targets must have equal length >= 1")
    single = xs.ndim == 2
    if single:
        xs, ts = xs[:, None, :], ts[:, None, :]
    _, out_dim, H = shape_of(params)
    if variance_mode is None:
        variance_mode = ts.shape[-1] * 2 == out_dim and ts.shape[-1] != out_dim
    if loss_kind == "nll" and not variance_mode:
        raise ConfigError("nll loss requires variance_mode")

    B = xs.shape[1]
    st = state if state is not None else RecurrentState(np.zeros((2, B, H)), np.zeros((2, B, H)))
    if state is not None and single:
        st = RecurrentState(st.h[:, None, :], st.c[:, None, :])

    caches, dys = [], []
    total, count = 0.0, 0
    for t in range(xs.shape[0]):
        y, st, cache = forward_cached(params, xs[t], st)
        loss_t, dy_t, n_t = output_loss(y, ts[t], loss_kind, variance_mode)
        total += loss_t
        count += n_t
        caches.append(cache)
        dys.append(dy_t)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dxs = np.zeros_like(xs)
    dstate = None
    for t in range(xs.shape[0] - 1, -1, -1):
        dxs[t], dstate = backward_step(params, caches[t], dys[t] / count, dstate, grads)
    if single:
        dxs = dxs[:, 0, :]
    return total / count, grads, dxs


def adam_step(params, grads, opt_state: AdamState | None = None, lr=1e-3, beta1=0.9,
              beta2=0.999, eps=1e-8, rows: dict | None = None):
    """Bias-corrected Adam. Returns ``(new_params, new_state)``.

    ``rows`` optionally maps a key to a boolean row mask; only masked rows of
    that array (and their moments) are touched.
    """
    if opt_state is None:
        opt_state = AdamState({k: np.zeros_like(v) for k, v in params.items()},
                              {k: np.zeros_like(v) for k, v in params.items()}, 0)
    t = opt_state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {key} has shape {g.shape}, expected {p.shape}")
        m = beta1 * opt_state.m[key] + (1.0 - beta1) * g
        v = beta2 * opt_state.v[key] + (1.0 - beta2) * g * g
        step = lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)
        if rows is not None and key in rows:
            mask = rows[key]
            m = np.where(mask[:, None], m, opt_state.m[key])
            v = np.where(mask[:, None], v, opt_state.v[key])
            step = np.where(mask[:, None], step, 0.0)
        new_p[key] = p - step
        new_m[key] = m
        new_v[key] = v
    return new_p, AdamState(new_m, new_v, t)


def msgd_step(vec, grad, velocity=None, lr=1e-2, momentum=0.9):
    """Momentum SGD: ``v' = momentum*v + g``, ``x' = x - lr*v'``."""
    vec = np.asarray(vec, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if velocity is None:
        velocity = np.zeros_like(vec)
    if grad.shape != vec.shape or velocity.shape != vec.shape:
        raise ConfigError("msgd_step shape mismatch")
    velocity = momentum * velocity + grad
    return vec - lr * velocity, velocity
