"""Control through the learned model.

CTM bundles predict the next control directly (:func:`ctm_step`). STM bundles
are controlled by gradient descent on a control horizon through the expanded
network (:func:`stm_optimize`): each epoch takes one gradient step per
learning rate in an exponential grid that always contains 0, and keeps the
best candidate, so the per-epoch loss never increases.

Optimization runs in normalized units. Loss terms are squared L2 norms summed
over the horizon; targets in a :class:`LossSpec` are physical and are
normalized by the controller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import netcore
from .errors import ConfigError, NumericalError, UnsupportedStructureError
from .model import CTM, STM, ModelBundle, Rollout

TERM_KINDS = ("track", "minimize", "maximize", "velocity", "variance", "anisotropic", "control")


@dataclass
class ControlConfig:
    horizon: int = 8
    n_batch: int = 4
    n_epoch: int = 3
    gamma_max: float = 1.0
    periodic: int | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("control.horizon must be >= 1")
        if self.n_batch < 1:
            raise ConfigError("control.n_batch must be >= 1")
        if self.n_epoch < 1:
            raise ConfigError("control.n_epoch must be >= 1")
        if not self.gamma_max > 0:
            raise ConfigError("control.gamma_max must be > 0")
        if self.periodic is not None and self.periodic < 1:
            raise ConfigError("control.periodic must be >= 1")


@dataclass
class LossTerm:
    kind: str
    signal: str | None = None
    weight: float = 1.0
    target: object = None
    w4: float | None = None
    mask: bool = False
    mask_period: int | None = None

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ConfigError(f"loss term kind must be one of {TERM_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.weight):
            raise ConfigError(f"loss term {self.kind}: weight must be finite")
        if self.kind != "control" and not self.signal:
            raise ConfigError(f"loss term {self.kind}: signal is required")
        if self.kind == "track" and self.target is None:
            raise ConfigError("track term requires a target")
        if self.kind == "anisotropic" and not (self.w4 is not None and self.w4 > 1):
            raise ConfigError("anisotropic term requires w4 > 1")
        if self.mask_period is not None:
            self.mask = True

    @property
    def label(self) -> str:
        return f"{self.kind}({self.signal})" if self.signal else self.kind


@dataclass
class LossSpec:
    terms: list = field(default_factory=list)

    def __post_init__(self):
        if not self.terms:
            raise ConfigError("loss spec needs at least one term")

    @classmethod
    def from_json(cls, d: dict) -> "LossSpec":
        if not isinstance(d, dict) or "terms" not in d:
            raise ConfigError("loss spec must be an object with 'terms'")
        terms = []
        for i, t in enumerate(d["terms"]):
            unknown = set(t) - {"kind", "signal", "weight", "target", "w4", "mask", "mask_period"}
            if unknown:
                raise ConfigError(f"terms[{i}]: unknown keys {sorted(unknown)}")
            try:
                terms.append(LossTerm(**t))
            except TypeError as exc:
                raise ConfigError(f"terms[{i}]: {exc}") from exc
        return cls(terms)

    def to_json(self) -> dict:
        return {"terms": [{k: v for k, v in vars(t).items() if v is not None} for t in self.terms]}


def load_loss_spec(path) -> LossSpec:
    with open(path, encoding="utf-8") as fh:
        return LossSpec.from_json(json.load(fh))


class ControlResult(NamedTuple):
    u_opt_seq: np.ndarray
    s_pred_seq: np.ndarray
    loss_trace: list
    gammas: list
    u_norm_seq: np.ndarray


def warm_start(u_prev_seq):
    """Shift left by one step and duplicate the last element."""
    u = np.asarray(u_prev_seq, dtype=np.float64)
    return np.concatenate([u[1:], u[-1:]], axis=0)


def gamma_grid(gamma_max: float, n: int) -> list[float]:
    """``{0} U {gamma_max * 10**-i : i < n}``, ascending."""
    if not gamma_max > 0 or n < 1:
        raise ConfigError("gamma_grid needs gamma_max > 0 and n >= 1")
    return [0.0] + sorted(gamma_max * 10.0 ** (-i) for i in range(n))


def periodic_mask(horizon: int, period: int, step_counter: int) -> np.ndarray:
    """1 every ``period`` steps; advancing the counter shifts the mask left."""
    j = np.arange(horizon)
    return ((step_counter + j + 1) % period == 0).astype(np.float64)


def eval_loss(spec: LossSpec, s_pred: dict, v_pred: dict | None, u_seq: dict, step_counter=0,
              periodic=None, with_grad=False):
    """Evaluate a loss spec on named sequences shaped ``(..., T, dim)``.

    ``u_seq`` maps control names to sequences. Returns the loss (reduced over
    time and dims, leading axes kept); with ``with_grad`` also returns
    gradients as dicts ``(ds, dv, du)`` matching the inputs.
    """
    def zeros(d):
        return {k: np.zeros_like(v) for k, v in d.items()} if d is not None else None

    ds, dv, du = zeros(s_pred), zeros(v_pred), zeros(u_seq)
    any_seq = next(iter(s_pred.values())) if s_pred else next(iter(u_seq.values()))
    total = np.zeros(any_seq.shape[:-2])

    for term in spec.terms:
        if term.kind == "control":
            for name, u in u_seq.items():
                total = total + term.weight * (u * u).sum(axis=(-2, -1))
                if with_grad:
                    du[name] += 2.0 * term.weight * u
            continue
        if term.kind == "variance":
            if v_pred is None or term.signal not in v_pred:
                raise ConfigError(f"{term.label}: variance prediction unavailable (variance mode off "
                                  "or signal not predicted)")
            x, grad_store = v_pred[term.signal], dv
        elif term.signal in s_pred:
            x, grad_store = s_pred[term.signal], ds
        elif term.signal in u_seq:
            x, grad_store = u_seq[term.signal], du
        else:
            raise ConfigError(f"{term.label}: signal is not predicted or controlled")
        T = x.shape[-2]

        if term.kind in ("track", "anisotropic"):
            ref = np.broadcast_to(np.asarray(term.target, dtype=np.float64), x.shape[-2:])
            r = x - ref
            w = np.ones_like(r)
            if term.kind == "anisotropic":
                w = np.where(x >= ref, 1.0, term.w4)
            if term.mask:
                period = term.mask_period or periodic
                if period is None:
                    raise ConfigError(f"{term.label}: mask requested without a period")
                w = w * periodic_mask(T, period, step_counter)[:, None]
            if term.kind == "anisotropic":
                val = ((w * r) ** 2).sum(axis=(-2, -1))
                g = 2.0 * w * w * r
            else:
                val = (w * r * r).sum(axis=(-2, -1))
                g = 2.0 * w * r
            contrib, grad = term.weight * val, term.weight * g
        elif term.kind in ("minimize", "maximize", "variance"):
            sign = -1.0 if term.kind == "maximize" else 1.0
            contrib = sign * term.weight * (x * x).sum(axis=(-2, -1))
            grad = sign * term.weight * 2.0 * x
        else:  # velocity over steps 3..T against 2..T-1 (1-based)
            grad = np.zeros_like(x)
            if T >= 3:
                d = x[..., 2:, :] - x[..., 1:-1, :]
                contrib = term.weight * (d * d).sum(axis=(-2, -1))
                grad[..., 2:, :] += 2.0 * term.weight * d
                grad[..., 1:-1, :] -= 2.0 * term.weight * d
            else:
                contrib = np.zeros(x.shape[:-2])
        if not np.all(np.isfinite(contrib)):
            raise NumericalError(f"loss term {term.label} produced a non-finite value")
        total = total + contrib
        if with_grad:
            grad_store[term.signal] += grad

    if not np.all(np.isfinite(total)):
        raise NumericalError("control loss is non-finite")
    if with_grad:
        return total, (ds, dv, du)
    return total


# dynamics used by the optimizer ---------------------------------------------------

class NetworkDynamics:
    """Expanded network from the live state; works in normalized units."""

    def __init__(self, bundle: ModelBundle, s_t, state=None, pb=None):
        self.bundle = bundle
        sc = bundle.scale("sensor")
        self.s0 = sc.normalize(s_t)[None, :]
        pb = bundle.current_pb if pb is None else pb
        self.rollout = Rollout(bundle, pb, state)
        self.td = bundle.shape.target_dim
        self.variance = bundle.shape.variance_mode
        outs = bundle.output_slices()
        self.sensor_slices = {s.name: outs[s.name] for s in bundle.output_signals if s.kind == "sensor"}
        self.control_slices = bundle.input_slices()
        self.control_slices = {s.name: self.control_slices[s.name] for s in bundle.controls}

    def predict(self, u):
        """``u`` (B, T, du) -> (means (B, T, td), variances or None)."""
        ys = self.rollout.run(self.s0, u)
        if self.variance:
            self._raw = ys[..., self.td:]
            mean, var = netcore.split_variance(ys)
            return mean, var
        return ys, None

    def grad(self, d_mean, d_var):
        dys = np.zeros(d_mean.shape[:-1] + (self.bundle.shape.output_dim,))
        dys[..., :self.td] = d_mean
        if self.variance and d_var is not None:
            dys[..., self.td:] = d_var * 0.5 * (1.0 + np.tanh(0.5 * self._raw))
        du, _ = self.rollout.backward(dys)
        return du


class LinearDynamics:
    """Exactly linear stand-in ``s' = A s + B u`` (no variance)."""

    def __init__(self, A, B, s0, sensor_slices, control_slices):
        self.A, self.B = np.atleast_2d(A), np.atleast_2d(B)
        self.s0 = np.asarray(s0, dtype=np.float64)
        self.sensor_slices, self.control_slices = sensor_slices, control_slices

    def predict(self, u):
        s = np.broadcast_to(self.s0, u.shape[:-2] + self.s0.shape)
        out = []
        for t in range(u.shape[-2]):
            s = s @ self.A.T + u[..., t, :] @ self.B.T
            out.append(s)
        return np.stack(out, axis=-2), None

    def grad(self, d_s, d_var):
        T = d_s.shape[-2]
        du = np.zeros(d_s.shape[:-1] + (self.B.shape[1],))
        carry = np.zeros_like(d_s[..., 0, :])
        for t in range(T - 1, -1, -1):
            carry = carry + d_s[..., t, :]
            du[..., t, :] = carry @ self.B
            carry = carry @ self.A
        return du


def _named(arr, slices):
    return {name: arr[..., sl] for name, sl in slices.items()}


def _flatten(named, slices, shape):
    out = np.zeros(shape)
    for name, sl in slices.items():
        if named is not None and name in named:
            out[..., sl] = named[name]
    return out


def optimize(dyn, loss_spec: LossSpec, u_init, bounds, cfg: ControlConfig, step_counter=0):
    """Exponential-grid gradient descent on a control horizon ``(T, du)``.

    Returns ``(u_best, mean_seq, var_seq, loss_trace, gammas)``.
    """
    lo, hi = bounds
    u = np.clip(np.asarray(u_init, dtype=np.float64), lo, hi)
    grid = gamma_grid(cfg.gamma_max, cfg.n_batch)

    def losses(u_batch, with_grad=False):
        mean, var = dyn.predict(u_batch)
        s_named = _named(mean, dyn.sensor_slices)
        v_named = _named(var, dyn.sensor_slices) if var is not None else None
        u_named = _named(u_batch, dyn.control_slices)
        res = eval_loss(loss_spec, s_named, v_named, u_named, step_counter, cfg.periodic, with_grad)
        return res, mean, var

    trace, gammas = [], []
    for _ in range(cfg.n_epoch):
        (loss, (ds, dv, du_direct)), mean, var = losses(u[None], with_grad=True)
        d_mean = _flatten(ds, dyn.sensor_slices, mean.shape)
        d_var = _flatten(dv, dyn.sensor_slices, mean.shape) if var is not None else None
        g = dyn.grad(d_mean, d_var)[0] + _flatten(du_direct, dyn.control_slices, u[None].shape)[0]
        if not np.all(np.isfinite(g)):
            raise NumericalError("control gradient is non-finite")
        cands = np.stack([np.clip(u - gam * g, lo, hi) for gam in grid])
        cand_loss, _, _ = losses(cands)
        best = int(np.argmin(cand_loss))  # first minimum = smallest gamma
        u = cands[best]
        trace.append(float(cand_loss[best]))
        gammas.append(grid[best])
    mean, var = dyn.predict(u[None])
    return u, mean[0], None if var is None else var[0], trace, gammas


def normalized_bounds(bundle: ModelBundle):
    """Control bounds in normalized units; [-1, 1] where none are declared."""
    sc = bundle.scale("control")
    lo, hi = -np.ones(bundle.control_dim), np.ones(bundle.control_dim)
    phys = bundle.control_bounds()
    if phys is not None:
        plo, phi = sc.normalize(phys[0]), sc.normalize(phys[1])
        declared = np.isfinite(phys[0]) & np.isfinite(phys[1])
        lo = np.where(declared, plo, lo)
        hi = np.where(declared, phi, hi)
    return lo, hi


def normalize_spec(bundle: ModelBundle, spec: LossSpec) -> LossSpec:
    """Convert physical targets of track/anisotropic terms to normalized units."""
    terms = []
    for t in spec.terms:
        if t.kind in ("track", "anisotropic") and t.target is not None:
            st = bundle.norm_stats[t.signal]
            t = LossTerm(**{**vars(t), "target": st.normalize(np.asarray(t.target, dtype=np.float64))})
        terms.append(t)
    return LossSpec(terms)


def stm_optimize(bundle: ModelBundle, s_t, state, u_prev_seq, loss_spec: LossSpec, cfg: ControlConfig,
                 pb=None, step_counter=0, dynamics=None) -> ControlResult:
    """One control tick for an STM bundle.

    ``u_prev_seq`` is the previous tick's physical control horizon; it is warm
    started before optimization. Returns physical controls and predictions.
    ``dynamics`` replaces the expanded network (normalized units), e.g. with a
    :class:`LinearDynamics` for oracle checks.
    """
    if bundle.structure != STM:
        raise UnsupportedStructureError("stm_optimize requires an STM bundle")
    u_prev_seq = np.asarray(u_prev_seq, dtype=np.float64).reshape(cfg.horizon, bundle.control_dim)
    for t in loss_spec.terms:
        if t.kind == "variance" and not bundle.shape.variance_mode:
            raise ConfigError(f"{t.label}: requires a variance-mode bundle")
    sc_u = bundle.scale("control")
    dyn = NetworkDynamics(bundle, s_t, state, pb) if dynamics is None else dynamics
    u0 = sc_u.normalize(warm_start(u_prev_seq))
    u, mean, var, trace, gammas = optimize(dyn, normalize_spec(bundle, loss_spec), u0,
                                           normalized_bounds(bundle), cfg, step_counter)
    o_s, v_s = bundle.output_index("sensor")
    sc_s = bundle.scale("sensor")
    if dynamics is not None:
        o_s = v_s = np.arange(mean.shape[-1])
    s_pred = mean[:, o_s] * sc_s.std[v_s] + sc_s.mean[v_s]
    return ControlResult(sc_u.denormalize(u), s_pred, trace, gammas, u)


def ctm_step(bundle: ModelBundle, s_prev, u_prev, state=None, pb=None):
    """Next control from one forward pass of a CTM bundle. Returns ``(u_t, new_state)``."""
    if bundle.structure != CTM:
        raise UnsupportedStructureError("ctm_step requires a CTM bundle")
    from .model import predict

    pred, new_state = predict(bundle, s_prev, u_prev, pb, state)
    u = np.array(u_prev, dtype=np.float64)
    ins = bundle.input_slices()
    for sig in bundle.controls:
        if sig.name in pred.signals:
            u[ins[sig.name]] = pred.signals[sig.name]
    phys = bundle.control_bounds()
    if phys is not None:
        u = np.clip(u, phys[0], phys[1])
    return u, new_state


class StmController:
    """Receding-horizon STM control with warm start and a live recurrent state."""

    def __init__(self, bundle: ModelBundle, loss_spec: LossSpec, cfg: ControlConfig, pb=None,
                 u_init=None):
        self.bundle, self.cfg = bundle, cfg
        self.loss_spec = loss_spec
        self.pb = bundle.current_pb if pb is None else np.asarray(pb, dtype=np.float64)
        self.state = bundle.initial_state()
        u0 = bundle.scale("control").mean if u_init is None else np.asarray(u_init, dtype=np.float64)
        self.u_seq = np.tile(u0, (cfg.horizon, 1))
        self.tick = 0
        self._captured = False

    def _capture_holds(self, s_t):
        terms = []
        ins = self.bundle.input_slices()
        for t in self.loss_spec.terms:
            if t.kind == "anisotropic" and t.target is None:
                t = LossTerm(**{**vars(t), "target": np.asarray(s_t)[ins[t.signal]]})
            terms.append(t)
        self.loss_spec = LossSpec(terms)
        self._captured = True

    def observe(self, s_t, u_t) -> None:
        """Advance the recurrent state on an externally chosen control (no optimization)."""
        x = self.bundle.network_input(self.bundle.scale("sensor").normalize(s_t),
                                      self.bundle.scale("control").normalize(u_t), self.pb)
        _, self.state = netcore.forward_step(self.bundle.params, x, self.state)
        self.u_seq = np.tile(np.asarray(u_t, dtype=np.float64), (self.cfg.horizon, 1))
        self.tick += 1

    def step(self, s_t) -> tuple[np.ndarray, ControlResult]:
        if not self._captured:
            self._capture_holds(s_t)
        res = stm_optimize(self.bundle, s_t, self.state, self.u_seq, self.loss_spec, self.cfg,
                           self.pb, self.tick)
        u_t = res.u_opt_seq[0]
        x = self.bundle.network_input(self.bundle.scale("sensor").normalize(s_t),
                                      self.bundle.scale("control").normalize(u_t), self.pb)
        _, self.state = netcore.forward_step(self.bundle.params, x, self.state)
        # warm_start shifts this horizon by one on the next tick
        self.u_seq = res.u_opt_seq
        self.tick += 1
        return u_t, res


def closed_loop(env, controller, n_ticks, seed=0, state=None):
    """Run a controller (``s -> (u, info)``) on an :class:`~dpmpb.envbench.Env`.

    Returns a dict of arrays: observed ``s`` (n_ticks+1), applied ``u``,
    per-tick ``loss`` and ``gamma`` (NaN for CTM), and env ``stuck`` flags.
    """
    rng = np.random.default_rng(seed)
    state = env.initial_state() if state is None else state
    s = env.observe(state, rng)
    S, U, L, G, stuck = [s], [], [], [], []
    for _ in range(n_ticks):
        u, res = controller.step(s)
        state, s, info = env.step(state, u, rng)
        S.append(s)
        U.append(u)
        L.append(res.loss_trace[-1] if res is not None else math.nan)
        G.append(res.gammas[-1] if res is not None else math.nan)
        stuck.append(bool(info.get("stuck", False)))
    return {"s": np.array(S), "u": np.array(U), "loss": np.array(L), "gamma": np.array(G),
            "stuck": np.array(stuck), "final_state": state}


class CtmController:
    def __init__(self, bundle: ModelBundle, pb=None, u_init=None):
        self.bundle = bundle
        self.pb = bundle.current_pb if pb is None else np.asarray(pb, dtype=np.float64)
        self.state = bundle.initial_state()
        self.u = bundle.scale("control").mean.copy() if u_init is None else np.asarray(u_init, float)
        self.s_prev = None

    def observe(self, s_t, u_t) -> None:
        if self.s_prev is not None:
            _, self.state = ctm_step(self.bundle, self.s_prev, self.u, self.state, self.pb)
        self.s_prev = np.asarray(s_t, dtype=np.float64)
        self.u = np.asarray(u_t, dtype=np.float64)

    def step(self, s_t):
        """The first tick replays the initial control; later ticks forward (s_{t-1}, u_{t-1})."""
        if self.s_prev is not None:
            self.u, self.state = ctm_step(self.bundle, self.s_prev, self.u, self.state, self.pb)
        self.s_prev = np.asarray(s_t, dtype=np.float64)
        return self.u, None
