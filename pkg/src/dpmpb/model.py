"""Predictive model with parametric bias, built on :mod:`dpmpb.netcore`.

The network input is ``concat(norm(s), norm(u), pb)``; sensors and controls
are concatenated in registry order. The output holds the kept sensors followed
by the kept controls (CTM only), each normalized; in variance mode a second
block of raw variances follows the means.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import netcore
from .errors import BundleLoadError, ConfigError, ModelUnusableError
from .netcore import NetworkShape, RecurrentState

SCHEMA_VERSION = 1
STD_FLOOR = 1e-6
STM, CTM = "STM", "CTM"
BUNDLE_KEYS = (
    "schema_version", "signals", "shape", "params", "norm_stats", "pb_table",
    "current_pb", "structure", "dropped_outputs", "anomaly", "training_losses",
)


@dataclass(frozen=True)
class SignalSpec:
    name: str
    kind: str
    dim: int = 1
    bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("sensor", "control"):
            raise ConfigError(f"signal {self.name!r}: kind must be 'sensor' or 'control'")
        if self.dim < 1:
            raise ConfigError(f"signal {self.name!r}: dim must be >= 1")
        if self.bounds is not None:
            b = tuple(tuple(float(v) for v in pair) for pair in self.bounds)
            if len(b) != self.dim or any(lo > hi for lo, hi in b):
                raise ConfigError(f"signal {self.name!r}: bounds must be {self.dim} (min, max) pairs")
            object.__setattr__(self, "bounds", b)

    def to_json(self):
        return {"name": self.name, "kind": self.kind, "dim": self.dim,
                "bounds": [list(b) for b in self.bounds] if self.bounds else None}

    @classmethod
    def from_json(cls, d):
        return cls(d["name"], d["kind"], int(d.get("dim", 1)), d.get("bounds"))


def check_signals(signals) -> None:
    names = [s.name for s in signals]
    if len(set(names)) != len(names):
        raise ConfigError("signal names must be unique")
    kinds = {s.kind for s in signals}
    if kinds != {"sensor", "control"}:
        raise ConfigError("at least one sensor and one control signal are required")


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def normalize(stats: NormStats, x):
    return stats.normalize(x)


def denormalize(stats: NormStats, x):
    return stats.denormalize(x)


def fit_norm_stats(data: np.ndarray) -> NormStats:
    data = np.asarray(data, dtype=np.float64)
    return NormStats(data.mean(axis=0), np.maximum(data.std(axis=0), STD_FLOOR))


class PBTable:
    """Ordered mapping class name -> trained PB vector."""

    def __init__(self, names, vectors):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        names = list(names)
        if len(set(names)) != len(names):
            raise ConfigError("PB class names must be unique")
        if len(names) != vectors.shape[0]:
            raise ConfigError("PB table: one vector per class required")
        self.names = names
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.vectors[self.names.index(name)]
        except ValueError:
            raise KeyError(f"unknown PB class {name!r}") from None

    @staticmethod
    def class_of(name: str) -> str:
        """Entries named ``class/index`` (one PB per episode) belong to ``class``."""
        return name.split("/", 1)[0]

    @property
    def classes(self) -> list[str]:
        return list(dict.fromkeys(self.class_of(n) for n in self.names))

    def centroids(self) -> dict[str, np.ndarray]:
        labels = [self.class_of(n) for n in self.names]
        return {c: self.vectors[[l == c for l in labels]].mean(axis=0) for c in self.classes}

    def lookup(self, name) -> np.ndarray:
        """PB of an entry, or the centroid when ``name`` is a class label."""
        if name in self.names:
            return self[name]
        cents = self.centroids()
        if name in cents:
            return cents[name]
        raise KeyError(f"unknown PB class {name!r}")

    def class_distances(self, p) -> dict[str, float]:
        return {c: float(np.linalg.norm(v - p)) for c, v in self.centroids().items()}

    def distances(self, p) -> dict[str, float]:
        d = np.linalg.norm(self.vectors - np.asarray(p)[None, :], axis=1)
        return dict(zip(self.names, d.tolist()))

    def nearest(self, p) -> str:
        """Class whose centroid is closest to ``p`` (the recognized class)."""
        d = self.class_distances(p)
        return min(d, key=d.get)

    def copy(self):
        return PBTable(self.names, self.vectors.copy())


class Prediction(NamedTuple):
    signals: dict
    variance: dict | None

    @property
    def s_pred(self):
        return self.signals


@dataclass
class ModelBundle:
    signals: list
    shape: NetworkShape
    params: dict
    norm_stats: dict
    pb_table: PBTable
    current_pb: np.ndarray
    structure: str = STM
    dropped_outputs: list = field(default_factory=list)
    anomaly: object = None
    training_losses: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        check_signals(self.signals)
        self.current_pb = np.asarray(self.current_pb, dtype=np.float64)
        if self.current_pb.shape != (self.pb_table.dim,):
            raise ConfigError("current_pb length must equal the PB dimension")
        if self.shape.input_dim != self.sensor_dim + self.control_dim + self.pb_dim:
            raise ConfigError("network input width does not match signals + PB")
        width = sum(s.dim for s in self.output_signals)
        if self.shape.target_dim != width:
            raise ConfigError("network output width does not match kept signals")
        if self.structure not in (STM, CTM):
            raise ConfigError(f"structure must be STM or CTM, got {self.structure!r}")
        if self.shape.variance_mode and self.structure == CTM:
            raise ConfigError("variance mode is restricted to STM bundles")
        netcore.check_params(self.params, self.shape)

    # layout -----------------------------------------------------------------
    @property
    def sensors(self):
        return [s for s in self.signals if s.kind == "sensor"]

    @property
    def controls(self):
        return [s for s in self.signals if s.kind == "control"]

    @property
    def sensor_dim(self) -> int:
        return sum(s.dim for s in self.sensors)

    @property
    def control_dim(self) -> int:
        return sum(s.dim for s in self.controls)

    @property
    def pb_dim(self) -> int:
        return self.pb_table.dim

    @property
    def output_signals(self):
        kept = [s for s in self.sensors if s.name not in self.dropped_outputs]
        if self.structure == CTM:
            kept += [s for s in self.controls if s.name not in self.dropped_outputs]
        return kept

    def signal(self, name) -> SignalSpec:
        for s in self.signals:
            if s.name == name:
                return s
        raise ConfigError(f"unknown signal {name!r}")

    def input_slices(self) -> dict[str, slice]:
        """Slices into the sensor vector (sensors) or control vector (controls)."""
        out, pos = {}, {"sensor": 0, "control": 0}
        for s in self.signals:
            out[s.name] = slice(pos[s.kind], pos[s.kind] + s.dim)
            pos[s.kind] += s.dim
        return out

    def output_slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for s in self.output_signals:
            out[s.name] = slice(pos, pos + s.dim)
            pos += s.dim
        return out

    def output_index(self, kind) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays (into output, into the sensor/control vector) for kept signals of ``kind``."""
        ins, outs = self.input_slices(), self.output_slices()
        o_idx, v_idx = [], []
        for s in self.output_signals:
            if s.kind == kind:
                o_idx.extend(range(outs[s.name].start, outs[s.name].stop))
                v_idx.extend(range(ins[s.name].start, ins[s.name].stop))
        return np.array(o_idx, dtype=int), np.array(v_idx, dtype=int)

    def scale(self, kind) -> NormStats:
        sigs = self.sensors if kind == "sensor" else self.controls
        return NormStats(np.concatenate([self.norm_stats[s.name].mean for s in sigs]),
                         np.concatenate([self.norm_stats[s.name].std for s in sigs]))

    def control_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Physical control bounds, or None when no control declares any."""
        if not any(s.bounds for s in self.controls):
            return None
        lo, hi = [], []
        for s in self.controls:
            b = s.bounds or ((-math.inf, math.inf),) * s.dim
            lo.extend(v[0] for v in b)
            hi.extend(v[1] for v in b)
        return np.array(lo), np.array(hi)

    def initial_state(self, batch=None) -> RecurrentState:
        return netcore.zero_state(self.shape, batch)

    def network_input(self, s_norm, u_norm, pb):
        """Assemble normalized inputs; broadcasting over leading axes."""
        s_norm, u_norm, pb = _lead(s_norm, u_norm, pb)
        return np.concatenate([s_norm, u_norm, pb], axis=-1)

    def with_params(self, **changes) -> "ModelBundle":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return ModelBundle(**d)


def _lead(s, u, p):
    s, u, p = (np.asarray(a, dtype=np.float64) for a in (s, u, p))
    lead = np.broadcast_shapes(s.shape[:-1], u.shape[:-1], p.shape[:-1])
    return (np.broadcast_to(s, lead + s.shape[-1:]), np.broadcast_to(u, lead + u.shape[-1:]),
            np.broadcast_to(p, lead + p.shape[-1:]))


def predict(bundle: ModelBundle, s_t, u_t, pb=None, state: RecurrentState | None = None):
    """One-step prediction in physical units. Returns ``(Prediction, new_state)``."""
    s_t = np.asarray(s_t, dtype=np.float64)
    u_t = np.asarray(u_t, dtype=np.float64)
    pb = bundle.current_pb if pb is None else np.asarray(pb, dtype=np.float64)
    if s_t.shape != (bundle.sensor_dim,) or u_t.shape != (bundle.control_dim,):
        raise ConfigError(f"expected s of dim {bundle.sensor_dim} and u of dim {bundle.control_dim}")
    if pb.shape != (bundle.pb_dim,):
        raise ConfigError(f"expected PB of dim {bundle.pb_dim}")
    state = bundle.initial_state() if state is None else state
    x = bundle.network_input(bundle.scale("sensor").normalize(s_t),
                             bundle.scale("control").normalize(u_t), pb)
    y, new_state = netcore.forward_step(bundle.params, x, state)
    return decode_output(bundle, y), new_state


def decode_output(bundle: ModelBundle, y) -> Prediction:
    """Split a raw normalized network output into denormalized per-signal values."""
    var = None
    if bundle.shape.variance_mode:
        y, var = netcore.split_variance(y)
    values, variances = {}, {} if var is not None else None
    for name, sl in bundle.output_slices().items():
        st = bundle.norm_stats[name]
        values[name] = st.denormalize(y[..., sl])
        if var is not None:
            variances[name] = var[..., sl] * st.std**2
    return Prediction(values, variances)


def sequence_io(bundle: ModelBundle, s, u, pb=None):
    """Normalized teacher-forced ``(inputs, targets)`` for an episode of T steps.

    Inputs are steps ``0..T-2``, targets the kept outputs at steps ``1..T-1``.
    """
    s_n = bundle.scale("sensor").normalize(s)
    u_n = bundle.scale("control").normalize(u)
    pb = bundle.current_pb if pb is None else np.asarray(pb, dtype=np.float64)
    xs = bundle.network_input(s_n[:-1], u_n[:-1], pb)
    return xs, target_vector(bundle, s_n[1:], u_n[1:])


def target_vector(bundle: ModelBundle, s_n, u_n):
    """Gather kept output signals from normalized sensor/control arrays."""
    o_s, v_s = bundle.output_index("sensor")
    o_u, v_u = bundle.output_index("control")
    out = np.empty(s_n.shape[:-1] + (bundle.shape.target_dim,))
    out[..., o_s] = s_n[..., v_s]
    if len(o_u):
        out[..., o_u] = u_n[..., v_u]
    return out


def forward_sequence(params, xs, state: RecurrentState | None = None):
    """Run the network over ``xs`` of shape ``(T, in)`` or ``(T, B, in)``; returns outputs."""
    xs = np.asarray(xs, dtype=np.float64)
    H = netcore.shape_of(params)[2]
    if state is None:
        dims = (2, H) if xs.ndim == 2 else (2, xs.shape[1], H)
        state = RecurrentState(np.zeros(dims), np.zeros(dims))
    ys = []
    for x in xs:
        y, state = netcore.forward_step(params, x, state)
        ys.append(y)
    return np.stack(ys), state


def select_structure(per_signal_losses: dict, threshold: float, signals) -> tuple[str, list]:
    """Drop every output whose loss reaches ``threshold``; CTM iff a control survives."""
    kinds = {s.name: s.kind for s in signals} if not isinstance(signals, dict) else dict(signals)
    if any(v < 0 for v in per_signal_losses.values()):
        raise ConfigError("per-signal losses must be non-negative")
    dropped = [n for n in kinds if n in per_signal_losses and per_signal_losses[n] >= threshold]
    sensors_kept = [n for n, k in kinds.items() if k == "sensor" and n not in dropped]
    if not sensors_kept:
        listing = ", ".join(f"{n}={per_signal_losses.get(n)}" for n in kinds)
        raise ModelUnusableError(f"all sensor outputs dropped at L_thre={threshold}: {listing}")
    controls_kept = [n for n, k in kinds.items() if k == "control" and n not in dropped]
    return (CTM if controls_kept else STM), dropped


# persistence ------------------------------------------------------------------

def _arr(x):
    return np.asarray(x, dtype=np.float64).tolist()


def bundle_to_json(bundle: ModelBundle) -> dict:
    return {
        "schema_version": bundle.schema_version,
        "signals": [s.to_json() for s in bundle.signals],
        "shape": {"input_dim": bundle.shape.input_dim, "output_dim": bundle.shape.output_dim,
                  "hidden": bundle.shape.hidden, "variance_mode": bundle.shape.variance_mode},
        "params": {k: _arr(v) for k, v in bundle.params.items()},
        "norm_stats": {k: {"mean": _arr(v.mean), "std": _arr(v.std)}
                       for k, v in bundle.norm_stats.items()},
        "pb_table": {n: _arr(v) for n, v in zip(bundle.pb_table.names, bundle.pb_table.vectors)},
        "current_pb": _arr(bundle.current_pb),
        "structure": bundle.structure,
        "dropped_outputs": list(bundle.dropped_outputs),
        "anomaly": None if bundle.anomaly is None else bundle.anomaly.to_json(),
        "training_losses": bundle.training_losses,
    }


def bundle_from_json(d: dict) -> ModelBundle:
    from .anomaly import AnomalyStats

    if not isinstance(d, dict):
        raise BundleLoadError("<root>", "model file must hold a JSON object")
    for key in BUNDLE_KEYS:
        if key not in d:
            raise BundleLoadError(key)
    if d["schema_version"] != SCHEMA_VERSION:
        raise BundleLoadError("schema_version",
                              f"schema_version {d['schema_version']!r} unsupported (expected {SCHEMA_VERSION})")

    def field_(key, fn):
        try:
            return fn(d[key])
        except BundleLoadError:
            raise
        except Exception as exc:
            raise BundleLoadError(key, f"{key} malformed: {exc}") from exc

    signals = field_("signals", lambda v: [SignalSpec.from_json(s) for s in v])
    shape = field_("shape", lambda v: NetworkShape(int(v["input_dim"]), int(v["output_dim"]),
                                                   int(v["hidden"]), bool(v["variance_mode"])))
    params = field_("params", lambda v: {k: np.asarray(a, dtype=np.float64) for k, a in v.items()})
    norm = field_("norm_stats", lambda v: {
        k: NormStats(np.asarray(s["mean"], dtype=np.float64), np.asarray(s["std"], dtype=np.float64))
        for k, s in v.items()})
    if d["pb_table"] is None or not d["pb_table"]:
        raise BundleLoadError("pb_table")
    table = field_("pb_table", lambda v: PBTable(list(v), [v[n] for n in v]))
    anomaly = field_("anomaly", lambda v: None if v is None else AnomalyStats.from_json(v))
    if set(norm) != {s.name for s in signals}:
        raise BundleLoadError("norm_stats", "norm_stats must cover every signal")
    try:
        return ModelBundle(signals=signals, shape=shape, params=params, norm_stats=norm,
                           pb_table=table, current_pb=d["current_pb"], structure=d["structure"],
                           dropped_outputs=list(d["dropped_outputs"]), anomaly=anomaly,
                           training_losses=d["training_losses"] or {},
                           schema_version=d["schema_version"])
    except ConfigError as exc:
        raise BundleLoadError("params", str(exc)) from exc


def save_bundle(bundle: ModelBundle, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle_to_json(bundle), fh)
        fh.write("\n")


def load_bundle(path) -> ModelBundle:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleLoadError("<root>", f"model file is not valid JSON: {exc}") from exc
    return bundle_from_json(d)


class Rollout:
    """Autoregressive expansion of the network with reverse-mode gradients.

    Step 0 consumes ``s0`` and ``u[:, 0]``. Afterwards kept sensor outputs are
    fed back as the next sensor input (dropped sensors come from ``s_fill``),
    and, with ``feed_u``, kept control outputs replace the control input.
    Everything is normalized and batched: ``s0`` (B, ds), ``u`` (B, T, du).
    """

    def __init__(self, bundle: ModelBundle, pb, state: RecurrentState | None = None):
        self.bundle = bundle
        self.pb = np.asarray(pb, dtype=np.float64)
        self.state = state
        self.o_s, self.v_s = bundle.output_index("sensor")
        self.o_u, self.v_u = bundle.output_index("control")

    def _initial(self, B):
        H = self.bundle.shape.hidden
        if self.state is None:
            return RecurrentState(np.zeros((2, B, H)), np.zeros((2, B, H)))
        h = np.broadcast_to(self.state.h.reshape(2, -1, H), (2, B, H)).copy()
        c = np.broadcast_to(self.state.c.reshape(2, -1, H), (2, B, H)).copy()
        return RecurrentState(h, c)

    def run(self, s0, u, feed_u=False, s_fill=None):
        """Returns raw outputs ``(B, T, out_dim)``; keeps caches for :meth:`backward`."""
        s0 = np.asarray(s0, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        B, T, _ = u.shape
        pb = np.broadcast_to(self.pb, (B, self.pb.shape[-1]))
        st = self._initial(B)
        s_in = np.broadcast_to(s0, (B, s0.shape[-1])).copy()
        u_in = u[:, 0].copy()
        ys, caches = [], []
        for t in range(T):
            if t > 0:
                s_in = (np.broadcast_to(s_fill[:, t], s_in.shape).copy() if s_fill is not None
                        else s_in.copy())
                s_in[:, self.v_s] = ys[-1][:, self.o_s]
                u_in = u[:, t].copy()
                if feed_u:
                    u_in[:, self.v_u] = ys[-1][:, self.o_u]
            x = np.concatenate([s_in, u_in, pb], axis=-1)
            y, st, cache = netcore.forward_cached(self.bundle.params, x, st)
            ys.append(y)
            caches.append(cache)
        self._caches, self._feed_u = caches, feed_u
        self._dims = (s0.shape[-1], u.shape[-1])
        return np.stack(ys, axis=1)

    def backward(self, dys):
        """Given dL/dy ``(B, T, out)``, return ``(dL/du (B, T, du), dL/dpb (B, dp))``."""
        ds, du_dim = self._dims
        dys = np.array(dys, dtype=np.float64)
        B, T, _ = dys.shape
        du = np.zeros((B, T, du_dim))
        dpb = np.zeros((B, self.pb.shape[-1]))
        dstate = None
        for t in range(T - 1, -1, -1):
            dx, dstate = netcore.backward_step(self.bundle.params, self._caches[t], dys[:, t],
                                               dstate, None)
            dpb += dx[:, ds + du_dim:]
            dxu = dx[:, ds:ds + du_dim]
            if t > 0:
                dys[:, t - 1, self.o_s] += dx[:, self.v_s]
                if self._feed_u:
                    dys[:, t - 1, self.o_u] += dxu[:, self.v_u]
                    dxu = dxu.copy()
                    dxu[:, self.v_u] = 0.0
            du[:, t] = dxu
        return du, dpb
