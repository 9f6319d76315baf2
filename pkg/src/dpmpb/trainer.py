"""Joint training of network weights and per-class parametric bias.

Datasets are JSON Lines, one episode per line::

    {"class": "heavy", "steps": [{"s": {"pos": [0.1]}, "u": {"force": [0.0]}}, ...]}
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import netcore
from .errors import ConfigError, DataError
from .model import (CTM, STM, ModelBundle, PBTable, check_signals, fit_norm_stats, forward_sequence,
                    select_structure, sequence_io)
from .netcore import NetworkShape

log = logging.getLogger(__name__)


@dataclass
class Episode:
    class_name: str
    s: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.s = np.atleast_2d(np.asarray(self.s, dtype=np.float64))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=np.float64))
        if len(self.s) != len(self.u):
            raise DataError(f"episode {self.class_name!r}: s and u lengths differ")
        if len(self.s) < 2:
            raise DataError(f"episode {self.class_name!r}: needs at least 2 steps")

    def __len__(self):
        return len(self.s)


class Dataset(list):
    """A list of episodes; classes are ordered by first appearance."""

    @property
    def classes(self) -> list[str]:
        return list(dict.fromkeys(ep.class_name for ep in self))

    @property
    def transitions(self) -> int:
        return sum(len(ep) - 1 for ep in self)

    def by_class(self) -> dict[str, list[Episode]]:
        out = {c: [] for c in self.classes}
        for ep in self:
            out[ep.class_name].append(ep)
        return out


def check_dataset(dataset, signals) -> None:
    if not len(dataset):
        raise DataError("dataset is empty")
    ds = sum(s.dim for s in signals if s.kind == "sensor")
    du = sum(s.dim for s in signals if s.kind == "control")
    for i, ep in enumerate(dataset):
        if ep.s.shape[1] != ds or ep.u.shape[1] != du:
            raise DataError(f"episode {i} ({ep.class_name}): dims ({ep.s.shape[1]}, {ep.u.shape[1]}) "
                            f"do not match signals ({ds}, {du})")
        if not (np.isfinite(ep.s).all() and np.isfinite(ep.u).all()):
            raise DataError(f"episode {i} ({ep.class_name}): non-finite values")


# written on every episode line; lines without it are read as this version
DATASET_FORMAT = 1


def episode_to_json(ep: Episode, signals) -> dict:
    steps = []
    for s_row, u_row in zip(ep.s, ep.u):
        step = {"s": {}, "u": {}}
        pos = {"sensor": 0, "control": 0}
        for sig in signals:
            row = s_row if sig.kind == "sensor" else u_row
            key = "s" if sig.kind == "sensor" else "u"
            step[key][sig.name] = row[pos[sig.kind]:pos[sig.kind] + sig.dim].tolist()
            pos[sig.kind] += sig.dim
        steps.append(step)
    return {"format": DATASET_FORMAT, "class": ep.class_name, "steps": steps}


def _signal_values(block, sig) -> np.ndarray:
    v = np.asarray(block[sig.name], dtype=np.float64).reshape(-1)
    if v.size != sig.dim:
        raise DataError(f"signal {sig.name!r} has {v.size} values, expected {sig.dim}")
    return v


def episode_from_json(d: dict, signals) -> Episode:
    if d.get("format", DATASET_FORMAT) != DATASET_FORMAT:
        raise DataError(f"dataset format {d['format']!r} unsupported (expected {DATASET_FORMAT})")
    try:
        s_rows, u_rows = [], []
        for step in d["steps"]:
            s_rows.append(np.concatenate([_signal_values(step["s"], g) for g in signals if g.kind == "sensor"]))
            u_rows.append(np.concatenate([_signal_values(step["u"], g) for g in signals if g.kind == "control"]))
        return Episode(str(d["class"]), np.array(s_rows), np.array(u_rows))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed episode: missing or invalid {exc!r}") from exc


def write_dataset(path, episodes, signals) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_json(ep, signals)) + "\n")


def read_dataset(path, signals) -> Dataset:
    out = Dataset()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append(episode_from_json(d, signals))
    check_dataset(out, signals)
    return out


@dataclass
class TrainConfig:
    n_step: int = 20
    n_batch: int = 32
    n_epoch: int = 300
    l_thre: float = 0.3
    loss_kind: str = "mse"
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    holdout: float = 0.1
    # "class": one PB per dynamics class; "episode": one per episode, named class/index
    pb_per: str = "class"
    # None: enough batches per epoch to cover the training transitions once
    batches_per_epoch: int | None = None

    def __post_init__(self):
        if self.n_step < 2:
            raise ConfigError("train.n_step must be >= 2")
        if self.n_batch < 1 or self.n_epoch < 1:
            raise ConfigError("train.n_batch and train.n_epoch must be >= 1")
        if not self.l_thre > 0:
            raise ConfigError("train.l_thre must be > 0")
        if self.loss_kind not in ("mse", "nll"):
            raise ConfigError("train.loss_kind must be 'mse' or 'nll'")
        if self.pb_per not in ("class", "episode"):
            raise ConfigError("train.pb_per must be 'class' or 'episode'")
        if not 0 <= self.holdout < 1:
            raise ConfigError("train.holdout must be in [0, 1)")
        if not self.lr > 0 or not self.eps > 0:
            raise ConfigError("train.lr and train.eps must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must be in [0, 1)")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("train.batches_per_epoch must be >= 1 or null")


class Batch(NamedTuple):
    """Padded training windows, time-major: ``base`` (L, B, ds+du) holds normalized s, u."""

    base: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    class_idx: np.ndarray


class FitResult(NamedTuple):
    bundle: ModelBundle
    losses: dict
    history: list


def train_step(params, pb_table, opt_state, batch: Batch, cfg: TrainConfig, variance_mode=False):
    """One Adam step on the weights and the PB rows of the sampled classes.

    Returns ``(params', pb_table', opt_state', loss)``.
    """
    L, B, _ = batch.base.shape
    pb = pb_table[batch.class_idx]
    H = netcore.shape_of(params)[2]
    st = netcore.RecurrentState(np.zeros((2, B, H)), np.zeros((2, B, H)))
    caches, dys = [], []
    total, count = 0.0, 0.0
    for t in range(L):
        x = np.concatenate([batch.base[t], pb], axis=-1)
        y, st, cache = netcore.forward_cached(params, x, st)
        loss_t, dy_t, n_t = netcore.output_loss(y, batch.targets[t], cfg.loss_kind, variance_mode,
                                                weight=batch.mask[t])
        total += loss_t
        count += n_t
        caches.append(cache)
        dys.append(dy_t)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    d_pb = np.zeros_like(pb)
    dstate = None
    for t in range(L - 1, -1, -1):
        dx, dstate = netcore.backward_step(params, caches[t], dys[t] / count, dstate, grads)
        d_pb += dx[:, -pb.shape[1]:]
    grads["pb"] = np.zeros_like(pb_table)
    np.add.at(grads["pb"], batch.class_idx, d_pb)

    sampled = np.zeros(len(pb_table), dtype=bool)
    sampled[batch.class_idx] = True
    merged = dict(params, pb=pb_table)
    new, opt_state = netcore.adam_step(merged, grads, opt_state, cfg.lr, cfg.beta1, cfg.beta2,
                                       cfg.eps, rows={"pb": sampled})
    new_pb = new.pop("pb")
    return new, new_pb, opt_state, total / count


class _Windows:
    """Chunking of episodes into held-out blocks and sampleable training windows."""

    def __init__(self, episodes, classes, n_step, holdout, rng):
        self.lengths = [min(n_step, len(ep) - 1) for ep in episodes]
        for i, (ep, L) in enumerate(zip(episodes, self.lengths)):
            if L < n_step:
                log.warning("episode %d (%s) has %d transitions; using window length %d",
                            i, ep.class_name, len(ep) - 1, L)
        chunks = []
        for i, (ep, L) in enumerate(zip(episodes, self.lengths)):
            n = len(ep) - 1
            chunks.extend((i, a) for a in range(0, n - L + 1, L))
        held = np.zeros(len(chunks), dtype=bool)
        n_hold = int(round(holdout * len(chunks))) if len(chunks) > 1 else 0
        n_hold = max(n_hold, 1) if holdout > 0 and len(chunks) > 1 else n_hold
        blocked = [np.zeros(len(ep) - 1, dtype=bool) for ep in episodes]
        for c in rng.permutation(len(chunks)):
            if held.sum() >= n_hold:
                break
            i, a = chunks[c]
            blocked[i][a:a + self.lengths[i]] = True
            if self._starts_for_class(episodes, classes, blocked, episodes[i].class_name):
                held[c] = True
            else:
                blocked[i][a:a + self.lengths[i]] = False
        self.heldout = [chunks[c] for c in range(len(chunks)) if held[c]]
        if not self.heldout:
            log.info("no held-out windows; signal losses are computed on training windows")
            self.heldout = list(chunks)
        self.starts = {c: self._starts_for_class(episodes, classes, blocked, c) for c in classes}

    def _starts_for_class(self, episodes, classes, blocked, cls):
        out = []
        for i, ep in enumerate(episodes):
            if ep.class_name != cls:
                continue
            L = self.lengths[i]
            bad = np.concatenate([[0], np.cumsum(blocked[i])])
            for a in range(0, len(ep) - L):
                if bad[a + L] - bad[a] == 0:
                    out.append((i, a))
        return out


def _prepare(episodes, bundle):
    """Normalized (base inputs, targets) per episode."""
    s_sc, u_sc = bundle.scale("sensor"), bundle.scale("control")
    out = []
    for ep in episodes:
        base = np.concatenate([s_sc.normalize(ep.s), u_sc.normalize(ep.u)], axis=-1)
        _, targets = sequence_io(bundle, ep.s, ep.u)
        out.append((base[:-1], targets))
    return out


def _make_batch(prepared, windows, picks, lengths, class_of):
    L = max(lengths[i] for i, _ in picks)
    B = len(picks)
    width = prepared[0][0].shape[1]
    tdim = prepared[0][1].shape[1]
    base = np.zeros((L, B, width))
    targets = np.zeros((L, B, tdim))
    mask = np.zeros((L, B))
    for b, (i, a) in enumerate(picks):
        n = lengths[i]
        base[:n, b] = prepared[i][0][a:a + n]
        targets[:n, b] = prepared[i][1][a:a + n]
        mask[:n, b] = 1.0
    return Batch(base, targets, mask, np.array([class_of[i] for i, _ in picks]))


def pb_entries(dataset, pb_per) -> tuple[list[str], list[int]]:
    """PB table names and, per episode, the row index of its PB."""
    if pb_per == "class":
        names = dataset.classes
        return names, [names.index(ep.class_name) for ep in dataset]
    counts: dict[str, int] = {}
    names = []
    for ep in dataset:
        j = counts.get(ep.class_name, 0)
        counts[ep.class_name] = j + 1
        names.append(f"{ep.class_name}/{j}")
    return names, list(range(len(dataset)))


def _empty_bundle(dataset, signals, cfg, hidden, pb_dim, dropped, structure):
    variance = cfg.loss_kind == "nll"
    if variance and structure == CTM:
        raise ConfigError("nll (variance) training is restricted to STM models; drop the control outputs")
    norm = {}
    pos = {"sensor": 0, "control": 0}
    all_s = np.concatenate([ep.s for ep in dataset])
    all_u = np.concatenate([ep.u for ep in dataset])
    for sig in signals:
        data = all_s if sig.kind == "sensor" else all_u
        norm[sig.name] = fit_norm_stats(data[:, pos[sig.kind]:pos[sig.kind] + sig.dim])
        pos[sig.kind] += sig.dim
    ds, du = all_s.shape[1], all_u.shape[1]
    kept = [s for s in signals if s.name not in dropped and (s.kind == "sensor" or structure == CTM)]
    out_dim = sum(s.dim for s in kept) * (2 if variance else 1)
    shape = NetworkShape(ds + du + pb_dim, out_dim, hidden, variance)
    names, _ = pb_entries(dataset, cfg.pb_per)
    return ModelBundle(
        signals=list(signals), shape=shape, params=netcore.init_params(shape, cfg.seed),
        norm_stats=norm, pb_table=PBTable(names, np.zeros((len(names), pb_dim))),
        current_pb=np.zeros(pb_dim), structure=structure, dropped_outputs=list(dropped))


def fit(dataset, signals, cfg: TrainConfig, hidden=64, pb_dim=2, dropped=()) -> FitResult:
    """Train W and every class PB jointly.

    ``dropped`` lists signals excluded from the output; the model is CTM iff a
    control signal remains. Returns the bundle, held-out per-signal losses L_n
    and the per-epoch training loss history.
    """
    dataset = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    check_signals(signals)
    check_dataset(dataset, signals)
    dropped = list(dropped)
    controls_kept = [s for s in signals if s.kind == "control" and s.name not in dropped]
    structure = CTM if controls_kept else STM
    bundle = _empty_bundle(dataset, signals, cfg, hidden, pb_dim, dropped, structure)
    rng = np.random.default_rng(cfg.seed)

    classes = dataset.classes
    names, row_of = pb_entries(dataset, cfg.pb_per)
    windows = _Windows(dataset, classes, cfg.n_step, cfg.holdout, rng)
    prepared = _prepare(dataset, bundle)
    n_train = sum(len(v) for v in windows.starts.values())
    per_epoch = cfg.batches_per_epoch or max(1, math.ceil(n_train / cfg.n_batch / cfg.n_step))

    params, pb_table, opt_state = bundle.params, bundle.pb_table.vectors, None
    history = []
    for _ in range(cfg.n_epoch):
        losses = []
        for _ in range(per_epoch):
            cls = rng.integers(len(classes), size=cfg.n_batch)
            picks = []
            for c in cls:
                starts = windows.starts[classes[c]]
                picks.append(starts[rng.integers(len(starts))])
            batch = _make_batch(prepared, windows, picks, windows.lengths, row_of)
            params, pb_table, opt_state, loss = train_step(params, pb_table, opt_state, batch, cfg,
                                                           bundle.shape.variance_mode)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if not math.isfinite(history[-1]):
            from .errors import NumericalError
            raise NumericalError(f"training loss became non-finite at epoch {len(history)}")

    bundle = bundle.with_params(params=params, pb_table=PBTable(names, pb_table),
                                current_pb=pb_table.mean(axis=0))
    held = [Episode(dataset[i].class_name, dataset[i].s[a:a + windows.lengths[i] + 1],
                    dataset[i].u[a:a + windows.lengths[i] + 1]) for i, a in windows.heldout]
    losses = compute_signal_losses(bundle, held, pbs=[pb_table[row_of[i]] for i, _ in windows.heldout])
    bundle.training_losses = {"L_n": losses, "final_loss": history[-1]}
    return FitResult(bundle, losses, history)


def auto_fit(dataset, signals, cfg: TrainConfig, hidden=64, pb_dim=2) -> FitResult:
    """Two-phase training: full output, drop outputs with L_n >= L_thre, retrain."""
    phase1_cfg = TrainConfig(**{**asdict(cfg), "loss_kind": "mse"})
    first = fit(dataset, signals, phase1_cfg, hidden, pb_dim, dropped=())
    structure, dropped = select_structure(first.losses, cfg.l_thre, signals)
    log.info("phase 1 losses %s -> %s, dropped %s", first.losses, structure, dropped)
    if not dropped and cfg.loss_kind == "mse":
        second = first
    else:
        second = fit(dataset, signals, cfg, hidden, pb_dim, dropped=dropped)
    bundle = second.bundle
    bundle.training_losses = {
        "phase1": {"L_n": first.losses, "final_loss": first.history[-1]},
        "phase2": {"L_n": second.losses, "final_loss": second.history[-1]},
        "structure": structure,
        "dropped_outputs": dropped,
    }
    return FitResult(bundle, second.losses, second.history)


def compute_signal_losses(bundle: ModelBundle, dataset, pbs=None) -> dict:
    """Teacher-forced one-step mse per output signal in normalized space.

    Each episode runs from a zero recurrent state with ``pbs[i]`` if given,
    else its class PB (centroid for per-episode tables; the current PB for
    unknown classes).
    """
    sq = {s.name: 0.0 for s in bundle.output_signals}
    n = {s.name: 0 for s in bundle.output_signals}
    slices = bundle.output_slices()
    for i, ep in enumerate(dataset):
        if pbs is not None:
            pb = pbs[i]
        else:
            try:
                pb = bundle.pb_table.lookup(ep.class_name)
            except KeyError:
                pb = None
        xs, ts = sequence_io(bundle, ep.s, ep.u, pb)
        ys, _ = forward_sequence(bundle.params, xs)
        r = ys[:, :bundle.shape.target_dim] - ts
        for name, sl in slices.items():
            sq[name] += float((r[:, sl] ** 2).sum())
            n[name] += r[:, sl].size
    return {name: sq[name] / max(n[name], 1) for name in sq}
