"""Command-line workflow: collect -> train -> calibrate -> adapt / control / detect -> pca -> report.

Every command is deterministic given ``--seed``. Reports are CSV; ``report``
renders figures from those CSVs. Exit codes: 0 ok, 2 config, 3 data,
4 model unusable, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import adapter, anomaly, controller, envbench, pbspace, trainer
from .errors import ConfigError, DataError, DPMPBError
from .model import CTM, SignalSpec, check_signals, load_bundle, save_bundle

log = logging.getLogger("dpmpb")

COLLECT_MODES = ("random", "teacher", "switch")
REPORT_FORMAT = 1


# configuration ------------------------------------------------------------------

def _block(d, path, cls, extra=()):
    """Build dataclass ``cls`` from dict ``d``; unknown keys and bad values name ``path``."""
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: must be an object")
    known = {f.name for f in fields(cls)}
    bad = set(d) - known - set(extra)
    if bad:
        raise ConfigError(f"{path}: unknown keys {sorted(bad)}")
    try:
        return cls(**{k: v for k, v in d.items() if k in known})
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(path) else f"{path}: {msg}") from exc


@dataclass
class CollectBlock:
    mode: str = "random"
    episodes: int = 4
    steps: int = 300
    hold_steps: int = 5
    seed: int = 0
    policy: dict = field(default_factory=dict)
    policies: dict = field(default_factory=dict)
    switch: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in COLLECT_MODES:
            raise ConfigError(f"collect.mode must be one of {COLLECT_MODES}")
        if self.episodes < 0 or self.steps < 2:
            raise ConfigError("collect.episodes must be >= 0 and collect.steps >= 2")


@dataclass
class AdaptBlock:
    capacity: int = 300
    threshold: int = 30
    every: int = 1


@dataclass
class ControlBlock:
    ticks: int = 50
    loss: object = None
    env: str | None = None
    u_init: list | None = None


@dataclass
class DetectBlock:
    sigmas: float = 3.0
    threshold: float | None = None
    window: int = 1
    signals: list | None = None

    def __post_init__(self):
        if not self.sigmas > 0:
            raise ConfigError("detect.sigmas must be > 0")
        if self.window < 1:
            raise ConfigError("detect.window must be >= 1")


@dataclass
class RunConfig:
    signals: list
    envs: list
    pb_dim: int = 2
    hidden: int = 64
    model: str = "model.json"
    collect: CollectBlock = field(default_factory=CollectBlock)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    adapt: adapter.AdaptConfig = field(default_factory=adapter.AdaptConfig)
    adapt_buffer: AdaptBlock = field(default_factory=AdaptBlock)
    control: controller.ControlConfig = field(default_factory=controller.ControlConfig)
    control_run: ControlBlock = field(default_factory=ControlBlock)
    detect: DetectBlock = field(default_factory=DetectBlock)

    def env(self, name=None) -> envbench.EnvSpec:
        if not self.envs:
            raise ConfigError("envs: no environment configured")
        if name is None:
            return self.envs[0]
        for e in self.envs:
            if e.name == name:
                return e
        raise ConfigError(f"envs: no environment with class {name!r}")

    @classmethod
    def from_json(cls, d: dict, base_dir=".") -> "RunConfig":
        import os

        if not isinstance(d, dict):
            raise ConfigError("config: must be a JSON object")
        top = {"signals", "envs", "env", "pb_dim", "hidden", "model", "collect", "train", "adapt",
               "control", "detect"}
        bad = set(d) - top
        if bad:
            raise ConfigError(f"config: unknown keys {sorted(bad)}")
        raw_envs = d.get("envs", [d["env"]] if "env" in d else [])
        envs = []
        for i, e in enumerate(raw_envs):
            if isinstance(e, str):
                e = _read_json(os.path.join(base_dir, e), f"envs[{i}]")
            envs.append(_block_env(e, f"envs[{i}]"))
        if len({e.name for e in envs}) != len(envs):
            raise ConfigError("envs: class names must be unique")
        if "signals" in d:
            try:
                signals = [SignalSpec.from_json(s) for s in d["signals"]]
                check_signals(signals)
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"signals: {exc!r}") from exc
            except ConfigError as exc:
                raise ConfigError(f"signals: {exc}") from exc
        elif envs:
            signals = envbench.Env(envs[0]).signals
        else:
            raise ConfigError("signals: required when no env is configured")
        for i, e in enumerate(envs):
            if [s.to_json() for s in envbench.Env(e).signals] != [s.to_json() for s in signals]:
                raise ConfigError(f"envs[{i}]: signal layout differs from config signals")
        for key in ("pb_dim", "hidden"):
            if key in d and (not isinstance(d[key], int) or d[key] < 1):
                raise ConfigError(f"{key}: must be a positive integer")
        adapt_d = dict(d.get("adapt") or {})
        buf_keys = {f.name for f in fields(AdaptBlock)}
        ctl_d = dict(d.get("control") or {})
        run_keys = {f.name for f in fields(ControlBlock)}
        cfg = cls(
            signals=signals, envs=envs, pb_dim=d.get("pb_dim", 2), hidden=d.get("hidden", 64),
            model=d.get("model", "model.json"),
            collect=_block(d.get("collect"), "collect", CollectBlock),
            train=_block(d.get("train"), "train", trainer.TrainConfig),
            adapt=_block({k: v for k, v in adapt_d.items() if k not in buf_keys}, "adapt",
                         adapter.AdaptConfig),
            adapt_buffer=_block({k: v for k, v in adapt_d.items() if k in buf_keys}, "adapt", AdaptBlock),
            control=_block({k: v for k, v in ctl_d.items() if k not in run_keys}, "control",
                           controller.ControlConfig),
            control_run=_block({k: v for k, v in ctl_d.items() if k in run_keys}, "control", ControlBlock),
            detect=_block(d.get("detect"), "detect", DetectBlock),
        )
        if cfg.adapt_buffer.capacity < 1 or not 0 <= cfg.adapt_buffer.threshold <= cfg.adapt_buffer.capacity:
            raise ConfigError("adapt.threshold must be in [0, adapt.capacity]")
        loss = cfg.control_run.loss
        if isinstance(loss, str):
            loss = _read_json(os.path.join(base_dir, loss), "control.loss")
        if loss is not None:
            try:
                cfg.control_run.loss = controller.LossSpec.from_json(loss)
            except ConfigError as exc:
                raise ConfigError(f"control.loss: {exc}") from exc
        return cfg


def _block_env(e, path):
    try:
        return envbench.EnvSpec.from_json(e)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _read_json(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{what}: file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: invalid JSON in {path}: {exc}") from exc


def load_config(path) -> RunConfig:
    import os

    return RunConfig.from_json(_read_json(path, "config"), os.path.dirname(os.path.abspath(path)))


# I/O helpers ----------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


class _CsvOut:
    def __init__(self, path):
        self.fh = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
        self.w = csv.writer(self.fh, lineterminator="\n")

    def row(self, values):
        self.w.writerow([_fmt(v) for v in values])

    def close(self):
        if self.fh is not sys.stdout:
            self.fh.close()
        else:
            self.fh.flush()


def _vector_names(signals, kind, prefix):
    out = []
    for s in signals:
        if s.kind == kind:
            out.extend(f"{prefix}:{s.name}" if s.dim == 1 else f"{prefix}:{s.name}[{i}]" for i in range(s.dim))
    return out


def iter_steps(lines, signals):
    """Yield ``(episode_index, s, u)`` from JSON Lines of episodes or single steps."""
    ep_index = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: {exc}") from exc
        if isinstance(d, dict) and "steps" in d:
            ep = trainer.episode_from_json(d, signals)
            for s, u in zip(ep.s, ep.u):
                yield ep_index, s, u
            ep_index += 1
            continue
        ep = trainer.episode_from_json({"class": "-", "steps": [d, d]}, signals)
        yield ep_index, ep.s[0], ep.u[0]


def _input_lines(path):
    if path in (None, "-"):
        return sys.stdin
    try:
        return open(path, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"input not found: {path}") from exc


def _load_model(path):
    try:
        return load_bundle(path)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc


def _pb_for(bundle, name):
    if name is None:
        return bundle.current_pb.copy()
    try:
        return bundle.pb_table.lookup(name)
    except KeyError as exc:
        raise ConfigError(f"--pb: {name!r} is not a trained class ({', '.join(bundle.pb_table.classes)})") from exc


# commands -------------------------------------------------------------------------

def cmd_collect(args, cfg: RunConfig) -> int:
    c = cfg.collect
    if args.mode:
        c.mode = args.mode
    if args.episodes is not None:
        c.episodes = args.episodes
    if args.steps is not None:
        c.steps = args.steps
    seed = c.seed if args.seed is None else args.seed
    if c.episodes == 0:
        raise DataError("collect: zero episodes requested (empty dataset)")
    episodes = []
    if c.mode == "switch":
        sw = c.switch
        try:
            before, after, at = cfg.env(sw["before"]), cfg.env(sw["after"]), int(sw["at"])
        except KeyError as exc:
            raise ConfigError(f"collect.switch: missing {exc}") from exc
        for i in range(c.episodes):
            episodes.append(envbench.collect_switch(envbench.Env(before), envbench.Env(after), at,
                                                    c.steps - at, c.hold_steps, seed + i))
    else:
        for k, spec in enumerate(cfg.envs):
            env = envbench.Env(spec)
            for i in range(c.episodes):
                ep_seed = seed + 1000 * k + i
                if c.mode == "random":
                    ep = envbench.collect_random(env, c.steps, hold_steps=c.hold_steps, seed=ep_seed)
                else:
                    pol = envbench.make_policy(c.policies.get(spec.name, c.policy))
                    ep = envbench.collect_teacher(env, pol, c.steps, seed=ep_seed)
                episodes.append(ep)
    trainer.write_dataset(args.out, episodes, cfg.signals)
    counts = trainer.Dataset(episodes).by_class()
    for name, eps in counts.items():
        print(f"{name}: {len(eps)} episodes, {sum(len(e) for e in eps)} steps")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data = trainer.read_dataset(args.data, cfg.signals)
    tcfg = cfg.train if args.seed is None else trainer.TrainConfig(**{**asdict(cfg.train), "seed": args.seed})
    res = trainer.auto_fit(data, cfg.signals, tcfg, hidden=cfg.hidden, pb_dim=cfg.pb_dim)
    out = args.out or cfg.model
    save_bundle(res.bundle, out)
    report = {"format_version": REPORT_FORMAT, "structure": res.bundle.structure, "dropped_outputs": res.bundle.dropped_outputs,
              "L_n": res.losses, "final_loss": res.history[-1],
              "phase1_L_n": res.bundle.training_losses["phase1"]["L_n"], "l_thre": tcfg.l_thre,
              "pb_table": {n: v.tolist() for n, v in zip(res.bundle.pb_table.names, res.bundle.pb_table.vectors)}}
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.history:
        w = _CsvOut(args.history)
        w.row(["epoch", "loss"])
        for i, v in enumerate(res.history, 1):
            w.row([i, v])
        w.close()
    print(f"structure: {report['structure']}")
    print(f"dropped: {', '.join(report['dropped_outputs']) or '-'}")
    for name, v in report["phase1_L_n"].items():
        print(f"L_n[{name}] = {v:.6g}")
    print(f"final loss: {report['final_loss']:.6g}")
    return 0


def cmd_calibrate(args, cfg: RunConfig | None) -> int:
    bundle = _load_model(args.model)
    det = cfg.detect if cfg is not None else DetectBlock()
    data = trainer.read_dataset(args.data, bundle.signals)
    if args.class_name is not None:
        data = trainer.Dataset([ep for ep in data if ep.class_name == args.class_name])
        if not len(data):
            raise DataError(f"calibrate: no episodes of class {args.class_name!r} in {args.data}")
    pb = None if args.pb is None else _pb_for(bundle, args.pb)
    stats = anomaly.calibrate(bundle, data, pb=pb, signals=det.signals, sigmas=det.sigmas)
    if det.threshold is not None:
        stats = stats.with_threshold(det.threshold)
    if args.threshold is not None:
        stats = stats.with_threshold(args.threshold)
    bundle.anomaly = stats
    save_bundle(bundle, args.out or args.model)
    print(f"d_mean={stats.d_mean:.6g} d_std={stats.d_std:.6g} threshold={stats.threshold:.6g}")
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    bundle = _load_model(args.model)
    if args.pb is not None:
        bundle.current_pb = _pb_for(bundle, args.pb)
    acfg = cfg.adapt if args.seed is None else adapter.AdaptConfig(**{**asdict(cfg.adapt), "seed": args.seed})
    buf = adapter.AdaptBuffer(cfg.adapt_buffer.capacity, cfg.adapt_buffer.threshold)
    up = adapter.OnlinePBUpdater(bundle, buf, acfg, cfg.adapt_buffer.every)
    classes = bundle.pb_table.classes
    w = _CsvOut(args.out)
    w.row(["step", "status", "loss"] + [f"pb:{i}" for i in range(bundle.pb_dim)] + [f"d:{c}" for c in classes])
    fh = _input_lines(args.input)
    try:
        for _, s, u in iter_steps(fh, bundle.signals):
            r = up.push(s, u)
            w.row([r["step"], r["status"], "" if r["loss"] is None else r["loss"]] + list(r["pb"])
                  + [r["distances"][c] for c in classes])
    finally:
        if fh is not sys.stdin:
            fh.close()
        w.close()
    if args.out_model:
        save_bundle(bundle, args.out_model)
    return 0


def cmd_control(args, cfg: RunConfig) -> int:
    bundle = _load_model(args.model)
    run = cfg.control_run
    env_spec = cfg.env(args.env or run.env)
    env = envbench.Env(env_spec)
    pb = _pb_for(bundle, args.pb)
    ticks = args.ticks or run.ticks
    seed = 0 if args.seed is None else args.seed
    if bundle.structure == CTM:
        ctl = controller.CtmController(bundle, pb, run.u_init)
    else:
        spec = run.loss
        if args.loss:
            spec = controller.load_loss_spec(args.loss)
        if spec is None:
            raise ConfigError("control.loss: an STM model needs a loss spec (config or --loss)")
        ctl = controller.StmController(bundle, spec, cfg.control, pb, run.u_init)
    state = env.initial_state(np.random.default_rng(seed))
    out = controller.closed_loop(env, ctl, ticks, seed=seed, state=state)
    w = _CsvOut(args.out)
    w.row(["tick", "chosen_gamma", "loss"] + _vector_names(bundle.signals, "control", "u")
          + _vector_names(bundle.signals, "sensor", "s"))
    for t in range(ticks):
        w.row([t, out["gamma"][t], out["loss"][t]] + list(out["u"][t]) + list(out["s"][t]))
    w.close()
    if env.clamped:
        log.info("environment clamped %d out-of-bound controls", env.clamped)
    return 0


def cmd_detect(args, cfg: RunConfig | None) -> int:
    bundle = _load_model(args.model)
    if bundle.anomaly is None:
        raise ConfigError("model has no anomaly statistics; run `dpmpb calibrate` first")
    det = cfg.detect if cfg is not None else DetectBlock()
    stats = bundle.anomaly
    if args.threshold is not None:
        stats = stats.with_threshold(args.threshold)
    pb = None if args.pb is None else _pb_for(bundle, args.pb)
    window = args.window or det.window
    w = _CsvOut(args.out)
    w.row(["step", "d", "flag"])
    fh = _input_lines(args.input)
    current_ep, sd = None, None
    try:
        for step, (ep, s, u) in enumerate(iter_steps(fh, bundle.signals)):
            if ep != current_ep:
                sd = anomaly.StreamDetector(bundle, stats, pb, window)
                current_ep = ep
            r = sd.push(s, u)
            if r is not None:
                w.row([step, r.d, r.anomalous])
    finally:
        if fh is not sys.stdin:
            fh.close()
        w.close()
    return 0


def cmd_pca(args, cfg) -> int:
    bundle = _load_model(args.model)
    pts, cur = pbspace.project(bundle.pb_table, bundle.current_pb)
    w = _CsvOut(args.out)
    w.row(["class", "pc1", "pc2"])
    for name, p in zip(bundle.pb_table.names, pts):
        w.row([bundle.pb_table.class_of(name), p[0], p[1]])
    if not args.no_current:
        w.row(["<current>", cur[0, 0], cur[0, 1]])
    w.close()
    return 0


def cmd_report(args, cfg) -> int:
    from . import plotting

    threshold = None
    if args.model:
        b = _load_model(args.model)
        threshold = None if b.anomaly is None else b.anomaly.threshold
    for path in args.csv:
        print(plotting.render(path, args.out_dir, threshold))
    return 0


# entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmpb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn, needs_config=needs_config)
        if needs_config:
            sp.add_argument("--config", required=needs_config == "required", help="run configuration JSON")
        return sp

    sp = add("collect", cmd_collect, "required", "collect a dataset from the configured environments")
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=COLLECT_MODES)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("train", cmd_train, "required", "two-phase training with structure selection")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", help="model file (default: config model)")
    sp.add_argument("--report", help="JSON training report")
    sp.add_argument("--history", help="CSV of per-epoch training loss")
    sp.add_argument("--seed", type=int)

    sp = add("calibrate", cmd_calibrate, "optional", "fit anomaly statistics on normal data")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--pb", help="use this trained class's PB instead of the current one")
    sp.add_argument("--class", dest="class_name", help="calibrate on this class's episodes only")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--out", help="output model (default: overwrite --model)")

    sp = add("adapt", cmd_adapt, "required", "online PB update from a JSON Lines step stream")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", help="JSON Lines file (default: stdin)")
    sp.add_argument("--out", help="CSV trace (default: stdout)")
    sp.add_argument("--out-model", help="save the adapted model here")
    sp.add_argument("--pb", help="start from this trained class's PB")
    sp.add_argument("--seed", type=int)

    sp = add("control", cmd_control, "required", "closed-loop control of a configured environment")
    sp.add_argument("--model", required=True)
    sp.add_argument("--loss", help="loss spec JSON (overrides config)")
    sp.add_argument("--pb", help="force this trained class's PB")
    sp.add_argument("--env", help="environment class to control (default: first)")
    sp.add_argument("--ticks", type=int)
    sp.add_argument("--out", help="CSV trace (default: stdout)")
    sp.add_argument("--seed", type=int)

    sp = add("detect", cmd_detect, "optional", "score a step stream for anomalies")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", help="JSON Lines file (default: stdin)")
    sp.add_argument("--out", help="CSV (default: stdout)")
    sp.add_argument("--pb", help="use this trained class's PB")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--window", type=int, help="moving-average window over d (default 1 = off)")

    sp = add("pca", cmd_pca, False, "project the PB table to two dimensions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", help="CSV (default: stdout)")
    sp.add_argument("--no-current", action="store_true", help="omit the current PB row")

    sp = add("report", cmd_report, False, "render figures from report CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--out-dir", default="figures")
    sp.add_argument("--model", help="model whose anomaly threshold is drawn on detect plots")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else None
        return args.fn(args, cfg)
    except DPMPBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
