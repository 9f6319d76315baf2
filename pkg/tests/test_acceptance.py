"""The ten primary acceptance criteria, each at its stated tolerance.

Each test prints one ``[PASS]``/``[FAIL] criterion N`` line (also collected in
the terminal summary).
"""

from __future__ import annotations

import csv
import io
import itertools
import time

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import spearmanr

from dpmpb import netcore
from dpmpb.adapter import (AdaptBuffer, AdaptConfig, OnlinePBUpdater, predicted_control_speed,
                           update_pb_style)
from dpmpb.anomaly import calibrate, prediction_errors, score
from dpmpb.cli import main
from dpmpb.controller import (ControlConfig, LinearDynamics, LossSpec, LossTerm, StmController,
                             closed_loop, eval_loss, normalize_spec, normalized_bounds, stm_optimize)
from dpmpb.envbench import Env, collect_random, collect_switch
from dpmpb.model import CTM, STM, forward_sequence, load_bundle, predict, save_bundle, select_structure, sequence_io

import fixture_data as fx
from fixture_data import A, B, verdict


# 1 -------------------------------------------------------------------------------

def _fd_check(rng):
    H = int(rng.integers(2, 9))
    T = int(rng.integers(1, 7))
    Bn = int(rng.integers(1, 3))
    variance = bool(rng.integers(2))
    din, dt = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    shape = netcore.NetworkShape(din, 2 * dt if variance else dt, H, variance)
    params = netcore.init_params(shape, seed=int(rng.integers(1 << 30)))
    params = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in params.items()}
    xs = rng.standard_normal((T, Bn, din))
    ts = rng.standard_normal((T, Bn, dt))
    kind = "nll" if variance else "mse"
    _, gp, gx = netcore.bptt(params, xs, ts, kind, variance_mode=variance)

    def f(p, x):
        return netcore.bptt(p, x, ts, kind, variance_mode=variance)[0]

    h = 1e-5  # central-difference error ~h^2, rounding ~1e-16/h
    worst = 0.0
    for key, val in params.items():
        for idx in np.ndindex(val.shape):
            p_hi = dict(params)
            p_lo = dict(params)
            p_hi[key] = val.copy()
            p_lo[key] = val.copy()
            p_hi[key][idx] += h
            p_lo[key][idx] -= h
            num = (f(p_hi, xs) - f(p_lo, xs)) / (2 * h)
            worst = max(worst, _rel(gp[key][idx], num))
    for idx in np.ndindex(xs.shape):
        x_hi, x_lo = xs.copy(), xs.copy()
        x_hi[idx] += h
        x_lo[idx] -= h
        num = (f(params, x_hi) - f(params, x_lo)) / (2 * h)
        worst = max(worst, _rel(gx[idx], num))
    return worst


def _rel(a, n):
    # the floor keeps rounding noise on near-zero entries from dominating
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def test_c1_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = max(_fd_check(rng) for _ in range(20))
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-4 and dt < 30,
            f"worst relative error over 20 instances {worst:.2e} (<= 1e-4), {dt:.1f}s (< 30s)")


# 2 -------------------------------------------------------------------------------

def test_c2_structure_auto_selection():
    t0 = time.perf_counter()
    rnd, tea = fx.structure_results()
    phase1_rnd = rnd.bundle.training_losses["phase1"]["L_n"]
    structure, dropped = select_structure(
        {"s1": 0.093, "s2": 0.184, "s3": 0.212, "s4": 0.036, "u": 0.468}, 0.3,
        [fx.SignalSpec("s1", "sensor", 1), fx.SignalSpec("s2", "sensor", 1), fx.SignalSpec("s3", "sensor", 1),
         fx.SignalSpec("s4", "sensor", 1), fx.SignalSpec("u", "control", 1)])
    dt = time.perf_counter() - t0
    ok = (rnd.bundle.structure == STM and phase1_rnd["force"] >= 0.3 and tea.bundle.structure == CTM
          and structure == STM and dropped == ["u"] and dt < 300)
    verdict(2, ok, f"random -> {rnd.bundle.structure} (L_force={phase1_rnd['force']:.3f} >= 0.3), "
                   f"teacher -> {tea.bundle.structure}, reference losses -> {structure} dropping {dropped}, "
                   f"{dt:.1f}s")


# 3 -------------------------------------------------------------------------------

def _pca_rows(bundle, tmp_path):
    path = tmp_path / "model.json"
    save_bundle(bundle, path)
    out = tmp_path / "pca.csv"
    assert main(["pca", "--model", str(path), "--out", str(out), "--no-current"]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    return [r["class"] for r in rows], np.array([[float(r["pc1"]), float(r["pc2"])] for r in rows])


def _linearly_separable(P, Q):
    """Exact LP feasibility of w.x + b >= 1 on P and <= -1 on Q."""
    X = np.vstack([P, Q])
    y = np.r_[np.ones(len(P)), -np.ones(len(Q))]
    A_ub = -y[:, None] * np.c_[X, np.ones(len(X))]
    res = linprog(np.zeros(X.shape[1] + 1), A_ub=A_ub, b_ub=-np.ones(len(X)),
                  bounds=[(None, None)] * (X.shape[1] + 1), method="highs")
    return res.status == 0


def _separation_report(labels, pts):
    classes = list(dict.fromkeys(labels))
    groups = {c: pts[[l == c for l in labels]] for c in classes}
    cent = {c: g.mean(axis=0) for c, g in groups.items()}
    spread = float(np.mean([np.linalg.norm(p - cent[l]) for l, p in zip(labels, pts)]))
    between = min(np.linalg.norm(cent[a] - cent[b]) for a, b in itertools.combinations(classes, 2))
    separable = all(_linearly_separable(groups[a], groups[b]) for a, b in itertools.combinations(classes, 2))
    return between, spread, separable


@pytest.mark.parametrize("which", ["two_class", "grid"])
def test_c3_pb_self_organization(which, tmp_path):
    t0 = time.perf_counter()
    bundle = fx.two_class_bundle() if which == "two_class" else fx.grid_bundle()
    labels, pts = _pca_rows(bundle, tmp_path)
    between, spread, separable = _separation_report(labels, pts)
    dt = time.perf_counter() - t0
    verdict(3, separable and between > 3 * spread and dt < 300,
            f"{which}: {len(set(labels))} classes, pairwise linearly separable={separable}, "
            f"centroid distance {between:.3f} > 3 x spread {spread:.3f} (ratio {between / spread:.1f}), {dt:.1f}s")


# 4 -------------------------------------------------------------------------------

def test_c4_online_adaptation():
    t0 = time.perf_counter()
    base = fx.two_class_bundle()
    cent = base.pb_table.centroids()
    ok = 0
    for seed in range(10):
        correct, wrong = ("A", "B") if seed % 2 == 0 else ("B", "A")
        ep = collect_random(Env(A if correct == "A" else B), 300, hold_steps=2, seed=5000 + seed)
        bundle = fx.fresh(base)
        bundle.current_pb = cent[wrong].copy()
        up = OnlinePBUpdater(bundle, AdaptBuffer(300, 30),
                             AdaptConfig(n_batch=4, n_epoch=1, lr=0.1, window=20, seed=seed))
        for s, u in zip(ep.s, ep.u):  # 300 pushes, at most 271 updates
            r = up.push(s, u)
        ok += r["distances"][correct] < r["distances"][wrong]
    dt = time.perf_counter() - t0
    verdict(4, ok >= 8 and dt < 600, f"nearer the correct centroid in {ok}/10 seeds (>= 8), {dt:.1f}s")


# 5 -------------------------------------------------------------------------------

def test_c5_control_correctness():
    t0 = time.perf_counter()
    stm, _, _ = fx.tiny_bundles()
    rng = np.random.default_rng(7)
    cfg = ControlConfig(horizon=1, n_batch=4, n_epoch=100, gamma_max=1.0)
    lo, hi = normalized_bounds(stm)
    grid = np.linspace(lo[0], hi[0], 200001)[:, None, None]
    worst, monotone = 0.0, 0
    n_runs = 40
    for _ in range(n_runs):
        A_ = np.eye(2) + 0.3 * rng.standard_normal((2, 2))
        B_ = rng.uniform(0.5, 1.5, (2, 1)) * rng.choice([-1, 1], (2, 1))
        s0 = rng.standard_normal(2)
        target = float(rng.uniform(-2, 2))
        spec = LossSpec([LossTerm("track", "pos", target=target),
                         LossTerm("control", weight=float(rng.uniform(0, 0.5)))])
        dyn = LinearDynamics(A_, B_, s0, {"pos": slice(0, 1), "vel": slice(1, 2)}, {"force": slice(0, 1)})
        u_prev = stm.scale("control").denormalize(rng.uniform(lo, hi, (1, 1)))
        res = stm_optimize(stm, np.zeros(2), None, u_prev, spec, cfg, dynamics=dyn)
        # oracle: dense grid over the admissible normalized control
        nspec = normalize_spec(stm, spec)
        mean, _ = dyn.predict(grid)
        losses = eval_loss(nspec, {"pos": mean[..., 0:1], "vel": mean[..., 1:2]}, None, {"force": grid})
        u_star = grid[int(np.argmin(losses)), 0, 0]
        worst = max(worst, abs(res.u_norm_seq[0, 0] - u_star))
        monotone += all(b <= a for a, b in zip(res.loss_trace, res.loss_trace[1:]))
    dt = time.perf_counter() - t0
    verdict(5, worst <= 1e-3 and monotone == n_runs and dt < 60,
            f"max |u - u_grid| {worst:.2e} (<= 1e-3) over {n_runs} problems, "
            f"non-increasing traces {monotone}/{n_runs}, {dt:.1f}s")


# 6 -------------------------------------------------------------------------------

def test_c6_correct_vs_wrong_pb():
    t0 = time.perf_counter()
    bundle = fx.two_class_bundle()
    cent = bundle.pb_table.centroids()
    cfg = ControlConfig(horizon=8, n_batch=4, n_epoch=3, gamma_max=1.0)
    spec = LossSpec([LossTerm("track", "pos", target=0.8)])
    parts, ok = [], True
    for cls, spec_env in (("A", A), ("B", B)):
        err = {"correct": [], "wrong": []}
        for seed in range(10):
            for label, pb_name in (("correct", cls), ("wrong", "B" if cls == "A" else "A")):
                env = Env(spec_env)
                ctl = StmController(bundle, spec, cfg, pb=cent[pb_name])
                out = closed_loop(env, ctl, 40, seed=seed, state=env.initial_state(np.random.default_rng(seed)))
                err[label].append(float(np.mean(np.abs(out["s"][1:, 0] - 0.8))))
        mc, mw = np.median(err["correct"]), np.median(err["wrong"])
        ok &= mc < mw
        parts.append(f"env {cls}: median error correct {mc:.3f} < wrong {mw:.3f}")
    dt = time.perf_counter() - t0
    verdict(6, ok and dt < 600, "; ".join(parts) + f", {dt:.1f}s")


# 7 -------------------------------------------------------------------------------

def _slider_trial(bundle, w1, seed):
    """Rotate for 10 ticks, then drive the translation backwards for 20 controller ticks."""
    env = Env(fx.SLIDER)
    rng = np.random.default_rng(seed)
    state = env.initial_state()
    s = env.observe(state)
    terms = [LossTerm("track", "trans", target=-0.5)]
    if w1 > 0:
        terms.append(LossTerm("variance", "trans", weight=w1))
    ctl = StmController(bundle, LossSpec(terms), ControlConfig(horizon=8, n_batch=4, n_epoch=3, gamma_max=1.0))
    for _ in range(10):
        ctl.observe(s, [0.0, 0.8])
        state, s, _ = env.step(state, [0.0, 0.8], rng)
    ctl.u_seq[:] = 0.0  # the reverse phase starts from a neutral plan
    stuck = []
    for _ in range(20):
        u, _ = ctl.step(s)
        state, s, info = env.step(state, u, rng)
        stuck.append(info["stuck"])
    return np.mean(stuck) >= 0.25


def test_c7_variance_modeling_and_use():
    t0 = time.perf_counter()
    hb = fx.hetero_bundle()
    ep, sd = fx.hetero_episode(99)
    xs, _ = sequence_io(hb, ep.s, ep.u)
    ys, _ = forward_sequence(hb.params, xs)
    _, var = netcore.split_variance(ys)
    v_hat = var[:, 0] * hb.norm_stats["s"].std[0] ** 2
    rho = spearmanr(v_hat, sd[1:] ** 2).statistic

    sb = fx.slider_bundle()
    stuck0 = sum(_slider_trial(sb, 0.0, seed) for seed in range(12))
    stuck3 = sum(_slider_trial(sb, 0.3, seed) for seed in range(12))
    dt = time.perf_counter() - t0
    verdict(7, rho > 0.8 and stuck3 < stuck0 and dt < 900,
            f"Spearman rho {rho:.3f} (> 0.8); stuck trials w1=0.3: {stuck3}/12 < w1=0: {stuck0}/12, {dt:.1f}s")


# 8 -------------------------------------------------------------------------------

def test_c8_anomaly_detection():
    t0 = time.perf_counter()
    bundle = fx.two_class_bundle()
    pb = bundle.pb_table.centroids()["A"]
    cal = [collect_random(Env(A), 300, hold_steps=8, seed=7000 + i) for i in range(4)]
    stats = calibrate(bundle, cal, pb=pb)
    flags, total, latency = 0, 0, []
    for seed in range(10):
        ep = collect_random(Env(A), 300, hold_steps=8, seed=8000 + seed)
        d = score(stats, prediction_errors(bundle, ep, pb=pb))
        flags += int(np.sum(d > stats.threshold))
        total += len(d)
        ep = collect_switch(Env(A), Env(B), 150, 100, hold_steps=8, seed=9000 + seed)
        d = score(stats, prediction_errors(bundle, ep, pb=pb))
        # error i predicts step i + 1; steps after index 150 follow the new dynamics
        hits = np.nonzero(d[150:] > stats.threshold)[0]
        latency.append(int(hits[0]) if len(hits) else 10**6)
    fpr = flags / total
    med = float(np.median(latency))
    dt = time.perf_counter() - t0
    verdict(8, fpr <= 0.05 and med <= 20 and dt < 300,
            f"held-out false-positive rate {fpr:.3%} (<= 5%), median switch latency {med:.0f} steps "
            f"(<= 20), {dt:.1f}s")


# 9 -------------------------------------------------------------------------------

def test_c9_style_shaping():
    t0 = time.perf_counter()
    base = fx.style_bundle()
    cent = base.pb_table.centroids()
    ratios = []
    for seed in range(8):
        ep = fx.style_episode("slow", 30, 900 + seed)
        bundle = fx.fresh(base)
        bundle.current_pb = cent["slow"].copy()
        before = predicted_control_speed(bundle, ep.s, ep.u, bundle.current_pb)
        buf = AdaptBuffer(300, 2)
        for s, u in zip(ep.s, ep.u):
            buf.push(s, u)
        update_pb_style(bundle, buf, AdaptConfig(n_epoch=20, lr=0.002, objective="style", w1=-3.0,
                                                 max_grad_norm=1.0))
        after = predicted_control_speed(bundle, ep.s, ep.u, bundle.current_pb)
        ratios.append(after / before)
    dt = time.perf_counter() - t0
    ok = base.structure == CTM and all(r > 1.0 for r in ratios) and dt < 300
    verdict(9, ok, f"{base.structure} teacher model; predicted |du| after/before per seed "
                   f"{np.round(ratios, 3).tolist()} (all > 1), {dt:.1f}s")


# 10 ------------------------------------------------------------------------------

CLI_CONFIG = {
    "envs": [{"family": "point_mass_damped", "class": "A", "params": {"gain": 1.0, "stiffness": 1.0}},
             {"family": "point_mass_damped", "class": "B", "params": {"gain": 2.5, "stiffness": 1.0}}],
    "pb_dim": 2, "hidden": 8,
    "collect": {"mode": "random", "episodes": 2, "steps": 150, "hold_steps": 2,
                "switch": {"before": "A", "after": "B", "at": 75}},
    "train": {"n_step": 10, "n_batch": 8, "n_epoch": 30, "lr": 0.003},
    "adapt": {"threshold": 10, "n_epoch": 1},
    "control": {"horizon": 4, "ticks": 10, "n_epoch": 2,
                "loss": {"terms": [{"kind": "track", "signal": "pos", "target": [0.8]}]}},
}


def _pipeline(d):
    import json

    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(CLI_CONFIG))
    c, m = str(cfg), str(d / "model.json")
    cmds = [
        ["collect", "--config", c, "--out", str(d / "data.jsonl"), "--seed", "3"],
        ["train", "--config", c, "--data", str(d / "data.jsonl"), "--out", m, "--report", str(d / "rep.json"),
         "--history", str(d / "hist.csv"), "--seed", "1"],
        ["calibrate", "--config", c, "--model", m, "--data", str(d / "data.jsonl")],
        ["collect", "--config", c, "--mode", "switch", "--episodes", "1", "--out", str(d / "sw.jsonl"),
         "--seed", "4"],
        ["adapt", "--config", c, "--model", m, "--input", str(d / "sw.jsonl"), "--out", str(d / "adapt.csv"),
         "--pb", "A", "--seed", "2"],
        ["control", "--config", c, "--model", m, "--pb", "B", "--env", "B", "--out", str(d / "ctl.csv"),
         "--seed", "5"],
        ["detect", "--config", c, "--model", m, "--input", str(d / "sw.jsonl"), "--out", str(d / "det.csv")],
        ["pca", "--model", m, "--out", str(d / "pca.csv")],
    ]
    for cmd in cmds:
        assert main(cmd) == 0, cmd
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_c10_determinism_and_persistence(tmp_path, capsys):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    first.pop("cfg.json"), second.pop("cfg.json")
    same_files = first == second
    capsys.readouterr()

    bitwise = True
    for bundle in fx.tiny_bundles():
        path = tmp_path / f"rt_{bundle.structure}_{bundle.shape.variance_mode}.json"
        save_bundle(bundle, path)
        loaded = load_bundle(path)
        rng = np.random.default_rng(0)
        st0 = st1 = None
        for _ in range(5):
            s = rng.standard_normal(bundle.sensor_dim)
            u = rng.standard_normal(bundle.control_dim)
            p0, st0 = predict(bundle, s, u, state=st0)
            p1, st1 = predict(loaded, s, u, state=st1)
            bitwise &= all(np.array_equal(p0.signals[k], p1.signals[k]) for k in p0.signals)
            bitwise &= np.array_equal(st0.h, st1.h) and np.array_equal(st0.c, st1.c)
    dt = time.perf_counter() - t0
    verdict(10, same_files and bitwise and dt < 60,
            f"{len(first)} CLI artifacts byte-identical on rerun={same_files}, "
            f"save/load predictions bitwise equal={bitwise}, {dt:.1f}s")
