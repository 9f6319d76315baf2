"""Shared, cached fixture builders for the slower end-to-end tests.

Builders return cached objects; callers that mutate a bundle must copy it first.
"""

from __future__ import annotations

import copy
import functools

import numpy as np

from dpmpb.envbench import Env, EnvSpec, SmoothReachPolicy, collect_random, collect_teacher
from dpmpb.model import SignalSpec
from dpmpb.trainer import Dataset, Episode, TrainConfig, auto_fit, fit

# Two point-mass classes differing only in actuator gain; the spring makes the
# gain observable from position alone.
A = EnvSpec("point_mass_damped", {"gain": 1.0, "stiffness": 1.0, "damping": 1.0}, class_name="A")
B = EnvSpec("point_mass_damped", {"gain": 2.5, "stiffness": 1.0, "damping": 1.0}, class_name="B")
GRID = [EnvSpec("point_mass_damped", {"gain": g, "stiffness": k, "damping": 1.0}, class_name=f"g{g}_k{k}")
        for g in (1.0, 2.5) for k in (1.0, 3.0)]
SLIDER = EnvSpec("sticky_slider", {}, class_name="slider")
STYLE_ENV = EnvSpec("point_mass_damped", {})
STYLE_RATES = {"slow": 0.1, "fast": 0.5}

RESULTS: list[str] = []


def fresh(bundle):
    return copy.deepcopy(bundle)


def random_dataset(specs, episodes, steps, hold, seed_stride=100):
    return Dataset([collect_random(Env(sp), steps, hold_steps=hold, seed=seed_stride * k + i)
                    for k, sp in enumerate(specs) for i in range(episodes)])


@functools.lru_cache(maxsize=None)
def two_class_bundle():
    """STM on classes A/B, one PB per episode (8 entries)."""
    ds = random_dataset([A, B], 4, 300, 8)
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=800, seed=0, lr=3e-3, pb_per="episode")
    return fit(ds, Env(A).signals, cfg, hidden=16, pb_dim=2, dropped=["force"]).bundle


@functools.lru_cache(maxsize=None)
def grid_bundle():
    """STM on the 2x2 gain/stiffness grid, one PB per episode (16 entries)."""
    ds = random_dataset(GRID, 4, 300, 8)
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=400, seed=0, lr=3e-3, pb_per="episode")
    return fit(ds, Env(GRID[0]).signals, cfg, hidden=16, pb_dim=2, dropped=["force"]).bundle


@functools.lru_cache(maxsize=None)
def structure_results():
    """auto_fit on random-control data (fast switching) and on teacher data."""
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=150, seed=0, lr=3e-3)
    rnd = auto_fit(random_dataset([A, B], 2, 300, 2), Env(A).signals, cfg, hidden=16, pb_dim=2)
    teach = Dataset([collect_teacher(Env(sp), SmoothReachPolicy(rate=0.3), 60, seed=100 * k + i)
                     for k, sp in enumerate([A, B]) for i in range(4)])
    tea = auto_fit(teach, Env(A).signals, cfg, hidden=16, pb_dim=2)
    return rnd, tea


HETERO_SIGNALS = [SignalSpec("s", "sensor", 1), SignalSpec("u", "control", 1, ((-1.0, 1.0),))]


def hetero_episode(seed, T=300):
    """s' = 0.8 s + 0.3 u + sigma(u) * noise with sigma = 0.02 + 0.2 |u|; returns (episode, sigma)."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, T)
    s = np.zeros(T)
    sd = np.zeros(T)
    for t in range(T - 1):
        sd[t + 1] = 0.02 + 0.2 * abs(u[t])
        s[t + 1] = 0.8 * s[t] + 0.3 * u[t] + sd[t + 1] * rng.normal()
    return Episode("h", s[:, None], u[:, None]), sd


@functools.lru_cache(maxsize=None)
def hetero_bundle():
    ds = Dataset([hetero_episode(i)[0] for i in range(6)])
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=200, seed=0, lr=3e-3, loss_kind="nll")
    return fit(ds, HETERO_SIGNALS, cfg, hidden=16, pb_dim=1, dropped=["u"]).bundle


@functools.lru_cache(maxsize=None)
def slider_bundle():
    ds = Dataset([collect_random(Env(SLIDER), 300, hold_steps=5, seed=i) for i in range(8)])
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=600, seed=0, lr=3e-3, loss_kind="nll")
    return fit(ds, Env(SLIDER).signals, cfg, hidden=32, pb_dim=2, dropped=["cmd"]).bundle


def style_episode(cls, steps, seed):
    ep = collect_teacher(Env(STYLE_ENV), SmoothReachPolicy(1.0, 1.0, 1.0, STYLE_RATES[cls]), steps, seed=seed)
    ep.class_name = cls
    return ep


@functools.lru_cache(maxsize=None)
def style_bundle():
    """CTM trained on slow and fast smooth-reach teachers (20 short episodes each)."""
    eps = [style_episode(cls, 30, 100 * k + i) for k, cls in enumerate(STYLE_RATES) for i in range(20)]
    cfg = TrainConfig(n_step=20, n_batch=16, n_epoch=1000, seed=0, lr=3e-3)
    return auto_fit(Dataset(eps), Env(STYLE_ENV).signals, cfg, hidden=24, pb_dim=2).bundle


@functools.lru_cache(maxsize=None)
def tiny_bundles():
    """Quickly trained STM, CTM and variance-mode STM bundles for unit tests (not accurate)."""
    cfg = TrainConfig(n_step=10, n_batch=8, n_epoch=5, seed=0, lr=3e-3)
    ds = random_dataset([A, B], 2, 60, 4)
    sig = Env(A).signals
    stm = fit(ds, sig, cfg, hidden=8, pb_dim=2, dropped=["force"]).bundle
    ctm = fit(ds, sig, cfg, hidden=8, pb_dim=2).bundle
    nll = TrainConfig(n_step=10, n_batch=8, n_epoch=5, seed=0, lr=3e-3, loss_kind="nll")
    var = fit(ds, sig, nll, hidden=8, pb_dim=2, dropped=["force"]).bundle
    return stm, ctm, var


def verdict(n: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line
