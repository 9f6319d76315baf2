"""Synthetic parameterized environments standing in for real robots.

Three families, each with latent parameters that define a dynamics class:

``point_mass_damped``
    1-D mass between reflecting walls, optionally tied to the origin by a
    spring. Sensors ``pos``, ``vel``; control ``force``. Latents: ``mass``,
    ``damping``, ``gain``, ``stiffness`` (0 = free mass).
``sticky_slider``
    Differential-drive base with a passive caster. Sensors ``trans`` and
    ``rot`` (velocities); control ``cmd`` (commanded translation, rotation).
    Reversing while the caster is misaligned gets stuck with probability
    ``p_stick * align * exp(-|cmd_rot| / rot_release)``; rotating misaligns
    the caster and driving forward realigns it.
``two_link_elastic``
    Two joints driven through springs. Sensor ``angle`` (2); control ``target``
    (2). Latents: ``stiffness``, ``damping``.

Environments are immutable value objects; :meth:`Env.step` takes and returns
state vectors and draws noise only from the generator it is handed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import SignalSpec
from .trainer import Episode

FAMILIES = ("point_mass_damped", "sticky_slider", "two_link_elastic")

DEFAULTS = {
    "point_mass_damped": {"mass": 1.0, "damping": 0.5, "gain": 1.0, "stiffness": 0.0,
                          "pos_limit": 2.0},
    "sticky_slider": {"tau": 0.4, "p_stick": 0.7, "rot_release": 0.3, "align_rate": 1.5,
                      "realign_rate": 2.0},
    "two_link_elastic": {"stiffness": 4.0, "damping": 2.0, "angle_limit": float(np.pi)},
}

VALID = {
    "mass": (1e-3, 1e3), "damping": (0.0, 1e3), "gain": (-1e3, 1e3), "pos_limit": (1e-3, 1e6),
    "tau": (1e-3, 1e3), "p_stick": (0.0, 1.0), "rot_release": (1e-6, 1e3),
    "align_rate": (0.0, 1e3), "realign_rate": (0.0, 1e3), "stiffness": (0.0, 1e4),
    "angle_limit": (1e-3, 1e3),
}


@dataclass(frozen=True)
class EnvSpec:
    family: str
    params: dict = field(default_factory=dict)
    noise: float = 0.0
    dt: float = 0.2
    seed: int = 0
    class_name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"env.family must be one of {FAMILIES}, got {self.family!r}")
        if not self.dt > 0:
            raise ConfigError("env.dt must be > 0")
        if self.noise < 0:
            raise ConfigError("env.noise must be >= 0")
        merged = dict(DEFAULTS[self.family])
        for key, value in self.params.items():
            if key not in merged:
                raise ConfigError(f"env.params.{key} is not a {self.family} parameter")
            lo, hi = VALID[key]
            if not lo <= float(value) <= hi:
                raise ConfigError(f"env.params.{key}={value} outside [{lo}, {hi}]")
            merged[key] = float(value)
        object.__setattr__(self, "params", merged)
        # explicit damping / spring terms: keep |1 - dt*c/m| <= 1 monotone and the spring well resolved
        if self.family in ("point_mass_damped", "two_link_elastic"):
            m = merged.get("mass", 1.0)
            if self.dt * merged["damping"] / m > 1.0:
                raise ConfigError(f"env: dt*damping/mass = {self.dt * merged['damping'] / m:.3g} > 1 "
                                  "makes the integrator unstable; lower dt or damping")
            if self.dt ** 2 * merged["stiffness"] / m > 1.0:
                raise ConfigError(f"env: dt^2*stiffness/mass = {self.dt ** 2 * merged['stiffness'] / m:.3g} > 1 "
                                  "makes the integrator unstable; lower dt or stiffness")

    @property
    def name(self) -> str:
        return self.class_name or self.family

    @classmethod
    def from_json(cls, d: dict) -> "EnvSpec":
        unknown = set(d) - {"family", "params", "noise", "dt", "seed", "class_name", "class"}
        if unknown:
            raise ConfigError(f"env: unknown keys {sorted(unknown)}")
        if "family" not in d:
            raise ConfigError("env.family is required")
        return cls(d["family"], dict(d.get("params", {})), float(d.get("noise", 0.0)),
                   float(d.get("dt", 0.2)), int(d.get("seed", 0)), d.get("class_name", d.get("class")))

    def to_json(self) -> dict:
        return {"family": self.family, "params": self.params, "noise": self.noise, "dt": self.dt,
                "seed": self.seed, "class_name": self.class_name}


def load_env(path) -> EnvSpec:
    with open(path, encoding="utf-8") as fh:
        return EnvSpec.from_json(json.load(fh))


class Env:
    """Stepper for one :class:`EnvSpec`. Counts clamped controls in ``clamped``."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.p = spec.params
        self.clamped = 0

    # layout -------------------------------------------------------------------
    @property
    def signals(self) -> list[SignalSpec]:
        f = self.spec.family
        if f == "point_mass_damped":
            return [SignalSpec("pos", "sensor", 1), SignalSpec("vel", "sensor", 1),
                    SignalSpec("force", "control", 1, ((-1.0, 1.0),))]
        if f == "sticky_slider":
            return [SignalSpec("trans", "sensor", 1), SignalSpec("rot", "sensor", 1),
                    SignalSpec("cmd", "control", 2, ((-1.0, 1.0), (-1.0, 1.0)))]
        lim = 0.5 * self.p["angle_limit"]
        return [SignalSpec("angle", "sensor", 2),
                SignalSpec("target", "control", 2, ((-lim, lim), (-lim, lim)))]

    @property
    def u_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.array([pair for s in self.signals if s.kind == "control" for pair in s.bounds])
        return b[:, 0], b[:, 1]

    def initial_state(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Rest state; with ``rng``, a random position/angle within half the walls."""
        f = self.spec.family
        if f == "point_mass_damped":
            x = 0.0 if rng is None else rng.uniform(-0.5, 0.5) * self.p["pos_limit"]
            return np.array([x, 0.0])
        if f == "sticky_slider":
            # v_trans, v_rot, caster misalignment in [0, 1]
            return np.array([0.0, 0.0, 0.0])
        q = np.zeros(2) if rng is None else rng.uniform(-0.25, 0.25, 2) * self.p["angle_limit"]
        return np.concatenate([q, np.zeros(2)])

    def observe(self, state, rng: np.random.Generator | None = None) -> np.ndarray:
        f = self.spec.family
        s = state[:2].copy()
        if self.spec.noise > 0 and rng is not None:
            s = s + rng.normal(0.0, self.spec.noise, size=s.shape)
        return s

    # dynamics -----------------------------------------------------------------
    def step(self, state, u, rng: np.random.Generator | None = None):
        """Advance one tick. Returns ``(new_state, observed_s, info)``."""
        u = np.asarray(u, dtype=np.float64)
        lo, hi = self.u_bounds
        if np.any(u < lo) or np.any(u > hi):
            self.clamped += 1
            u = np.clip(u, lo, hi)
        f = self.spec.family
        info = {}
        if f == "point_mass_damped":
            new = self._point_mass(state, u)
        elif f == "sticky_slider":
            new, info["stuck"] = self._slider(state, u, rng)
        else:
            new = self._two_link(state, u)
        return new, self.observe(new, rng), info

    def _point_mass(self, state, u):
        p, dt = self.p, self.spec.dt
        x, v = state
        v = v + dt * (p["gain"] * u[0] - p["stiffness"] * x - p["damping"] * v) / p["mass"]
        x = x + dt * v
        lim = p["pos_limit"]
        if x > lim:
            x, v = 2 * lim - x, -v
        elif x < -lim:
            x, v = -2 * lim - x, -v
        return np.array([min(max(x, -lim), lim), v])

    def stick_probability(self, state, u) -> float:
        if u[0] >= 0:
            return 0.0
        return self.p["p_stick"] * state[2] * float(np.exp(-abs(u[1]) / self.p["rot_release"]))

    def _slider(self, state, u, rng):
        p, dt = self.p, self.spec.dt
        v, align = state[:2], state[2]
        alpha = min(1.0, dt / p["tau"])
        new_v = v + alpha * (u - v)
        stuck = False
        prob = self.stick_probability(state, u)
        if prob > 0:
            draw = rng.random() if rng is not None else 1.0
            if draw < prob:
                new_v[0] = 0.0
                stuck = True
        align = align + dt * p["align_rate"] * abs(new_v[1]) * (1.0 - align)
        align = align - dt * p["realign_rate"] * max(new_v[0], 0.0) * align
        return np.array([new_v[0], new_v[1], float(np.clip(align, 0.0, 1.0))]), stuck

    def _two_link(self, state, u):
        p, dt = self.p, self.spec.dt
        q, qd = state[:2], state[2:]
        qd = qd + dt * (p["stiffness"] * (u - q) - p["damping"] * qd)
        q = q + dt * qd
        lim = p["angle_limit"]
        over = np.abs(q) > lim
        q = np.where(q > lim, 2 * lim - q, np.where(q < -lim, -2 * lim - q, q))
        q = np.clip(q, -lim, lim)
        qd = np.where(over, -qd, qd)
        return np.concatenate([q, qd])

    # data collection ----------------------------------------------------------
    def rollout(self, controls, state=None, rng=None):
        """Apply a control sequence open loop; returns the Episode of (s, u)."""
        state = self.initial_state() if state is None else state
        s = self.observe(state, rng)
        S, U = [], []
        for u in controls:
            S.append(s)
            U.append(np.asarray(u, dtype=np.float64))
            state, s, _ = self.step(state, u, rng)
        return Episode(self.spec.name, np.array(S), np.array(U))


def collect_random(env: Env, n_steps: int, u_bounds=None, hold_steps: int = 5, seed: int = 0) -> Episode:
    """Piecewise-constant uniform random controls held for ``hold_steps`` ticks."""
    if n_steps < 2:
        raise ConfigError("n_steps must be >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = env.u_bounds if u_bounds is None else (np.asarray(u_bounds[0]), np.asarray(u_bounds[1]))
    state = env.initial_state(rng)
    s = env.observe(state, rng)
    S, U = [], []
    u = None
    for t in range(n_steps):
        if t % max(1, hold_steps) == 0:
            u = rng.uniform(lo, hi)
        S.append(s)
        U.append(u)
        state, s, _ = env.step(state, u, rng)
    return Episode(env.spec.name, np.array(S), np.array(U))


def collect_switch(env_before: Env, env_after: Env, n_before: int, n_after: int,
                   hold_steps: int = 5, seed: int = 0) -> Episode:
    """Random-control episode whose dynamics switch after ``n_before`` steps.

    Both environments must share the signal layout; the physical state carries
    over. The episode is labelled with the first environment's class.
    """
    if [s.to_json() for s in env_before.signals] != [s.to_json() for s in env_after.signals]:
        raise ConfigError("switch environments must share the signal layout")
    if n_before < 1 or n_after < 1:
        raise ConfigError("n_before and n_after must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = env_before.u_bounds
    state = env_before.initial_state(rng)
    s = env_before.observe(state, rng)
    S, U = [], []
    u = None
    for t in range(n_before + n_after):
        if t % max(1, hold_steps) == 0:
            u = rng.uniform(lo, hi)
        S.append(s)
        U.append(u)
        env = env_before if t < n_before else env_after
        state, s, _ = env.step(state, u, rng)
    return Episode(env_before.spec.name, np.array(S), np.array(U))


def collect_teacher(env: Env, policy, n_steps: int, seed: int = 0) -> Episode:
    """Closed-loop rollout of a policy ``(s, u_prev) -> u`` from a seeded initial state.

    ``u_prev`` starts at zero.
    """
    if n_steps < 2:
        raise ConfigError("n_steps must be >= 2")
    rng = np.random.default_rng(seed)
    state = env.initial_state(rng)
    s = env.observe(state, rng)
    S, U = [], []
    lo, hi = env.u_bounds
    u = np.zeros_like(lo)
    for _ in range(n_steps):
        u = np.clip(np.asarray(policy(s, u), dtype=np.float64), lo, hi)
        S.append(s)
        U.append(u)
        state, s, _ = env.step(state, u, rng)
    return Episode(env.spec.name, np.array(S), np.array(U))


@dataclass(frozen=True)
class ReachPolicy:
    """PD reach toward ``target`` on the point mass: ``u = kp*(target - x) - kd*v``."""

    target: float = 1.0
    kp: float = 1.0
    kd: float = 1.0

    def __call__(self, s, u_prev=None):
        return np.array([self.kp * (self.target - s[0]) - self.kd * s[1]])


@dataclass(frozen=True)
class SmoothReachPolicy:
    """PD reach whose command moves toward the PD value by ``rate`` per tick.

    ``rate`` sets how fast the motion unfolds and cannot be read off a single
    step, which makes it a natural "style" latent.
    """

    target: float = 1.0
    kp: float = 1.0
    kd: float = 1.0
    rate: float = 0.3

    def __call__(self, s, u_prev):
        pd = self.kp * (self.target - s[0]) - self.kd * s[1]
        return np.asarray(u_prev, dtype=np.float64) + self.rate * (pd - np.asarray(u_prev))


@dataclass(frozen=True)
class JointReachPolicy:
    """Move both joints of ``two_link_elastic`` toward ``target`` at rate ``kp``."""

    target: tuple = (0.5, -0.5)
    kp: float = 0.5

    def __call__(self, s, u_prev=None):
        return s[:2] + self.kp * (np.asarray(self.target) - s[:2])


def make_policy(d: dict):
    kind = d.get("kind", "reach")
    args = {k: v for k, v in d.items() if k != "kind"}
    if kind == "reach":
        return ReachPolicy(**args)
    if kind == "smooth_reach":
        return SmoothReachPolicy(**args)
    if kind == "joint_reach":
        if "target" in args:
            args["target"] = tuple(args["target"])
        return JointReachPolicy(**args)
    raise ConfigError(f"policy.kind {kind!r} unknown (reach, smooth_reach, joint_reach)")
