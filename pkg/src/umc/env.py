"""Deterministic planar legged "compensation" environment.

N torque-driven single-DOF joints: ``n_legs`` legs of ``joints_per_leg``
joints each, followed by ``n_balance_joints`` balance joints.  Legs make
forward thrust, thrust imbalance tilts the body, balance torque pushes the
tilt back, and a tilt beyond ``phi_max`` is a fall.  All state is batched
along a leading env axis; a single env is a batch of one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .damage import DamageArrays, DamageLimits, DamageSpec, constrain_arrays, clamp_rom, corrupt_arrays


@dataclass(frozen=True)
class EnvConfig:
    n_legs: int = 2
    joints_per_leg: int = 2
    n_balance_joints: int = 2
    dt: float = 0.02
    damping: float = 0.5
    inertia: float = 1.0
    tau_max: float = 10.0
    v_cmd: float = 1.0
    v_max: float = 2.0
    tilt_gain: float = 1.0
    balance_gain: float = 0.5
    tilt_damping: float = 1.0
    tilt_leak: float = 1.0
    phi_max: float = 0.5
    w_v: float = 1.0
    w_e: float = 0.001
    w_t: float = 0.5
    w_alive: float = 0.1
    episode_length: int = 1000
    # normal range of motion (a hard stop for every joint) and nominal speed;
    # damage limits are fractions of these
    joint_range: tuple[float, float] = (-1.6, 1.6)
    joint_speed_scale: float = 5.0
    init_q_range: float = 0.1

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_legs < 1 or self.joints_per_leg < 1 or self.n_balance_joints < 0:
            raise ValueError("invalid joint layout")

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        d = dict(d)
        if "joint_range" in d:
            d["joint_range"] = tuple(d["joint_range"])
        return cls(**d)

    @property
    def n_joints(self) -> int:
        return self.n_legs * self.joints_per_leg + self.n_balance_joints

    @property
    def n_leg_joints(self) -> int:
        return self.n_legs * self.joints_per_leg

    def damage_limits(self, fraction: float = 0.3, rom_fraction: float = 0.3) -> DamageLimits:
        return DamageLimits(
            torque_limit=fraction * self.tau_max,
            velocity_limit=fraction * self.joint_speed_scale,
            rom_fraction=rom_fraction,
            rom_range=tuple(self.joint_range),
        )


@dataclass
class EnvState:
    q: np.ndarray
    qd: np.ndarray
    prev_action: np.ndarray
    phi: np.ndarray
    phid: np.ndarray
    x: np.ndarray
    step: np.ndarray
    fallen: np.ndarray
    damage_active: np.ndarray
    x_onset: np.ndarray  # NaN until the damage has started

    def __len__(self) -> int:
        return self.q.shape[0]

    def __getitem__(self, idx) -> "EnvState":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return EnvState(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    @staticmethod
    def stack(states: Sequence["EnvState"]) -> "EnvState":
        return EnvState(**{f.name: np.concatenate([getattr(s, f.name) for s in states]) for f in fields(EnvState)})

    def copy(self) -> "EnvState":
        return self[:]

    def set_rows(self, idx, other: "EnvState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def equals(self, other: "EnvState") -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name), equal_nan=True)
                   for f in fields(self))


@dataclass
class StepResult:
    obs_true: np.ndarray
    obs: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    fallen: np.ndarray
    tau_applied: np.ndarray
    displacement: np.ndarray  # since onset, NaN before it

    def __getitem__(self, idx) -> "StepResult":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return StepResult(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


def observe(state: EnvState) -> np.ndarray:
    """True per-joint observation ``(q, qd, previous torque command)``, shape ``(B, N, 3)``."""
    return np.stack([state.q, state.qd, state.prev_action], axis=-1)


def reset(seeds, cfg: EnvConfig, onset=None) -> tuple[EnvState, np.ndarray]:
    """Fresh state(s): q uniform in +-init_q_range, everything else at rest.

    ``seeds`` is an int or a sequence of ints (one env per seed).  ``onset``
    gives the damage onset step per env (default: never).
    """
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    B, N = len(seeds), cfg.n_joints
    q = np.empty((B, N))
    for b, s in enumerate(seeds):
        q[b] = np.random.default_rng(int(s)).uniform(-cfg.init_q_range, cfg.init_q_range, size=N)
    onset = np.full(B, np.iinfo(np.int64).max) if onset is None else np.broadcast_to(np.asarray(onset), (B,))
    active = onset <= 0
    state = EnvState(
        q=q,
        qd=np.zeros((B, N)),
        prev_action=np.zeros((B, N)),
        phi=np.zeros(B),
        phid=np.zeros(B),
        x=np.zeros(B),
        step=np.zeros(B, dtype=np.int64),
        fallen=np.zeros(B, dtype=bool),
        damage_active=active.copy(),
        x_onset=np.where(active, 0.0, np.nan),
    )
    return state, observe(state)


def leg_thrust(q, qd, cfg: EnvConfig) -> np.ndarray:
    """Per-leg thrust ``max(0, sum_i sin(q_i) qd_i)``, shape ``(B, n_legs)``."""
    nl = cfg.n_leg_joints
    s = (np.sin(q[:, :nl]) * qd[:, :nl]).reshape(-1, cfg.n_legs, cfg.joints_per_leg).sum(axis=-1)
    return np.maximum(s, 0.0)


def step(state: EnvState, tau_cmd, dmg: DamageArrays, cfg: EnvConfig, mask_value: float = 0.0):
    """Advance every env by one control step.  Pure: ``state`` is not modified.

    Returns ``(next_state, StepResult)``.
    """
    if np.any(state.fallen) or np.any(state.step >= cfg.episode_length):
        raise RuntimeError("step called on a terminal state")
    B, N = state.q.shape
    tau_cmd = np.clip(np.asarray(tau_cmd, dtype=np.float64).reshape(B, N), -cfg.tau_max, cfg.tau_max)
    active = state.step >= dmg.onset
    tau, q, qd = constrain_arrays(tau_cmd, state.q, state.qd, dmg, active)

    qdd = (tau - cfg.damping * qd) / cfg.inertia
    nl = cfg.n_leg_joints
    if cfg.n_balance_joints:
        qdd[:, nl:] += cfg.tilt_leak * state.phi[:, None]
    qd = qd + qdd * cfg.dt
    act = active[:, None]
    vl = np.where(act, dmg.velocity_limit, np.inf)
    qd = np.clip(qd, -vl, vl)
    q = q + qd * cfg.dt
    # a damaged ROM window narrows the joint's normal range; both are hard stops
    lo = np.maximum(np.where(act, dmg.rom_lo, -np.inf), cfg.joint_range[0])
    hi = np.minimum(np.where(act, dmg.rom_hi, np.inf), cfg.joint_range[1])
    q, qd = clamp_rom(q, qd, lo, hi)

    thrust = leg_thrust(q, qd, cfg)
    v = np.clip(thrust.sum(axis=1) / cfg.n_legs, 0.0, cfg.v_max)
    x = state.x + v * cfg.dt
    half = cfg.n_legs // 2
    asym = thrust[:, :half].sum(axis=1) - thrust[:, cfg.n_legs - half:].sum(axis=1)
    phidd = cfg.tilt_gain * asym + cfg.balance_gain * tau[:, nl:].sum(axis=1) - cfg.tilt_damping * state.phid
    phid = state.phid + phidd * cfg.dt
    phi = state.phi + phid * cfg.dt

    reward = cfg.w_v * np.minimum(v, cfg.v_cmd) - cfg.w_e * (tau * tau).sum(axis=1) - cfg.w_t * phi * phi + cfg.w_alive
    nstep = state.step + 1
    fallen = np.abs(phi) > cfg.phi_max
    done = fallen | (nstep >= cfg.episode_length)
    next_active = nstep >= dmg.onset
    x_onset = np.where(next_active & ~state.damage_active, x, state.x_onset)

    nxt = EnvState(q=q, qd=qd, prev_action=tau_cmd, phi=phi, phid=phid, x=x, step=nstep,
                   fallen=fallen, damage_active=next_active, x_onset=x_onset)
    obs_true = observe(nxt)
    obs = corrupt_arrays(obs_true, dmg.sensor_failed, next_active, mask_value)
    res = StepResult(obs_true=obs_true, obs=obs, reward=reward, done=done, fallen=fallen,
                     tau_applied=tau, displacement=x - x_onset)
    return nxt, res


def batch_step(states: Sequence[EnvState], actions, specs: Sequence[DamageSpec], cfg: EnvConfig,
               mask_value: float = 0.0):
    """Step a list of independent single-env states; results come back positionally."""
    if not len(states) == len(actions) == len(specs):
        raise ValueError("states, actions and specs must have equal length")
    if not states:
        return [], []
    stacked = EnvState.stack(states)
    dmg = DamageArrays.from_specs(specs, cfg.n_joints)
    nxt, res = step(stacked, np.asarray(actions, dtype=np.float64), dmg, cfg, mask_value)
    return [nxt[i] for i in range(len(states))], [res[i] for i in range(len(states))]


def displacement_since_onset(state: EnvState) -> np.ndarray:
    """``x(now) - x(onset)`` per env; raises if any env has not reached its onset."""
    if not np.all(state.damage_active):
        raise ValueError("displacement requested before damage onset")
    return state.x - state.x_onset


class VecEnv:
    """Auto-resetting batch of envs whose damage spec is redrawn every episode.

    ``spec_fn(env_index, episode_index)`` supplies the DamageSpec of each new
    episode; env resets are seeded from ``(seed, env_index, episode_index)``
    so the stream of episodes does not depend on batch order.
    """

    def __init__(self, cfg: EnvConfig, n_envs: int, seed: int,
                 spec_fn: Callable[[int, int], DamageSpec], mask_value: float = 0.0):
        self.cfg = cfg
        self.n_envs = n_envs
        self.seed = int(seed)
        self.spec_fn = spec_fn
        self.mask_value = mask_value
        self.episode = np.zeros(n_envs, dtype=np.int64)
        self.specs: list[DamageSpec] = [None] * n_envs
        self.dmg = DamageArrays.from_specs([DamageSpec()] * n_envs, cfg.n_joints)
        self.state: EnvState | None = None
        self.obs = self.obs_true = None

    def _reset_seed(self, i: int) -> int:
        return int(np.random.SeedSequence([self.seed, i, int(self.episode[i])]).generate_state(1)[0])

    def _reset_rows(self, idx) -> None:
        for i in idx:
            spec = self.spec_fn(int(i), int(self.episode[i]))
            self.specs[i] = spec
            self.dmg.set_row(i, spec, self.cfg.n_joints)
        seeds = [self._reset_seed(int(i)) for i in idx]
        st, obs_true = reset(seeds, self.cfg, onset=self.dmg.onset[idx])
        self.state.set_rows(idx, st)
        self.obs_true[idx] = obs_true
        self.obs[idx] = corrupt_arrays(obs_true, self.dmg.sensor_failed[idx], st.damage_active, self.mask_value)

    def reset(self):
        N = self.cfg.n_joints
        self.state, _ = reset(np.zeros(self.n_envs, dtype=np.int64), self.cfg)
        self.obs_true = np.zeros((self.n_envs, N, 3))
        self.obs = np.zeros((self.n_envs, N, 3))
        self._reset_rows(np.arange(self.n_envs))
        return self.obs

    def set_spec_fn(self, spec_fn) -> None:
        self.spec_fn = spec_fn

    def flags(self):
        return self.dmg.flags(self.state.damage_active)

    def step(self, actions):
        """Step all envs; finished ones are reset and their fresh observation returned."""
        self.state, res = step(self.state, actions, self.dmg, self.cfg, self.mask_value)
        self.obs = res.obs.copy()
        self.obs_true = res.obs_true.copy()
        done_idx = np.flatnonzero(res.done)
        if done_idx.size:
            self.episode[done_idx] += 1
            self._reset_rows(done_idx)
        return res


@dataclass
class TrajectoryLog:
    """Per-step record of one env, written as CSV for offline plotting."""

    n_joints: int
    rows: list = field(default_factory=list)

    def record(self, state: EnvState, res: StepResult, masked=None, detected=None, env: int = 0) -> None:
        row = [int(state.step[env])]
        row += state.q[env].tolist() + state.qd[env].tolist() + res.tau_applied[env].tolist()
        row += [float(state.phi[env]), float(state.x[env]), float(res.reward[env])]
        mask_bits = "" if masked is None else "".join("1" if m else "0" for m in masked[env])
        row += [mask_bits, "" if detected is None else int(bool(detected[env]))]
        self.rows.append(row)

    def header(self) -> list[str]:
        n = range(self.n_joints)
        return (["step"] + [f"q{i}" for i in n] + [f"qd{i}" for i in n] + [f"tau{i}" for i in n]
                + ["phi", "x", "reward", "masked", "detected"])

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            w.writerows(self.rows)
