"""Malfunction taxonomy, Stage-II damage sampling and the per-joint constraint operators."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

SCENARIOS = range(1, 9)

# Stage-II subcategories, in the order the sampling ratios refer to them.
SUBCATEGORIES = ("normal", "sensor_only", "detectable", "undetectable")

SCENARIO_NAMES = {
    1: "sensor-only",
    2: "detected ROM limit",
    3: "detected motor limit",
    4: "detected velocity limit",
    5: "undetected ROM limit",
    6: "undetected motor limit",
    7: "undetected velocity limit",
    8: "normal",
}


@dataclass(frozen=True)
class JointFault:
    sensor_failed: bool = False
    rom_window: tuple[float, float] | None = None
    torque_limit: float | None = None
    velocity_limit: float | None = None
    detectable: bool = False

    def __post_init__(self):
        if self.rom_window is not None and not self.rom_window[0] < self.rom_window[1]:
            raise ValueError(f"empty ROM window {self.rom_window}")
        for name in ("torque_limit", "velocity_limit"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")

    @property
    def joint_damaged(self) -> bool:
        return self.rom_window is not None or self.torque_limit is not None or self.velocity_limit is not None

    def to_record(self) -> dict:
        return {
            "sensor_failed": self.sensor_failed,
            "rom_window": list(self.rom_window) if self.rom_window is not None else None,
            "torque_limit": self.torque_limit,
            "velocity_limit": self.velocity_limit,
            "detectable": self.detectable,
        }


@dataclass(frozen=True)
class DetectabilityFlags:
    masked_joints: frozenset = frozenset()
    joint_malfunction_detected: bool = False

    @classmethod
    def none(cls) -> "DetectabilityFlags":
        return cls()


@dataclass(frozen=True)
class DamageSpec:
    faults: dict = field(default_factory=dict)
    onset_step: int = 0
    scenario: int | str = 8

    def __post_init__(self):
        if self.onset_step < 0:
            raise ValueError("onset_step must be non-negative")

    def validate(self, n_joints: int) -> None:
        bad = [j for j in self.faults if not 0 <= j < n_joints]
        if bad:
            raise ValueError(f"fault joints {bad} outside 0..{n_joints - 1}")

    def flags(self, active: bool = True) -> DetectabilityFlags:
        """What the (oracle) damage detector reports for this spec."""
        if not active:
            return DetectabilityFlags()
        masked = set()
        detected = False
        for j, f in self.faults.items():
            visible_damage = f.detectable and f.joint_damaged
            if f.sensor_failed or visible_damage:
                masked.add(j)
            detected = detected or visible_damage
        return DetectabilityFlags(frozenset(masked), detected)

    def to_record(self) -> dict:
        return {
            "scenario": self.scenario,
            "onset_step": self.onset_step,
            "joints": sorted(self.faults),
            "faults": {str(j): f.to_record() for j, f in sorted(self.faults.items())},
        }


@dataclass(frozen=True)
class DamageLimits:
    """Severity of each damage type.  Defaults are sized for the default EnvConfig."""

    torque_limit: float = 3.0
    velocity_limit: float = 1.5
    rom_fraction: float = 0.3
    rom_range: tuple[float, float] = (-1.6, 1.6)


@dataclass(frozen=True)
class ScenarioTemplate:
    """Fault pattern of one evaluation scenario, before joints are chosen."""

    scenario_id: int
    sensor_failed: bool
    rom: bool
    torque: bool
    velocity: bool
    detectable: bool
    limits: DamageLimits

    @property
    def has_faults(self) -> bool:
        return self.sensor_failed or self.rom or self.torque or self.velocity

    def fault(self, rng: np.random.Generator) -> JointFault:
        lim = self.limits
        return JointFault(
            sensor_failed=self.sensor_failed,
            rom_window=make_rom_window(rng, lim.rom_range, lim.rom_fraction) if self.rom else None,
            torque_limit=lim.torque_limit if self.torque else None,
            velocity_limit=lim.velocity_limit if self.velocity else None,
            detectable=self.detectable,
        )

    def instantiate(self, rng: np.random.Generator, n_joints: int, count_range: Sequence[int],
                    onset_step: int) -> DamageSpec:
        if not self.has_faults:
            return DamageSpec({}, onset_step, self.scenario_id)
        joints = choose_joints(rng, n_joints, count_range)
        return DamageSpec({int(j): self.fault(rng) for j in joints}, onset_step, self.scenario_id)


def scenario_config(scenario_id: int, limits: DamageLimits | None = None) -> ScenarioTemplate:
    """Fault template for evaluation scenario 1..8.

    1 sensor-only; 2/3/4 failed sensor plus ROM / motor / velocity damage
    (detectable); 5/6/7 the same damage with working sensors (undetectable);
    8 no damage.
    """
    if scenario_id not in SCENARIOS:
        raise ValueError(f"scenario id must be in 1..8, got {scenario_id!r}")
    limits = limits or DamageLimits()
    sensor = scenario_id <= 4
    kind = (scenario_id - 2) % 3 if 2 <= scenario_id <= 7 else None
    return ScenarioTemplate(
        scenario_id=scenario_id,
        sensor_failed=sensor,
        rom=kind == 0,
        torque=kind == 1,
        velocity=kind == 2,
        detectable=2 <= scenario_id <= 4,
        limits=limits,
    )


def choose_joints(rng: np.random.Generator, n_joints: int, count_range: Sequence[int]) -> np.ndarray:
    lo, hi = int(count_range[0]), int(count_range[1])
    if not 1 <= lo <= hi <= n_joints - 1:
        raise ValueError(f"damage count range [{lo}, {hi}] invalid for {n_joints} joints")
    count = int(rng.integers(lo, hi + 1))
    return np.sort(rng.choice(n_joints, size=count, replace=False))


def make_rom_window(rng: np.random.Generator, full_range: Sequence[float], fraction: float) -> tuple[float, float]:
    """A sub-interval covering ``fraction`` of ``full_range`` at a uniform random offset."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"ROM fraction must be in (0, 1], got {fraction}")
    lo, hi = float(full_range[0]), float(full_range[1])
    span = hi - lo
    width = fraction * span
    start = lo + rng.uniform() * (span - width)
    return (start, start + width)


def sample_stage2(rng: np.random.Generator, ratios: Sequence[float], n_joints: int,
                  damage_range: Sequence[int] = (2, 4), limits: DamageLimits | None = None,
                  onset_step: int = 0) -> DamageSpec:
    """Draw one Stage-II training spec.

    The subcategory is picked in proportion to ``ratios`` (normal,
    sensor-only, detectable, undetectable).  Detectable damage gets all three
    damage types plus a dead sensor; undetectable damage gets the motor and
    velocity limits with working sensors.
    """
    w = np.asarray(ratios, dtype=np.float64)
    if w.shape != (4,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"stage-2 ratios must be 4 non-negative weights, not all zero: {ratios!r}")
    limits = limits or DamageLimits()
    sub = SUBCATEGORIES[int(rng.choice(4, p=w / w.sum()))]
    if sub == "normal":
        return DamageSpec({}, onset_step, sub)
    joints = choose_joints(rng, n_joints, damage_range)
    faults = {}
    for j in joints:
        if sub == "sensor_only":
            f = JointFault(sensor_failed=True)
        elif sub == "detectable":
            f = JointFault(
                sensor_failed=True,
                rom_window=make_rom_window(rng, limits.rom_range, limits.rom_fraction),
                torque_limit=limits.torque_limit,
                velocity_limit=limits.velocity_limit,
                detectable=True,
            )
        else:
            f = JointFault(torque_limit=limits.torque_limit, velocity_limit=limits.velocity_limit)
        faults[int(j)] = f
    return DamageSpec(faults, onset_step, sub)


def spec_rng(*keys: int) -> np.random.Generator:
    """Counter-based stream: the same key tuple always yields the same generator."""
    return np.random.default_rng([int(k) for k in keys])


# ---------------------------------------------------------------------------
# physical constraints


@dataclass
class DamageArrays:
    """Batched view of B damage specs over N joints (inf where a limit is absent)."""

    sensor_failed: np.ndarray
    rom_lo: np.ndarray
    rom_hi: np.ndarray
    torque_limit: np.ndarray
    velocity_limit: np.ndarray
    detectable: np.ndarray
    onset: np.ndarray

    @classmethod
    def from_specs(cls, specs: Iterable[DamageSpec], n_joints: int) -> "DamageArrays":
        specs = list(specs)
        B = len(specs)
        out = cls(
            sensor_failed=np.zeros((B, n_joints), dtype=bool),
            rom_lo=np.full((B, n_joints), -np.inf),
            rom_hi=np.full((B, n_joints), np.inf),
            torque_limit=np.full((B, n_joints), np.inf),
            velocity_limit=np.full((B, n_joints), np.inf),
            detectable=np.zeros((B, n_joints), dtype=bool),
            onset=np.zeros(B, dtype=np.int64),
        )
        for b, spec in enumerate(specs):
            out.set_row(b, spec, n_joints)
        return out

    def __getitem__(self, idx) -> "DamageArrays":
        return DamageArrays(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def __len__(self) -> int:
        return self.onset.shape[0]

    def set_row(self, b: int, spec: DamageSpec, n_joints: int) -> None:
        spec.validate(n_joints)
        self.sensor_failed[b] = False
        self.rom_lo[b] = -np.inf
        self.rom_hi[b] = np.inf
        self.torque_limit[b] = np.inf
        self.velocity_limit[b] = np.inf
        self.detectable[b] = False
        self.onset[b] = spec.onset_step
        for j, f in spec.faults.items():
            self.sensor_failed[b, j] = f.sensor_failed
            if f.rom_window is not None:
                self.rom_lo[b, j], self.rom_hi[b, j] = f.rom_window
            if f.torque_limit is not None:
                self.torque_limit[b, j] = f.torque_limit
            if f.velocity_limit is not None:
                self.velocity_limit[b, j] = f.velocity_limit
            self.detectable[b, j] = f.detectable and f.joint_damaged

    def flags(self, active: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Batched detector output: ``(masked (B, N), joint_malfunction_detected (B,))``."""
        active = np.asarray(active, dtype=bool)[:, None]
        masked = active & (self.sensor_failed | self.detectable)
        detected = (active & self.detectable).any(axis=1)
        return masked, detected


def constrain_arrays(tau, q, qd, dmg: DamageArrays, active):
    """Vectorised damage clamps; rows where ``active`` is False pass through untouched."""
    act = np.asarray(active, dtype=bool)[:, None]
    tl = np.where(act, dmg.torque_limit, np.inf)
    vl = np.where(act, dmg.velocity_limit, np.inf)
    lo = np.where(act, dmg.rom_lo, -np.inf)
    hi = np.where(act, dmg.rom_hi, np.inf)
    tau = np.clip(tau, -tl, tl)
    qd = np.clip(qd, -vl, vl)
    q, qd = clamp_rom(q, qd, lo, hi)
    return tau, q, qd


def clamp_rom(q, qd, lo, hi):
    hit = (q < lo) | (q > hi)
    return np.clip(q, lo, hi), np.where(hit, 0.0, qd)


def constrain_joint(tau_cmd: float, q: float, qd: float, fault: JointFault | None, active: bool):
    """Clamp one joint's torque, velocity and position into its damaged envelope."""
    if fault is None or not active:
        return float(tau_cmd), float(q), float(qd)
    dmg = DamageArrays.from_specs([DamageSpec({0: fault})], 1)
    tau, q2, qd2 = constrain_arrays(
        np.array([[tau_cmd]], float), np.array([[q]], float), np.array([[qd]], float), dmg, np.array([True])
    )
    return float(tau[0, 0]), float(q2[0, 0]), float(qd2[0, 0])


def corrupt_arrays(obs, sensor_failed, active, mask_value: float = 0.0):
    dead = sensor_failed & np.asarray(active, dtype=bool)[:, None]
    return np.where(dead[..., None], mask_value, obs)


def corrupt_sensors(O_true, spec: DamageSpec, active: bool, mask_value: float = 0.0) -> np.ndarray:
    """Replace the readings of dead sensors by ``mask_value`` once the damage is active."""
    O = np.array(O_true, dtype=np.float64)
    if not active:
        return O
    for j, f in spec.faults.items():
        if f.sensor_failed:
            O[j] = mask_value
    return O
