"""Single-lane signalized micro-simulator with IDM car following.

Vehicles enter at the upstream end of the link (position 0) following a
Poisson arrival stream, follow their leader with the Intelligent Driver
Model, treat the stop line as a stationary obstacle while the signal is
red (or amber, when they can still stop), and leave when their front
bumper reaches the downstream end.

Positions are front-bumper coordinates in meters from the upstream end.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, SimulationIntegrityError

GREEN, AMBER, RED = "green", "amber", "red"

FREE_FLOW_50KMH = 50.0 / 3.6

LOG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: float
    speed: float
    is_cv: bool
    length: float = 5.0

    @property
    def rear(self) -> float:
        return self.position - self.length


@dataclass(frozen=True)
class SignalPlan:
    """Fixed-time plan: each cycle runs green, then amber, then red."""

    cycle: float = 60.0
    amber: float = 3.0
    red: float = 30.0
    stop_line_position: Optional[float] = None  # None: 10 m short of the link end

    def __post_init__(self):
        if not (self.red >= 0 and self.amber >= 0 and self.red + self.amber < self.cycle):
            raise ContractError(f"need red + amber < cycle, got {self}")

    @property
    def green(self) -> float:
        return self.cycle - self.red - self.amber

    @property
    def green_ratio(self) -> float:
        return self.green / self.cycle

    def phase_at(self, t: float) -> str:
        # rounding keeps n * 0.1 from landing a hair past a phase boundary
        tau = round(t, 9) % self.cycle
        if tau < self.green:
            return GREEN
        if tau < self.green + self.amber:
            return AMBER
        return RED


@dataclass(frozen=True)
class SimConfig:
    link_length: float = 200.0
    free_flow_speed: float = FREE_FLOW_50KMH
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    desired_headway: float = 1.0
    resolution: float = 0.1
    vc_ratio: float = 0.6
    penetration_rate: float = 0.4
    signal: SignalPlan = field(default_factory=SignalPlan)
    seed: int = 0
    idm_accel: float = 1.0
    idm_decel: float = 1.5
    idm_exponent: float = 4.0
    # amber dilemma zone: vehicles that would need more than this to stop keep going
    amber_decel: float = 4.5

    def __post_init__(self):
        if self.resolution <= 0:
            raise ContractError("resolution must be positive")
        if not 0.0 <= self.penetration_rate <= 1.0:
            raise ContractError("penetration_rate must lie in [0, 1]")
        if self.vc_ratio < 0:
            raise ContractError("vc_ratio must be non-negative")
        if not (self.link_length > 0 and self.vehicle_length > 0 and self.free_flow_speed > 0):
            raise ContractError("link_length, vehicle_length and free_flow_speed must be positive")
        if not 0 < self.stop_line <= self.link_length:
            raise ContractError("stop line must lie on the link")

    @property
    def stop_line(self) -> float:
        if self.signal.stop_line_position is not None:
            return self.signal.stop_line_position
        return self.link_length - 10.0

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d["signal"] = SignalPlan(**d["signal"])
        return cls(**d)


# --------------------------------------------------------------------------
# car following


def _idm(v, v_lead, gap, cfg: SimConfig):
    """Vectorized IDM acceleration; ``gap`` may contain ``inf`` (no obstacle)."""
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    a, b = cfg.idm_accel, cfg.idm_decel
    dv = v - np.asarray(v_lead, dtype=float)
    dyn = v * cfg.desired_headway + v * dv / (2.0 * math.sqrt(a * b))
    s_star = cfg.min_gap + np.maximum(dyn, 0.0)
    finite = np.isfinite(gap)
    safe_gap = np.where(finite, np.maximum(gap, 1e-6), 1.0)
    interaction = np.where(finite, (s_star / safe_gap) ** 2, 0.0)
    acc = a * (1.0 - (v / cfg.free_flow_speed) ** cfg.idm_exponent - interaction)
    # keep the next-step speed inside [0, v0]
    lo = -v / cfg.resolution
    hi = (cfg.free_flow_speed - v) / cfg.resolution
    return np.clip(acc, lo, hi)


def _signal_gap(pos, spd, t: float, cfg: SimConfig):
    """Distance to the stop line for vehicles that must stop for it, else inf."""
    pos = np.asarray(pos, dtype=float)
    phase = cfg.signal.phase_at(t)
    gap = np.full(pos.shape, np.inf)
    if phase == GREEN:
        return gap
    d = cfg.stop_line - pos
    obeys = d >= 0.0
    if phase == AMBER:
        obeys &= d >= np.asarray(spd, dtype=float) ** 2 / (2.0 * cfg.amber_decel)
    gap[obeys] = d[obeys]
    return gap


def idm_acceleration(follower: VehicleState, leader: Optional[VehicleState],
                     cfg: SimConfig, t: Optional[float] = None) -> float:
    """IDM acceleration of ``follower``.

    With ``t`` given, the stop line acts as a stationary zero-length leader
    whenever the signal requires the follower to stop and the line is closer
    than the real leader.
    """
    gap, v_lead = math.inf, 0.0
    if leader is not None:
        gap = leader.rear - follower.position
        if gap <= 0:
            raise SimulationIntegrityError(
                f"vehicle {follower.id} overlaps its leader {leader.id} (gap {gap:.3f} m)")
        v_lead = leader.speed
    if t is not None:
        sig = float(_signal_gap([follower.position], [follower.speed], t, cfg)[0])
        if sig < gap:
            gap, v_lead = sig, 0.0
    return float(_idm([follower.speed], [v_lead], [gap], cfg)[0])


def _accelerations(pos, spd, length, t, cfg):
    n = len(pos)
    gap = np.full(n, np.inf)
    v_lead = np.zeros(n)
    if n > 1:
        gap[1:] = pos[:-1] - length[:-1] - pos[1:]
        v_lead[1:] = spd[:-1]
    sig = _signal_gap(pos, spd, t, cfg)
    use = sig < gap
    gap = np.where(use, sig, gap)
    v_lead = np.where(use, 0.0, v_lead)
    return _idm(spd, v_lead, gap, cfg)


def _advance(pos, spd, length, t, cfg):
    """One ballistic step on leader-first arrays; returns (pos, spd, keep-mask)."""
    dt = cfg.resolution
    acc = _accelerations(pos, spd, length, t, cfg)
    new_spd = np.clip(spd + acc * dt, 0.0, cfg.free_flow_speed)
    new_pos = pos + 0.5 * (spd + new_spd) * dt
    if len(pos) > 1:
        gaps = new_pos[:-1] - length[:-1] - new_pos[1:]
        if np.any(gaps < 0):
            i = int(np.argmin(gaps))
            raise SimulationIntegrityError(
                f"collision at t={t:.1f}s between positions {i} and {i + 1} (gap {gaps[i]:.3f} m)")
    if cfg.signal.phase_at(t) == RED:
        crossed = (pos <= cfg.stop_line) & (new_pos > cfg.stop_line)
        if np.any(crossed):
            raise SimulationIntegrityError(f"red-light violation at t={t:.1f}s")
    keep = new_pos < cfg.link_length
    return new_pos, new_spd, keep


def step(state: Sequence[VehicleState], t: float, cfg: SimConfig) -> list[VehicleState]:
    """Advance ``state`` (ordered downstream first) by one resolution step."""
    if not state:
        return []
    pos = np.array([v.position for v in state], dtype=float)
    if np.any(np.diff(pos) > 0):
        raise ContractError("vehicles must be ordered by decreasing position")
    spd = np.array([v.speed for v in state], dtype=float)
    length = np.array([v.length for v in state], dtype=float)
    new_pos, new_spd, keep = _advance(pos, spd, length, t, cfg)
    return [dataclasses.replace(v, position=float(x), speed=float(s))
            for v, x, s, k in zip(state, new_pos, new_spd, keep) if k]


# --------------------------------------------------------------------------
# demand


@dataclass(frozen=True)
class Arrival:
    time: float
    is_cv: bool


def saturation_flow(cfg: SimConfig) -> float:
    """Vehicles per second discharged at saturation headway."""
    headway = cfg.desired_headway + (cfg.vehicle_length + cfg.min_gap) / cfg.free_flow_speed
    return 1.0 / headway


def capacity(cfg: SimConfig) -> float:
    return saturation_flow(cfg) * cfg.signal.green_ratio


def arrival_rate(cfg: SimConfig) -> float:
    return cfg.vc_ratio * capacity(cfg)


def _streams(seed: int):
    arrivals, tags = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(arrivals), np.random.default_rng(tags)


def generate_arrivals(cfg: SimConfig, horizon: float, rng_seed: Optional[int] = None,
                      rate: Optional[float] = None) -> list[Arrival]:
    """Poisson arrivals on ``[0, horizon)`` with independent CV tagging.

    Arrival times and CV tags come from separate child streams of the seed,
    so changing the penetration rate leaves the arrival times untouched and
    the CV sets are nested across penetration rates.
    """
    if horizon <= 0:
        raise ContractError("horizon must be positive")
    seed = cfg.seed if rng_seed is None else rng_seed
    lam = arrival_rate(cfg) if rate is None else rate
    if lam <= 0:
        return []
    time_rng, tag_rng = _streams(seed)
    expected = lam * horizon
    chunk = int(expected + 6 * math.sqrt(expected) + 16)
    times = np.cumsum(time_rng.exponential(1.0 / lam, size=chunk))
    while times[-1] < horizon:
        more = np.cumsum(time_rng.exponential(1.0 / lam, size=chunk)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times < horizon]
    tags = tag_rng.random(len(times)) < cfg.penetration_rate
    return [Arrival(float(a), bool(c)) for a, c in zip(times, tags)]


# --------------------------------------------------------------------------
# scenario runs and logs


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """Columnar trajectory record, sorted by (step, id)."""

    step: np.ndarray
    id: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    is_cv: np.ndarray
    length: np.ndarray
    config: SimConfig
    cycles: int
    warmup_cycles: int
    n_steps: int = 0
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        offsets = np.searchsorted(self.step, np.arange(self.n_steps + 2))
        object.__setattr__(self, "_offsets", offsets)

    @property
    def time(self) -> np.ndarray:
        return self.step * self.config.resolution

    @property
    def horizon(self) -> float:
        return self.cycles * self.config.signal.cycle

    @property
    def warmup_end(self) -> float:
        return self.warmup_cycles * self.config.signal.cycle

    def __len__(self) -> int:
        return len(self.step)

    def step_index(self, t: float) -> int:
        n = int(round(t / self.config.resolution))
        if not 0 <= n <= self.n_steps:
            raise IndexError(f"time {t} outside log range [0, {self.horizon}]")
        return n

    def slice_at(self, t: float) -> slice:
        n = self.step_index(t)
        return slice(int(self._offsets[n]), int(self._offsets[n + 1]))

    def states_at(self, t: float) -> list[VehicleState]:
        """Vehicles on the link at ``t``, downstream first."""
        s = self.slice_at(t)
        return [VehicleState(int(i), float(x), float(v), bool(c), float(ln))
                for i, x, v, c, ln in zip(self.id[s], self.position[s], self.speed[s],
                                          self.is_cv[s], self.length[s])]

    def records(self) -> Iterator[tuple[float, VehicleState]]:
        dt = self.config.resolution
        for n, i, x, v, c, ln in zip(self.step, self.id, self.position, self.speed,
                                     self.is_cv, self.length):
            yield float(n * dt), VehicleState(int(i), float(x), float(v), bool(c), float(ln))

    def n_vehicles(self) -> int:
        return int(len(np.unique(self.id)))

    def metadata(self) -> dict:
        return {
            "format_version": LOG_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "seed": self.config.seed,
            "cycles": self.cycles,
            "warmup_cycles": self.warmup_cycles,
            "n_steps": self.n_steps,
        }

    def to_csv(self, path) -> Path:
        """Write ``<path>`` (CSV) and ``<path>.json`` (metadata)."""
        path = Path(path)
        dt = self.config.resolution
        table = np.column_stack([self.step * dt, self.id, self.position, self.speed,
                                 self.is_cv.astype(int)])
        np.savetxt(path, table, fmt=["%.6f", "%d", "%.6f", "%.6f", "%d"], delimiter=",",
                   header="t,id,pos_m,speed_mps,is_cv", comments="")
        meta_path = path.with_suffix(path.suffix + ".json")
        meta_path.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))
        return path

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        cfg = SimConfig.from_dict(meta["config"])
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if table.size == 0:
            table = np.zeros((0, 5))
        return cls(
            step=np.rint(table[:, 0] / cfg.resolution).astype(np.int64),
            id=table[:, 1].astype(np.int64),
            position=table[:, 2].copy(),
            speed=table[:, 3].copy(),
            is_cv=table[:, 4].astype(bool),
            length=np.full(len(table), cfg.vehicle_length),
            config=cfg,
            cycles=meta["cycles"],
            warmup_cycles=meta["warmup_cycles"],
            n_steps=meta["n_steps"],
        )


def warmup_cycles_for(cycles: int) -> int:
    """First sixth of the run (10 of 60 at full scale)."""
    return cycles // 6


def _entry_speed(gap: float, v_lead: float, cfg: SimConfig) -> float:
    room = gap - cfg.min_gap
    return float(min(cfg.free_flow_speed,
                     max(0.0, room / cfg.desired_headway),
                     math.sqrt(v_lead ** 2 + 2.0 * cfg.idm_decel * max(room, 0.0))))


def run_scenario(cfg: SimConfig, cycles: int) -> TrajectoryLog:
    """Simulate ``cycles`` signal cycles and log every vehicle at every step."""
    if cycles < 1:
        raise ContractError("cycles must be >= 1")
    dt = cfg.resolution
    horizon = cycles * cfg.signal.cycle
    n_steps = int(round(horizon / dt))
    pending = deque(generate_arrivals(cfg, horizon, cfg.seed))

    pos = np.zeros(0)
    spd = np.zeros(0)
    length = np.zeros(0)
    ids = np.zeros(0, dtype=np.int64)
    cv = np.zeros(0, dtype=bool)
    next_id = 0
    cols: dict[str, list] = {k: [] for k in ("step", "id", "pos", "spd", "cv", "len")}

    for n in range(n_steps + 1):
        t = n * dt
        if pending and pending[0].time <= t + 1e-9:
            if len(pos):
                gap, v_lead = pos[-1] - length[-1], spd[-1]
            else:
                gap, v_lead = math.inf, cfg.free_flow_speed
            if gap >= cfg.min_gap:
                arrival = pending.popleft()
                v_in = _entry_speed(gap, v_lead, cfg)
                pos = np.append(pos, 0.0)
                spd = np.append(spd, v_in)
                length = np.append(length, cfg.vehicle_length)
                ids = np.append(ids, next_id)
                cv = np.append(cv, arrival.is_cv)
                next_id += 1
        if len(pos):
            cols["step"].append(np.full(len(pos), n, dtype=np.int64))
            cols["id"].append(ids.copy())
            cols["pos"].append(pos.copy())
            cols["spd"].append(spd.copy())
            cols["cv"].append(cv.copy())
            cols["len"].append(length.copy())
        if n < n_steps and len(pos):
            pos, spd, keep = _advance(pos, spd, length, t, cfg)
            if not keep.all():
                pos, spd, length, ids, cv = pos[keep], spd[keep], length[keep], ids[keep], cv[keep]

    def cat(key, dtype):
        return np.concatenate(cols[key]).astype(dtype) if cols[key] else np.zeros(0, dtype=dtype)

    return TrajectoryLog(
        step=cat("step", np.int64), id=cat("id", np.int64), position=cat("pos", float),
        speed=cat("spd", float), is_cv=cat("cv", bool), length=cat("len", float),
        config=cfg, cycles=cycles, warmup_cycles=warmup_cycles_for(cycles), n_steps=n_steps,
    )


# --------------------------------------------------------------------------
# log audits


def min_gaps(log: TrajectoryLog) -> np.ndarray:
    """Front-to-rear gap between each logged follower and its leader."""
    same = log.step[1:] == log.step[:-1]
    gaps = log.position[:-1] - log.length[:-1] - log.position[1:]
    return gaps[same]


def red_light_violations(log: TrajectoryLog) -> int:
    """Count vehicles whose front crossed the stop line during a red step."""
    order = np.lexsort((log.step, log.id))
    ids, steps, pos = log.id[order], log.step[order], log.position[order]
    consecutive = (ids[1:] == ids[:-1]) & (steps[1:] == steps[:-1] + 1)
    line = log.config.stop_line
    crossed = consecutive & (pos[:-1] <= line) & (pos[1:] > line)
    dt = log.config.resolution
    red = np.array([log.config.signal.phase_at(s * dt) == RED for s in steps[:-1][crossed]],
                   dtype=bool)
    return int(red.sum())


def max_queue_length(log: TrajectoryLog, speed_threshold: float = 0.5) -> float:
    """Longest queue over the run.

    The queue at an instant is the unbroken run of slow vehicles (speed below
    ``speed_threshold``) directly upstream of the stop line; its length runs
    from the stop line to the rear of the last vehicle in that run.
    """
    line = log.config.stop_line
    best = 0.0
    for n in range(log.n_steps + 1):
        lo, hi = log._offsets[n], log._offsets[n + 1]
        if lo == hi:
            continue
        upstream = log.position[lo:hi] <= line
        spd = log.speed[lo:hi][upstream]
        if not len(spd) or spd[0] >= speed_threshold:
            continue
        fast = np.flatnonzero(spd >= speed_threshold)
        last = (fast[0] if len(fast) else len(spd)) - 1
        rear = log.position[lo:hi][upstream][last] - log.length[lo:hi][upstream][last]
        best = max(best, line - float(rear))
    return best
