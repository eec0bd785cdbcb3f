"""Road cell occupancy (RCO) grids.

A lane is cut into fixed-length cells. Each cell carries two channels:
occupancy (1 if a vehicle's front bumper lies in the cell, else 0) and speed
(the vehicle's speed divided by the free-flow speed, or -1 for empty cells).
A window stacks ``k`` CV-only frames, newest first, along the channel axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import EncodingConflictError, InsufficientHistoryError
from .trafficsim import SimConfig, TrajectoryLog, VehicleState

EMPTY_SPEED = -1.0


@dataclass(frozen=True)
class RCOConfig:
    n_cells: int
    free_flow_speed: float
    cell_length: float = 1.0
    lanes: int = 1
    vehicle_length: float = 5.0
    interval: float = 1.0  # spacing of frames inside a window, seconds

    @classmethod
    def from_sim(cls, cfg: SimConfig, cell_length: float = 1.0) -> "RCOConfig":
        return cls(n_cells=int(math.ceil(cfg.link_length / cell_length)),
                   free_flow_speed=cfg.free_flow_speed, cell_length=cell_length,
                   vehicle_length=cfg.vehicle_length)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.lanes, self.n_cells)


@dataclass(frozen=True, eq=False)
class RCOFrame:
    occ: np.ndarray  # [lanes, cells], entries in {0, 1}
    spd: np.ndarray  # [lanes, cells], -1 where empty
    cell_length: float = 1.0
    timestamp: float = 0.0

    @classmethod
    def empty(cls, cfg: RCOConfig, timestamp: float = 0.0) -> "RCOFrame":
        return cls(np.zeros(cfg.shape), np.full(cfg.shape, EMPTY_SPEED), cfg.cell_length, timestamp)

    @property
    def tensor(self) -> np.ndarray:
        """Channels-last view ``[lanes, cells, 2]``."""
        return np.stack([self.occ, self.spd], axis=-1)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.occ))

    def check(self, d_e: int | None = None) -> None:
        """Raise ``AssertionError`` unless the frame invariants hold."""
        occupied = self.occ == 1
        assert np.all((self.occ == 0) | occupied), "occupancy must be binary"
        assert np.all((self.spd == EMPTY_SPEED) == ~occupied), "spd = -1 exactly where empty"
        assert np.all((self.spd[occupied] >= 0) & (self.spd[occupied] <= 1)), "speeds in [0, 1]"
        if d_e is not None:
            for lane in occupied:
                cells = np.flatnonzero(lane)
                assert np.all(np.diff(cells) > d_e), f"occupied cells closer than {d_e + 1}"


@dataclass(frozen=True, eq=False)
class RCOWindow:
    frames: tuple[RCOFrame, ...]  # newest first

    @property
    def k(self) -> int:
        return len(self.frames)

    @property
    def tensor(self) -> np.ndarray:
        """``[lanes, cells, 2k]`` with channels (occ(t), spd(t), occ(t-1), spd(t-1), ...)."""
        return np.concatenate([f.tensor for f in self.frames], axis=-1)


def encode_arrays(positions, speeds, cfg: RCOConfig, lanes=None) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`encode`; returns ``(occ, spd)``."""
    positions = np.asarray(positions, dtype=float)
    speeds = np.asarray(speeds, dtype=float)
    lane_idx = np.zeros(len(positions), dtype=np.int64) if lanes is None else np.asarray(lanes)
    occ = np.zeros(cfg.shape)
    spd = np.full(cfg.shape, EMPTY_SPEED)
    if not len(positions):
        return occ, spd
    cells = np.floor(positions / cfg.cell_length).astype(np.int64)
    # a front bumper exactly on the link end belongs to the last cell
    cells = np.minimum(cells, cfg.n_cells - 1)
    if cells.min() < 0:
        raise ValueError("vehicle position upstream of the link")
    flat = lane_idx * cfg.n_cells + cells
    if len(np.unique(flat)) != len(flat):
        raise EncodingConflictError("two vehicles share a road cell")
    occ[lane_idx, cells] = 1.0
    spd[lane_idx, cells] = speeds / cfg.free_flow_speed
    return occ, spd


def encode(vehicles: Sequence[VehicleState], which: Literal["cv_only", "all"],
           cfg: RCOConfig, timestamp: float = 0.0) -> RCOFrame:
    if which not in ("cv_only", "all"):
        raise ValueError(f"which must be 'cv_only' or 'all', got {which!r}")
    chosen = [v for v in vehicles if v.is_cv or which == "all"]
    occ, spd = encode_arrays([v.position for v in chosen], [v.speed for v in chosen], cfg)
    return RCOFrame(occ, spd, cfg.cell_length, timestamp)


def decode(frame: RCOFrame, cfg: RCOConfig) -> list[VehicleState]:
    """One vehicle per occupied cell, placed at the cell centre, downstream first."""
    out = []
    for lane in range(frame.occ.shape[0]):
        cells = np.flatnonzero(frame.occ[lane] > 0.5)[::-1]
        for j, c in enumerate(cells):
            out.append(VehicleState(
                id=j, position=(c + 0.5) * frame.cell_length,
                speed=float(frame.spd[lane, c]) * cfg.free_flow_speed,
                is_cv=False, length=cfg.vehicle_length))
    return out


def frame_at(log: TrajectoryLog, t: float, which: str, cfg: RCOConfig) -> RCOFrame:
    s = log.slice_at(t)
    keep = np.ones(s.stop - s.start, dtype=bool) if which == "all" else log.is_cv[s]
    occ, spd = encode_arrays(log.position[s][keep], log.speed[s][keep], cfg)
    return RCOFrame(occ, spd, cfg.cell_length, t)


def window(log: TrajectoryLog, t: float, k: int, cfg: RCOConfig) -> tuple[RCOWindow, RCOFrame]:
    """Input window of ``k`` CV-only frames ending at ``t`` and the full target frame at ``t``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    earliest = t - (k - 1) * cfg.interval
    if earliest < -1e-9:
        raise InsufficientHistoryError(f"window of {k} frames at t={t} starts before the log")
    try:
        frames = tuple(frame_at(log, t - i * cfg.interval, "cv_only", cfg) for i in range(k))
        target = frame_at(log, t, "all", cfg)
    except IndexError as exc:
        raise InsufficientHistoryError(str(exc)) from exc
    return RCOWindow(frames), target


# --------------------------------------------------------------------------
# tensor dumps: flat float32, row-major, JSON sidecar


def save_tensor(path, array: np.ndarray, **meta) -> Path:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "dtype": "float32", "order": "C", **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_tensor(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"])
    return arr.astype(np.float32), meta
