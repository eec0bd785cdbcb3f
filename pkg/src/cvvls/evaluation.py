"""Segment matching, detection metrics, speed RMSE, baseline, coding-rate profile."""

from __future__ import annotations

import bisect
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .crate_net import CrateParams, coding_rate, forward
from .rco import RCOConfig, RCOFrame, RCOWindow, decode
from .trafficsim import VehicleState

DEFAULT_THRESHOLD = 5.0
MATCHING_RULE = "per-segment two-pointer greedy on position-sorted NC lists"


@dataclass
class MatchResult:
    pairs: list[tuple[VehicleState, VehicleState, float]]
    unmatched_estimates: list[VehicleState]
    unmatched_truths: list[VehicleState]
    threshold: float

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_estimates)

    @property
    def fn(self) -> int:
        return len(self.unmatched_truths)


def _match_sorted(est: list[VehicleState], tru: list[VehicleState], threshold: float):
    """Order-preserving greedy; maximal for threshold matching on a line."""
    pairs, lone_e, lone_t = [], [], []
    i = j = 0
    while i < len(est) and j < len(tru):
        d = abs(est[i].position - tru[j].position)
        if d <= threshold:
            pairs.append((est[i], tru[j], d))
            i += 1
            j += 1
        elif est[i].position < tru[j].position:
            lone_e.append(est[i])
            i += 1
        else:
            lone_t.append(tru[j])
            j += 1
    return pairs, lone_e + est[i:], lone_t + tru[j:]


def segment_and_match(estimates: Sequence[VehicleState], truths: Sequence[VehicleState],
                      cv_positions: Sequence[float], threshold: float = DEFAULT_THRESHOLD,
                      cv_tolerance: float = 1e-6) -> MatchResult:
    """Split the lane at CV positions and match NC estimates to NC truths per segment.

    Vehicles sitting on a CV position are the CVs themselves and are left out.
    """
    cvs = sorted(float(c) for c in cv_positions)

    def is_cv(v):
        i = bisect.bisect_left(cvs, v.position - cv_tolerance)
        return i < len(cvs) and cvs[i] <= v.position + cv_tolerance

    def by_segment(vehicles):
        out: dict[int, list[VehicleState]] = {}
        for v in sorted(vehicles, key=lambda v: v.position):
            if not is_cv(v):
                out.setdefault(bisect.bisect_right(cvs, v.position), []).append(v)
        return out

    est, tru = by_segment(estimates), by_segment(truths)
    result = MatchResult([], [], [], threshold)
    for seg in sorted(set(est) | set(tru)):
        pairs, lone_e, lone_t = _match_sorted(est.get(seg, []), tru.get(seg, []), threshold)
        result.pairs += pairs
        result.unmatched_estimates += lone_e
        result.unmatched_truths += lone_t
    return result


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool  # a zero denominator was replaced by 0


def prf1(tp: int, fp: int, fn: int) -> PRF:
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return PRF(precision, recall, f1, degenerate)


def speed_rmse(pairs) -> float:
    """RMSE of speeds over true-positive pairs; ``nan`` when there are none."""
    if not pairs:
        return math.nan
    err = np.array([e.speed - t.speed for e, t, *_ in pairs], dtype=float)
    return float(np.sqrt(np.mean(err ** 2)))


# --------------------------------------------------------------------------
# aggregate reports


@dataclass
class Tally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    sq_err: float = 0.0
    frames: int = 0

    def add(self, m: MatchResult) -> None:
        self.tp += m.tp
        self.fp += m.fp
        self.fn += m.fn
        self.sq_err += float(sum((e.speed - t.speed) ** 2 for e, t, _ in m.pairs))
        self.frames += 1

    def merge(self, other: "Tally") -> None:
        for f in dataclasses.fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def summary(self) -> dict:
        p = prf1(self.tp, self.fp, self.fn)
        rmse = math.sqrt(self.sq_err / self.tp) if self.tp else None
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "frames": self.frames,
                "sq_err": self.sq_err,
                "precision": p.precision, "recall": p.recall, "f1": p.f1,
                "rmse": rmse, "degenerate": p.degenerate, "rmse_undefined": self.tp == 0}


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    rmse: Optional[float]
    flags: dict
    per_scenario: dict = field(default_factory=dict)
    coding_rates: list = field(default_factory=list)
    method: str = "model"

    @classmethod
    def from_tallies(cls, total: Tally, per_scenario: dict[str, Tally], method: str,
                     threshold: float) -> "EvalReport":
        s = total.summary()
        flags = {
            "empty": total.frames == 0,
            "degenerate": s["degenerate"],
            "rmse_undefined": s["rmse_undefined"],
            "threshold_m": threshold,
            "matching_rule": MATCHING_RULE,
            "cvs_scored": False,
        }
        return cls(s["tp"], s["fp"], s["fn"], s["precision"], s["recall"], s["f1"], s["rmse"],
                   flags, {k: v.summary() for k, v in sorted(per_scenario.items())}, [], method)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def score_frame(pred: RCOFrame, target: RCOFrame, cv_frame: RCOFrame, rco: RCOConfig,
                threshold: float = DEFAULT_THRESHOLD) -> MatchResult:
    cvs = [v.position for v in decode(cv_frame, rco)]
    return segment_and_match(decode(pred, rco), decode(target, rco), cvs, threshold)


def evaluate_frames(preds: Sequence[RCOFrame], targets: Sequence[RCOFrame],
                    cv_frames: Sequence[RCOFrame], rco: RCOConfig,
                    threshold: float = DEFAULT_THRESHOLD, groups: Optional[Sequence[str]] = None,
                    method: str = "model") -> EvalReport:
    total = Tally()
    per: dict[str, Tally] = {}
    for i, (p, t, c) in enumerate(zip(preds, targets, cv_frames)):
        m = score_frame(p, t, c, rco, threshold)
        total.add(m)
        if groups is not None:
            per.setdefault(groups[i], Tally()).add(m)
    return EvalReport.from_tallies(total, per, method, threshold)


# --------------------------------------------------------------------------
# comparator


@dataclass(frozen=True)
class BaselineParams:
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    desired_headway: float = 1.0


def baseline_interpolate(window: RCOWindow, cfg: RCOConfig,
                         bp: BaselineParams = BaselineParams()) -> RCOFrame:
    """Interpolation baseline: fill gaps between consecutive CVs at equilibrium spacing.

    The spacing for a gap is ``length + min_gap + v * headway`` at the mean
    speed of its two bounding CVs; inserted vehicles are evenly spaced and get
    speeds interpolated linearly between the bounding CVs.
    """
    now = window.frames[0]
    occ = now.occ.copy()
    spd = now.spd.copy()
    for lane in range(occ.shape[0]):
        cells = np.flatnonzero(now.occ[lane] > 0.5)
        for a, b in zip(cells[:-1], cells[1:]):
            xa, xb = (a + 0.5) * cfg.cell_length, (b + 0.5) * cfg.cell_length
            va = now.spd[lane, a] * cfg.free_flow_speed
            vb = now.spd[lane, b] * cfg.free_flow_speed
            spacing = bp.vehicle_length + bp.min_gap + 0.5 * (va + vb) * bp.desired_headway
            n = int(round((xb - xa) / spacing)) - 1
            for j in range(1, n + 1):
                x = xa + j * (xb - xa) / (n + 1)
                c = min(int(np.floor(x / cfg.cell_length)), cfg.n_cells - 1)
                if occ[lane, c]:
                    continue
                occ[lane, c] = 1.0
                spd[lane, c] = (va + (vb - va) * (x - xa) / (xb - xa)) / cfg.free_flow_speed
    return RCOFrame(occ, spd, now.cell_length, now.timestamp)


# --------------------------------------------------------------------------
# feature analysis


def encoder_features(params: CrateParams, inputs: np.ndarray, batch: int = 256) -> list[np.ndarray]:
    """Output of every encoder block for every input, ``[n_encoder][n, h, N]``."""
    ne = params.config.n_encoder
    layers: list[list[np.ndarray]] = [[] for _ in range(ne)]
    for s in range(0, len(inputs), batch):
        _, cache = forward(np.asarray(inputs[s:s + batch]), params)
        for i in range(ne):
            layers[i].append(cache.features[i + 1])
    return [np.concatenate(chunks) for chunks in layers]


def coding_rate_profile(params: CrateParams, inputs: np.ndarray, batch: int = 256) -> list[float]:
    """Mean coding rate of each encoder block's output, in depth order."""
    feats = encoder_features(params, inputs, batch)
    return [float(np.mean(coding_rate(f, params.hyper[i].eps))) for i, f in enumerate(feats)]


def depth_trend(profile: Sequence[float]) -> float:
    """Spearman correlation between depth (1..n) and the profile values."""
    from scipy.stats import spearmanr

    rho = spearmanr(np.arange(1, len(profile) + 1), profile).statistic
    return float(rho)


def sensitivity_sweep(k_values: Sequence[int], penetrations: Sequence[float], runner) -> dict:
    """Table of (F1, RMSE) per ``(k, penetration)``.

    ``runner(k, penetration)`` trains and evaluates one model and returns its
    :class:`EvalReport`.
    """
    table = {}
    for k in k_values:
        for p in penetrations:
            rep = runner(k, p)
            table[(k, p)] = {"f1": rep.f1, "rmse": rep.rmse}
    return table
