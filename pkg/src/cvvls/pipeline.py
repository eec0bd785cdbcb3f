"""Scenario grids, dataset assembly, and train/evaluate orchestration."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import rco as rco_mod
from .crate_net import CrateConfig, CrateParams, forward, init_params, postprocess
from .evaluation import (DEFAULT_THRESHOLD, EvalReport, baseline_interpolate,
                         evaluate_frames)
from .rco import RCOConfig, RCOFrame, RCOWindow, encode_arrays
from .errors import InsufficientHistoryError
from .trafficsim import SimConfig, TrajectoryLog, run_scenario
from .evaluation import coding_rate_profile
from .training import Batch, TrainConfig, TrainResult, fingerprint, train

log = logging.getLogger(__name__)

DESK_CYCLES = 12
DESK_EPOCHS = 60
DESK_BATCH = 32

REDS = (15.0, 30.0, 45.0)
VC_RATIOS = (0.3, 0.6, 0.9)
PENETRATIONS = (0.1, 0.4, 0.7)


@dataclass(frozen=True)
class ScenarioSpec:
    red_seconds: float = 30.0
    vc_ratio: float = 0.6
    penetration: float = 0.4
    cycles: int = 12
    seed: int = 0

    @property
    def name(self) -> str:
        return (f"red{self.red_seconds:g}_vc{self.vc_ratio:g}_p{self.penetration:g}"
                f"_c{self.cycles}_s{self.seed}")

    def sim_config(self, base: SimConfig = SimConfig()) -> SimConfig:
        signal = dataclasses.replace(base.signal, red=self.red_seconds)
        return base.replace(signal=signal, vc_ratio=self.vc_ratio,
                            penetration_rate=self.penetration, seed=self.seed)


def scenario_grid(penetration: float, seed: int, cycles: int = 12,
                  reds: Sequence[float] = REDS, vcs: Sequence[float] = VC_RATIOS) -> list[ScenarioSpec]:
    """The 3 x 3 signal-plan by demand grid at one penetration rate.

    Every scenario of one grid shares the base seed offset by its grid index,
    so different penetration rates see identical arrival streams.
    """
    out = []
    for i, red in enumerate(reds):
        for j, vc in enumerate(vcs):
            out.append(ScenarioSpec(red, vc, penetration, cycles, seed * 1000 + i * 10 + j))
    return out


def simulate(spec: ScenarioSpec, base: SimConfig = SimConfig()) -> TrajectoryLog:
    return run_scenario(spec.sim_config(base), spec.cycles)


# --------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray    # [n, lanes, cells, 2k] float32
    targets: np.ndarray   # [n, lanes, cells, 2] float32
    times: np.ndarray     # [n] seconds
    scenario: np.ndarray  # [n] index into ``names``
    is_test: np.ndarray   # [n] bool
    names: list[str]
    k: int
    rco: RCOConfig

    def __len__(self):
        return len(self.inputs)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.inputs[mask], self.targets[mask], self.times[mask],
                       self.scenario[mask], self.is_test[mask], self.names, self.k, self.rco)

    @property
    def train(self) -> "Dataset":
        return self.subset(~self.is_test)

    @property
    def test(self) -> "Dataset":
        return self.subset(self.is_test)

    def batch(self) -> Batch:
        return Batch(self.inputs, self.targets)

    def fingerprint(self) -> str:
        return fingerprint(self.inputs, self.targets)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        rco_mod.save_tensor(d / "inputs.f32", self.inputs, k=self.k,
                            cell_length=self.rco.cell_length,
                            normalization=self.rco.free_flow_speed)
        rco_mod.save_tensor(d / "targets.f32", self.targets, k=self.k,
                            cell_length=self.rco.cell_length,
                            normalization=self.rco.free_flow_speed)
        manifest = {
            "k": self.k,
            "rco": dataclasses.asdict(self.rco),
            "names": self.names,
            "times": self.times.tolist(),
            "scenario": self.scenario.tolist(),
            "is_test": self.is_test.astype(int).tolist(),
            "fingerprint": self.fingerprint(),
            "n_train": int((~self.is_test).sum()),
            "n_test": int(self.is_test.sum()),
        }
        (d / "split.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        m = json.loads((d / "split.json").read_text())
        x, _ = rco_mod.load_tensor(d / "inputs.f32")
        y, _ = rco_mod.load_tensor(d / "targets.f32")
        return cls(x, y, np.array(m["times"], dtype=float), np.array(m["scenario"], dtype=int),
                   np.array(m["is_test"], dtype=bool), list(m["names"]), int(m["k"]),
                   RCOConfig(**m["rco"]))


def test_cycles_for(post_warmup_cycles: int) -> int:
    """Last tenth of the post-warm-up cycles (5 of 50 at full scale)."""
    return max(1, int(round(post_warmup_cycles / 10)))


def samples_from_log(log: TrajectoryLog, k: int, rco: RCOConfig):
    """Per-second (window, target) tensors after warm-up, plus times and test flags."""
    cycle = log.config.signal.cycle
    start = int(round(log.warmup_end))
    stop = int(round(log.horizon))
    if start - (k - 1) * rco.interval < 0 or start >= stop:
        raise InsufficientHistoryError(
            f"k={k} needs {k - 1} s of history before t={start}; log covers [0, {stop}]")
    times = np.arange(start, stop, dtype=float)
    first = start - (k - 1)
    frames = {}
    for t in range(first, stop):
        s = log.slice_at(float(t))
        pos, spd, cv = log.position[s], log.speed[s], log.is_cv[s]
        full = encode_arrays(pos, spd, rco)
        part = encode_arrays(pos[cv], spd[cv], rco)
        frames[t] = (np.stack(part, -1), np.stack(full, -1))
    x = np.stack([np.concatenate([frames[int(t) - i][0] for i in range(k)], -1) for t in times])
    y = np.stack([frames[int(t)][1] for t in times])
    post = log.cycles - log.warmup_cycles
    test_from = (log.cycles - test_cycles_for(post)) * cycle
    return x.astype(np.float32), y.astype(np.float32), times, times >= test_from


def build_dataset(logs: Sequence[TrajectoryLog], names: Sequence[str], k: int,
                  rco: Optional[RCOConfig] = None) -> Dataset:
    if not logs:
        raise ValueError("no trajectory logs")
    rco = rco or RCOConfig.from_sim(logs[0].config)
    xs, ys, ts, ss, tests = [], [], [], [], []
    for i, lg in enumerate(logs):
        x, y, t, is_test = samples_from_log(lg, k, rco)
        xs.append(x)
        ys.append(y)
        ts.append(t)
        ss.append(np.full(len(t), i))
        tests.append(is_test)
    return Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ts),
                   np.concatenate(ss), np.concatenate(tests), list(names), k, rco)


# --------------------------------------------------------------------------
# models


def crate_config_for(dataset: Dataset, **overrides) -> CrateConfig:
    return CrateConfig(lanes=dataset.rco.lanes, n_cells=dataset.rco.n_cells, k=dataset.k,
                       **overrides)


def train_model(dataset: Dataset, cfg: TrainConfig, crate_cfg: Optional[CrateConfig] = None,
                checkpoint_dir: Optional[Path] = None, on_epoch=None) -> TrainResult:
    crate_cfg = crate_cfg or crate_config_for(dataset)
    params = init_params(crate_cfg, seed=cfg.seed)
    return train(dataset.batch(), cfg, params, checkpoint_dir=checkpoint_dir, on_epoch=on_epoch)


def _frame(arr: np.ndarray, rco: RCOConfig, t: float = 0.0) -> RCOFrame:
    return RCOFrame(arr[..., 0].astype(np.float64), arr[..., 1].astype(np.float64),
                    rco.cell_length, t)


def predict_frames(params: CrateParams, data: Dataset, d_e: int, batch: int = 256) -> list[RCOFrame]:
    out = []
    for s in range(0, len(data), batch):
        raw, _ = forward(data.inputs[s:s + batch], params)
        for j, r in enumerate(raw):
            i = s + j
            cv = _frame(data.inputs[i, ..., :2], data.rco, data.times[i])
            out.append(postprocess(r, d_e, anchors=cv, cell_length=data.rco.cell_length,
                                   timestamp=float(data.times[i])))
    return out


def baseline_frames(data: Dataset) -> list[RCOFrame]:
    out = []
    for i in range(len(data)):
        win = RCOWindow((_frame(data.inputs[i, ..., :2], data.rco, data.times[i]),))
        out.append(baseline_interpolate(win, data.rco))
    return out


def evaluate(preds: Sequence[RCOFrame], data: Dataset, threshold: float = DEFAULT_THRESHOLD,
             method: str = "model") -> EvalReport:
    targets = [_frame(y, data.rco) for y in data.targets]
    cvs = [_frame(x[..., :2], data.rco) for x in data.inputs]
    groups = [data.names[s] for s in data.scenario]
    return evaluate_frames(preds, targets, cvs, data.rco, threshold, groups, method)


def evaluate_model(params: CrateParams, data: Dataset, d_e: int,
                   threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    return evaluate(predict_frames(params, data, d_e), data, threshold, "model")


def evaluate_baseline(data: Dataset, threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    return evaluate(baseline_frames(data), data, threshold, "interpolation_baseline")


def simulate_grid(specs: Iterable[ScenarioSpec], base: SimConfig = SimConfig()):
    specs = list(specs)
    return [simulate(s, base) for s in specs], [s.name for s in specs]


def desk_train_config(k: int = 4, seed: int = 0, **changes) -> TrainConfig:
    """Training settings of the desk-scale preset."""
    return TrainConfig(batch_size=DESK_BATCH, epochs=DESK_EPOCHS, k=k, seed=seed).replace(**changes)


@dataclass(eq=False)
class TrialResult:
    penetration: float
    k: int
    seed: int
    model: EvalReport
    baseline: EvalReport
    history: list
    coding_profile: list
    params: CrateParams
    dataset_fingerprint: str


def run_trial(penetration: float, k: int, seed: int, cfg: Optional[TrainConfig] = None,
              cycles: int = DESK_CYCLES, crate_overrides: Optional[dict] = None,
              on_epoch=None, base: SimConfig = SimConfig()) -> TrialResult:
    """Simulate the 9-scenario grid, train on it, and score model and baseline on the test split."""
    cfg = cfg or desk_train_config(k, seed)
    if cfg.k != k or cfg.seed != seed:
        cfg = cfg.replace(k=k, seed=seed)
    logs, names = simulate_grid(scenario_grid(penetration, seed, cycles), base)
    data = build_dataset(logs, names, k)
    res = train_model(data.train, cfg, crate_config_for(data, **(crate_overrides or {})),
                      on_epoch=on_epoch)
    test = data.test
    model = evaluate_model(res.params, test, cfg.d_e)
    baseline = evaluate_baseline(test)
    profile = coding_rate_profile(res.params, test.inputs)
    model.coding_rates = profile
    return TrialResult(penetration, k, seed, model, baseline, res.history, profile, res.params,
                       data.fingerprint())
