"""Command-line entry point: ``cvvls <command> [options]``.

Commands
    simulate   run the 9-scenario grid (or one scenario) and write trajectory CSVs
    dataset    simulate and cut windows into a train/test tensor dataset
    train      train a model on a saved dataset, one checkpoint per epoch
    eval       score a trained model and the interpolation baseline
    sweep-k    train and score one model per (k, penetration)
    analyze    per-layer coding-rate profile of a trained model

Every command writes ``<command>_manifest.json`` into its output directory.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .crate_net import CrateConfig, init_params, load_checkpoint
from .errors import (ContractError, EncodingConflictError, InsufficientHistoryError, NumericError,
                     SimulationIntegrityError)
from .evaluation import EvalReport, Tally, coding_rate_profile, depth_trend, sensitivity_sweep
from .pipeline import (DESK_BATCH, DESK_CYCLES, DESK_EPOCHS, PENETRATIONS, REDS, VC_RATIOS,
                       Dataset, ScenarioSpec,
                       build_dataset, crate_config_for, evaluate_baseline, evaluate_model,
                       run_trial, scenario_grid, simulate)
from .trafficsim import SimConfig, max_queue_length, min_gaps, red_light_violations
from .training import TrainConfig, restore_state, save_training_checkpoint, train

log = logging.getLogger("cvvls")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "CVVLS_OUT"

PRESETS = {
    "desk": {"cycles": DESK_CYCLES, "batch_size": DESK_BATCH, "epochs": DESK_EPOCHS,
             "link_length": 200.0},
}
RUN_KEYS = {"cycles": int, "penetration": float, "k": int, "link_length": float,
            "batch_size": int, "epochs": int, "learning_rate": float}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# option plumbing


def _read_ini(path: Optional[str]) -> dict[str, dict[str, str]]:
    if not path:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    parser = configparser.ConfigParser()
    parser.read(path)
    return {s: dict(parser[s]) for s in parser.sections()}


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def _apply_section(obj, section: dict[str, str]):
    """Dataclass copy with fields overridden from an INI section."""
    changes = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in section.items():
        if key not in names:
            raise UsageError(f"unknown setting {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        try:
            changes[key] = value if current is None else _coerce(value, current)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    return dataclasses.replace(obj, **changes)


def _settings(args) -> dict:
    """Merge preset, then INI ``[run]`` section, then explicit flags (later wins)."""
    ini = _read_ini(args.config)
    s = dict(PRESETS[args.preset]) if args.preset else {}
    for key, value in ini.get("run", {}).items():
        if key not in RUN_KEYS:
            raise UsageError(f"unknown setting {key!r} in [run]")
        try:
            s[key] = RUN_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    for section, proto in (("sim", SimConfig()), ("train", TrainConfig()), ("model", CrateConfig())):
        _apply_section(proto, ini.get(section, {}))
    unknown = set(ini) - {"run", "sim", "train", "model"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            s[key] = value
    s["ini"] = ini
    return s


def _train_config(args, s) -> TrainConfig:
    cfg = _apply_section(TrainConfig(), s["ini"].get("train", {}))
    changes = {"seed": args.seed}
    for key in ("batch_size", "epochs", "learning_rate", "k"):
        if key in s:
            changes[key] = s[key]
    for key in ("mu", "d_e"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    return cfg.replace(**changes)


def _crate_overrides(s) -> dict:
    base = _apply_section(CrateConfig(), s["ini"].get("model", {}))
    defaults = CrateConfig()
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(base)
            if getattr(base, f.name) != getattr(defaults, f.name)
            and f.name not in ("lanes", "n_cells", "k")}


def _sim_base(s) -> SimConfig:
    base = _apply_section(SimConfig(), s["ini"].get("sim", {}))
    if "link_length" in s:
        base = base.replace(link_length=float(s["link_length"]))
    return base


def _out_dir(args, name: str) -> Path:
    root = Path(args.out_dir or os.environ.get(OUT_ENV, "runs"))
    d = root / name if args.out_dir is None else root
    d.mkdir(parents=True, exist_ok=True)
    return d


def _jsonable(x):
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    raise TypeError(type(x))


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    seed: int
    settings: dict
    config_hash: str = ""
    outputs: list = dataclasses.field(default_factory=list)
    fingerprints: dict = dataclasses.field(default_factory=dict)
    results: dict = dataclasses.field(default_factory=dict)
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    started: float = dataclasses.field(default_factory=time.time)
    seconds: float = 0.0

    def write(self, directory: Path) -> Path:
        self.seconds = round(time.time() - self.started, 3)
        path = directory / f"{self.command.replace('-', '_')}_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True,
                                   default=_jsonable))
        return path


def _manifest(args, s) -> RunManifest:
    settings = {k: v for k, v in s.items() if k != "ini"}
    settings["ini"] = s["ini"]
    blob = json.dumps([args.command, args.seed, settings], sort_keys=True, default=str)
    return RunManifest(args.command, list(args.argv), args.seed, settings,
                       hashlib.sha256(blob.encode()).hexdigest()[:16])


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


# --------------------------------------------------------------------------
# commands


def _simulate_one(job):
    spec, base = job
    return simulate(spec, base)


def _simulate_specs(specs: Sequence[ScenarioSpec], base: SimConfig, jobs: int):
    if jobs > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_simulate_one, [(sp, base) for sp in specs]))
    return [simulate(sp, base) for sp in specs]


def _specs(args, s) -> list[ScenarioSpec]:
    p = float(s.get("penetration", 0.4))
    cycles = int(s.get("cycles", DESK_CYCLES))
    return scenario_grid(p, args.seed, cycles, args.reds, args.vcs)


def cmd_simulate(args) -> int:
    s = _settings(args)
    out = _out_dir(args, "simulate")
    man = _manifest(args, s)
    specs = _specs(args, s)
    logs = _simulate_specs(specs, _sim_base(s), args.jobs)
    for spec, lg in zip(specs, logs):
        path = lg.to_csv(out / f"{spec.name}.csv")
        man.outputs.append(str(path))
        gaps = min_gaps(lg)
        man.results[spec.name] = {
            "vehicles": lg.n_vehicles(),
            "cv_share": float(_first_flags(lg).mean()) if len(lg) else None,
            "min_gap_m": float(gaps.min()) if len(gaps) else None,
            "red_light_violations": red_light_violations(lg),
            "max_queue_m": max_queue_length(lg),
        }
    man.write(out)
    print(f"wrote {len(logs)} trajectory logs to {out}")
    return EXIT_OK


def _first_flags(lg):
    _, first = np.unique(lg.id, return_index=True)
    return lg.is_cv[first]


def cmd_dataset(args) -> int:
    s = _settings(args)
    out = _out_dir(args, "dataset")
    man = _manifest(args, s)
    specs = _specs(args, s)
    if not specs:
        raise UsageError("scenario grid is empty")
    logs = _simulate_specs(specs, _sim_base(s), args.jobs)
    data = build_dataset(logs, [sp.name for sp in specs], int(s.get("k", 4)))
    data.save(out)
    man.outputs += [str(out / "inputs.f32"), str(out / "targets.f32"), str(out / "split.json")]
    man.fingerprints["dataset"] = data.fingerprint()
    man.results = {"n_train": int((~data.is_test).sum()), "n_test": int(data.is_test.sum()),
                   "penetration": float(s.get("penetration", 0.4))}
    man.write(out)
    print(f"dataset with {len(data)} samples written to {out}")
    return EXIT_OK


def _load_dataset(path) -> Dataset:
    if path is None or not (Path(path) / "split.json").is_file():
        raise UsageError(f"no dataset found at {path!r} (expected split.json)")
    return Dataset.load(path)


def _load_model(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"no model checkpoint at {path!r}")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    s = _settings(args)
    data = _load_dataset(args.data)
    s["k"] = data.k
    cfg = _train_config(args, s)
    out = _out_dir(args, "train")
    man = _manifest(args, s)
    man.settings["train_config"] = dataclasses.asdict(cfg)
    train_set = data.train
    man.fingerprints["train_set"] = train_set.fingerprint()
    curve = out / "loss_curve.csv"
    start, state, history = 0, None, []
    if args.resume:
        params, extra, meta = _load_model(args.resume)
        state = restore_state(params, extra, meta)
        start = int(meta["epoch"]) + 1
        if curve.exists():
            with open(curve) as fh:
                history = [float(r["loss"]) for r in csv.DictReader(fh)][:start]
    else:
        params = init_params(crate_config_for(data, **_crate_overrides(s)), seed=cfg.seed)
    curve.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(history)))

    def on_epoch(epoch, loss):
        history.append(loss)
        with open(curve, "a") as fh:
            fh.write(f"{epoch},{loss!r}\n")
        log.info("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, loss)

    res = train(train_set.batch(), cfg, params, checkpoint_dir=out / "checkpoints", state=state,
                start_epoch=start, on_epoch=on_epoch)
    final = save_training_checkpoint(out / "model.ckpt", res.params, res.state,
                                     max(cfg.epochs - 1, start - 1), cfg)
    man.outputs += [str(final), str(curve)] + [str(p) for p in res.checkpoints]
    man.results = {"history": history, "n_params": res.params.n_params}
    man.write(out)
    if history:
        print(f"trained {max(cfg.epochs - start, 0)} epochs; final loss {history[-1]:.6f}; "
              f"model at {final}")
    else:
        print(f"nothing to train; model at {final}")
    return EXIT_OK


TABLE_COLUMNS = ["penetration", "vc_ratio", "method", "precision", "recall", "f1", "rmse_mps"]


def _vc_of(name: str) -> float:
    return float(name.split("_vc")[1].split("_")[0])


def table_rows(report: EvalReport, penetration: float) -> list[list]:
    """One row per V/C ratio (pooled over signal plans) plus an 'all' row."""
    by_vc: dict[float, Tally] = {}
    for name, sm in report.per_scenario.items():
        t = by_vc.setdefault(_vc_of(name), Tally())
        t.merge(Tally(sm["tp"], sm["fp"], sm["fn"], sm["sq_err"], sm["frames"]))
    rows = []
    for vc in sorted(by_vc):
        sm = by_vc[vc].summary()
        rows.append([penetration, vc, report.method, sm["precision"], sm["recall"], sm["f1"],
                     sm["rmse"]])
    rows.append([penetration, "all", report.method, report.precision, report.recall, report.f1,
                 report.rmse])
    return rows


def cmd_eval(args) -> int:
    s = _settings(args)
    data = _load_dataset(args.data)
    params, _, meta = _load_model(args.model)
    d_e = args.d_e if args.d_e is not None else int(meta.get("train_config", {}).get("d_e", 6))
    out = _out_dir(args, "eval")
    man = _manifest(args, s)
    test = data.test
    reports = [evaluate_model(params, test, d_e, args.threshold)]
    if len(test):
        reports[0].coding_rates = coding_rate_profile(params, test.inputs)
    if args.baseline:
        reports.append(evaluate_baseline(test, args.threshold))
    pen = _penetration_of(data)
    with open(out / "table1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for rep in reports:
            w.writerows(table_rows(rep, pen))
    man.outputs.append(str(out / "table1.csv"))
    for rep in reports:
        path = out / f"report_{rep.method}.json"
        path.write_text(rep.to_json())
        man.outputs.append(str(path))
        man.results[rep.method] = {"precision": rep.precision, "recall": rep.recall, "f1": rep.f1,
                                   "rmse": rep.rmse, "flags": rep.flags}
    man.fingerprints["test_set"] = test.fingerprint()
    man.fingerprints["model"] = hashlib.sha256(Path(args.model).read_bytes()).hexdigest()[:16]
    man.write(out)
    line = "; ".join(f"{r.method} F1 {r.f1:.4f} (P {r.precision:.4f}, R {r.recall:.4f})"
                     for r in reports)
    print(line + (" [empty test set]" if reports[0].flags["empty"] else ""))
    return EXIT_OK


def _penetration_of(data: Dataset) -> float:
    try:
        return float(data.names[0].split("_p")[1].split("_")[0])
    except (IndexError, ValueError):
        return float("nan")


def cmd_sweep_k(args) -> int:
    s = _settings(args)
    out = _out_dir(args, "sweep_k")
    man = _manifest(args, s)
    cycles = int(s.get("cycles", DESK_CYCLES))
    overrides = _crate_overrides(s)
    base = _sim_base(s)

    def runner(k, p):
        cfg = _train_config(args, {**s, "k": k})
        res = run_trial(p, k, args.seed, cfg, cycles, overrides, base=base)
        man.results[f"k{k}_p{p:g}"] = {"f1": res.model.f1, "rmse": res.model.rmse,
                                       "baseline_f1": res.baseline.f1}
        log.info("k=%d p=%g F1 %.4f", k, p, res.model.f1)
        return res.model

    table = sensitivity_sweep(args.k_values, args.penetrations, runner)
    for metric, name in (("f1", "table2_f1.csv"), ("rmse", "table3_rmse.csv")):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"p={p:g}" for p in args.penetrations])
            for k in args.k_values:
                w.writerow([k] + [table[(k, p)][metric] for p in args.penetrations])
        man.outputs.append(str(out / name))
    man.write(out)
    print(f"sweep tables written to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    s = _settings(args)
    data = _load_dataset(args.data)
    params, _, _ = _load_model(args.model)
    out = _out_dir(args, "analyze")
    man = _manifest(args, s)
    profile = coding_rate_profile(params, data.test.inputs)
    rho = depth_trend(profile)
    with open(out / "coding_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mean_coding_rate"])
        w.writerows([[i + 1, r] for i, r in enumerate(profile)])
    man.outputs.append(str(out / "coding_profile.csv"))
    man.results = {"profile": profile, "spearman_depth": rho}
    man.write(out)
    print("coding rate by encoder layer: " + ", ".join(f"{r:.3f}" for r in profile)
          + f"; Spearman {rho:+.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [sim], [train], [model] sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for simulation")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV}/<command>)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named settings bundle")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cvvls", description="Vehicle location estimation from "
                                "connected-vehicle data with a white-box transformer.")
    p.add_argument("--version", action="version", version=f"cvvls {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_opts(sp):
        sp.add_argument("--penetration", type=float)
        sp.add_argument("--cycles", type=int)
        sp.add_argument("--reds", type=_parse_floats, default=list(REDS),
                        help="comma-separated red times in seconds")
        sp.add_argument("--vcs", type=_parse_floats, default=list(VC_RATIOS),
                        help="comma-separated V/C ratios")

    def train_opts(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--learning-rate", type=float)
        sp.add_argument("--mu", type=float)
        sp.add_argument("--d-e", type=int)

    sp = sub.add_parser("simulate", parents=[common], help="run scenarios, write trajectories")
    scenario_opts(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("dataset", parents=[common], help="build a windowed tensor dataset")
    scenario_opts(sp)
    sp.add_argument("--k", type=int, help="past CV frames per window")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", parents=[common], help="train on a saved dataset")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--resume", help="checkpoint to resume from")
    train_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="score model and baseline")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", help="model checkpoint")
    sp.add_argument("--threshold", type=float, default=5.0, help="match distance in meters")
    sp.add_argument("--d-e", type=int)
    sp.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=True,
                    help="also score the interpolation baseline")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-k", parents=[common], help="F1/RMSE table over k and penetration")
    sp.add_argument("--k-values", type=_parse_ints, default=[1, 2, 3, 4, 5, 6])
    sp.add_argument("--penetrations", type=_parse_floats, default=list(PENETRATIONS))
    sp.add_argument("--cycles", type=int)
    train_opts(sp)
    sp.set_defaults(func=cmd_sweep_k)

    sp = sub.add_parser("analyze", parents=[common], help="coding-rate profile by layer")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", help="model checkpoint")
    sp.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InsufficientHistoryError, EncodingConflictError, SimulationIntegrityError,
            ContractError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
