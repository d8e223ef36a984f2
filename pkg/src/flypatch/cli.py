"""Command-line pipelines: data generation, surrogate training, attacks,
cross-evaluation against the int8 model, and kidnapping simulations.

Settings come from an optional JSON file (``--config``) whose keys match the
long flag names with dashes turned into underscores; flags given on the
command line win.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import datetime
import json
import logging
import multiprocessing
import platform
import shutil
import sys
from pathlib import Path

import numpy as np

from .attack import METHODS

logger = logging.getLogger("flypatch")

DESK_TARGETS = [[1.0, -1.0, 0.0], [1.0, 1.0, 0.0]]

DEFAULTS = {
    "gen-data": {"seed": 0, "size": 2000, "y_bias": 0.7},
    "train-victim": {"seed": 42, "epochs": 30, "batch_size": 32, "lr": 1e-3, "mse_gate": 0.05,
                     "data": None, "val_data": None},
    "quantize": {"model": None},
    "attack": {"seed": 0, "data": None, "model": None, "method": "joint", "M": 2,
               "targets": DESK_TARGETS, "N": 100, "R": None, "n_joint": None, "trials": 1,
               "dataset_size": None, "train_fraction": 0.9, "split_seed": 0,
               "patch_size": [64, 64], "batch_size": 32, "lr": 1e-3, "augment": True,
               "quantized": False, "init_patch": None, "workers": 1},
    "eval": {"runs": None, "model": None, "data": None},
    "simulate": {"seed": 0, "model": None, "patches": None, "targets": None, "scenario": "ii",
                 "idealized": False, "dt": 0.05, "duration": 30.0, "victim_speed": 0.5,
                 "attacker_speed": 2.0, "standoff": 1.0, "patch_width_m": 0.4,
                 "trajectory": {"type": "sinusoid", "amplitude": 0.5, "period": 20.0}},
}


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


# -- config plumbing ------------------------------------------------------------

def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        unknown = sorted(set(loaded) - set(cfg) - {"out", "force"})
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "func", "log_level") or value is None:
            continue
        cfg[key] = value
    cfg.setdefault("force", False)
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    return cfg


def _require_file(value, what: str) -> Path:
    if not value:
        raise ConfigError(f"{what} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{what} {path} not found")
    return path


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_run_sidecar(out: Path, command: str) -> None:
    """Timestamps and host details live only here so other artifacts stay reproducible."""
    import torch

    _dump_json({"command": command,
                "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "argv": sys.argv[1:], "python": platform.python_version(),
                "numpy": np.__version__, "torch": torch.__version__},
               out / "run.json")


def _artifact_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("out", "force", "workers")}


def _targets(value) -> np.ndarray:
    try:
        t = np.asarray(json.loads(value) if isinstance(value, str) else value, dtype=float)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad target list: {exc}") from exc
    if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
        raise ConfigError("targets must be a non-empty list of [x, y, z]")
    return t


def _load_victim(path, quantized: bool = False):
    from .victim import ModelFormatError, load_model, quantize_model

    try:
        model = load_model(_require_file(path, "--model"))
    except ModelFormatError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return quantize_model(model) if quantized else model


def _load_data(path):
    from .data import load_dataset

    root = _require_file(path, "--data")
    if not (root / "labels.csv").is_file():
        raise ConfigError(f"{root} is not a dataset directory (no labels.csv)")
    return load_dataset(root)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    from .data import sample_dataset, save_dataset

    if int(cfg["size"]) < 1:
        raise ConfigError("--size must be >= 1")
    out = _prepare_out(cfg["out"], cfg["force"])
    ds = sample_dataset(int(cfg["size"]), seed=int(cfg["seed"]), y_bias=float(cfg["y_bias"]))
    save_dataset(ds, out)
    _dump_json(_artifact_config(cfg), out / "config.json")
    _write_run_sidecar(out, "gen-data")
    print(f"wrote {len(ds)} scenes to {out}")
    return 0


def cmd_train_victim(cfg: dict) -> int:
    from .victim import save_model, train_surrogate

    train = _load_data(cfg["data"])
    val = _load_data(cfg["val_data"]) if cfg.get("val_data") else None
    out = _prepare_out(cfg["out"], cfg["force"])
    model = train_surrogate(train, seed=int(cfg["seed"]), epochs=int(cfg["epochs"]), val=val,
                            batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                            mse_gate=float(cfg["mse_gate"]))
    save_model(model, out / "victim.pfvm")
    _dump_json({"val_position_mse": model.val_mse}, out / "train.json")
    _dump_json(_artifact_config(cfg), out / "config.json")
    _write_run_sidecar(out, "train-victim")
    print(f"validation position MSE {model.val_mse:.5f}")
    return 0


def cmd_quantize(cfg: dict) -> int:
    from .victim import save_model

    q = _load_victim(cfg["model"], quantized=True)
    out = _prepare_out(cfg["out"], cfg["force"])
    save_model(q, out / "victim_q.pfvm")
    _dump_json(q.scales, out / "scales.json")
    _write_run_sidecar(out, "quantize")
    print(f"wrote {out / 'victim_q.pfvm'}")
    return 0


def _validate_attack(cfg: dict) -> None:
    if cfg["method"] not in METHODS:
        raise ConfigError(f"invalid method {cfg['method']!r}; choose from {', '.join(METHODS)}")
    if cfg["method"] in ("split", "hybrid") and cfg.get("R") is None:
        raise ConfigError(f"--method {cfg['method']} requires -R")
    for key in ("M", "N", "trials", "workers"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.get("R") is not None and int(cfg["R"]) < 1:
        raise ConfigError("R must be >= 1")
    if not 0 < float(cfg["train_fraction"]) < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    cfg["targets"] = _targets(cfg["targets"]).tolist()
    _require_file(cfg["data"], "--data")
    _require_file(cfg["model"], "--model")
    if cfg.get("init_patch"):
        _require_file(cfg["init_patch"], "--init-patch")


def split_for(cfg: dict):
    """The (train, test) scenes an attack config refers to."""
    from .data import split_dataset

    ds = _load_data(cfg["data"])
    if cfg.get("dataset_size"):
        n = int(cfg["dataset_size"])
        if n > len(ds):
            raise ConfigError(f"dataset_size {n} exceeds the {len(ds)} scenes in {cfg['data']}")
        ds = ds.subset(np.arange(n))
    return split_dataset(ds, float(cfg["train_fraction"]), int(cfg["split_seed"]))


def _write_plot_data(history, per_target, out: Path) -> None:
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "phase", "loss_train", "loss_test"])
        for r in history:
            w.writerow([r["iter"], r["phase"], repr(r["loss_train"]),
                        "" if r["loss_test"] is None else repr(r["loss_test"])])
    with open(out / "per_target.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "loss"])
        for k, v in enumerate(per_target):
            w.writerow([k, repr(v)])


def run_attack_trial(cfg: dict, trial: int, out_dir) -> dict:
    """One seeded attack; writes patches, transforms, metrics and plot data."""
    import torch

    from .attack import AttackSettings, evaluate, optimize, save_patchset, write_metrics
    from .pgm import read_pgm

    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"]) + trial
    model = _load_victim(cfg["model"], bool(cfg["quantized"]))
    train, test = split_for(cfg)
    targets = _targets(cfg["targets"])
    settings = AttackSettings(batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                              augment=bool(cfg["augment"]), patch_size=tuple(cfg["patch_size"]))
    init = read_pgm(cfg["init_patch"]) if cfg.get("init_patch") else None
    ps, metrics = optimize(cfg["method"], model, train.images, test.images, targets, int(cfg["M"]),
                           int(cfg["N"]), seed, R=cfg.get("R"), n_joint=cfg.get("n_joint"),
                           settings=settings, init_patch=init)
    save_patchset(ps, out)
    write_metrics(metrics["history"], out / "metrics.jsonl")
    # final report uses the stored artifact so it matches what eval sees
    final = evaluate(model, test.images, ps, targets, settings=settings)
    _write_plot_data(metrics["history"], final["per_target"], out)
    _dump_json(dict(_artifact_config(cfg), seed=seed, trial=trial), out / "config.json")
    _dump_json(final, out / "final.json")
    return {"trial": trial, "seed": seed, "loss": final["loss"]}


def cmd_attack(cfg: dict) -> int:
    _validate_attack(cfg)
    out = _prepare_out(cfg["out"], cfg["force"])
    _dump_json(_artifact_config(cfg), out / "config.json")
    trials = int(cfg["trials"])
    dirs = [out / f"trial_{t:02d}" for t in range(trials)]
    if int(cfg["workers"]) > 1 and trials > 1:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(int(cfg["workers"]), mp_context=ctx) as pool:
            results = list(pool.map(run_attack_trial, [cfg] * trials, range(trials), dirs))
    else:
        results = [run_attack_trial(cfg, t, d) for t, d in zip(range(trials), dirs)]
    losses = np.array([r["loss"] for r in results])
    _dump_json({"method": cfg["method"], "trials": results, "mean": float(losses.mean()),
                "std": float(losses.std())}, out / "summary.json")
    _write_run_sidecar(out, "attack")
    print(f"{cfg['method']}: mean test loss {losses.mean():.4f} +- {losses.std():.4f} "
          f"over {trials} trial(s)")
    return 0


def _trial_dirs(run: Path):
    dirs = sorted(p for p in run.glob("trial_*") if p.is_dir())
    if not dirs and (run / "transforms.csv").is_file():
        dirs = [run]
    if not dirs:
        raise ConfigError(f"{run} holds no attack artifacts")
    return dirs


def cmd_eval(cfg: dict) -> int:
    """Cross-evaluate attack runs on the full-precision and the int8 victim."""
    from .attack import AttackSettings, evaluate, load_patchset

    runs = cfg.get("runs")
    if not runs:
        raise ConfigError("--runs is required")
    fp = _load_victim(cfg["model"])
    from .victim import quantize_model
    models = {"fp": fp, "q": quantize_model(fp)}
    out = _prepare_out(cfg["out"], cfg["force"])
    cells = []
    for run in map(Path, runs):
        if not (run / "config.json").is_file():
            raise ConfigError(f"{run} has no config.json")
        rcfg = json.loads((run / "config.json").read_text())
        if cfg.get("data"):
            rcfg["data"] = cfg["data"]
        _, test = split_for(rcfg)
        targets = _targets(rcfg["targets"])
        trained_on = "q" if rcfg.get("quantized") else "fp"
        patchsets = []
        for d in _trial_dirs(run):
            ps = load_patchset(d)
            if list(ps.patches.shape[1:]) != list(rcfg["patch_size"]):
                raise ConfigError(f"{d}: patch size {ps.patches.shape[1:]} does not match "
                                  f"config {rcfg['patch_size']}")
            if ps.num_targets != len(targets):
                raise ConfigError(f"{d}: {ps.num_targets} targets in artifacts, "
                                  f"{len(targets)} in config")
            patchsets.append(ps)
        for evaluated_on, model in models.items():
            settings = AttackSettings(dtype=model.conv1.weight.dtype)
            losses = [evaluate(model, test.images, ps, targets, settings=settings)["loss"]
                      for ps in patchsets]
            cells.append({"run": str(run), "method": rcfg["method"], "trained_on": trained_on,
                          "evaluated_on": evaluated_on, "mean": float(np.mean(losses)),
                          "std": float(np.std(losses)), "per_trial": losses})
    _dump_json({"cells": cells}, out / "report.json")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "trained_on", "evaluated_on", "mean", "std", "trials"])
        for c in cells:
            w.writerow([c["method"], c["trained_on"], c["evaluated_on"], repr(c["mean"]),
                        repr(c["std"]), len(c["per_trial"])])
    _write_run_sidecar(out, "eval")
    for c in cells:
        tag = c["method"] + (" (Q)" if c["trained_on"] == "q" else "")
        print(f"{tag:<16} on {c['evaluated_on'].upper():<2}  {c['mean']:.4f} +- {c['std']:.4f}")
    return 0


def cmd_simulate(cfg: dict) -> int:
    from .attack import load_patchset
    from .policy import SCENARIOS, SimConfig, hold_position_error, run_kidnap_episode, \
        trajectory_from_config

    scenario = str(cfg["scenario"])
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}")
    patchset, targets = None, None
    if scenario in ("ii", "iii"):
        pdir = _require_file(cfg.get("patches"), "--patches")
        if not (pdir / "transforms.csv").is_file():
            raise ConfigError(f"{pdir} holds no patch artifacts (transforms.csv)")
        patchset = load_patchset(pdir)
        if cfg.get("targets") is not None:
            targets = _targets(cfg["targets"])
        elif (pdir / "config.json").is_file():
            targets = _targets(json.loads((pdir / "config.json").read_text())["targets"])
        else:
            raise ConfigError("targets unknown: pass --targets or keep the attack's config.json")
        if len(targets) != patchset.num_targets:
            raise ConfigError("target count does not match the patch artifacts")
    model = None if cfg["idealized"] and scenario != "i" else _load_victim(cfg["model"])
    try:
        sim = SimConfig(dt=float(cfg["dt"]), victim_speed=float(cfg["victim_speed"]),
                        attacker_speed=float(cfg["attacker_speed"]), standoff=float(cfg["standoff"]),
                        duration=float(cfg["duration"]), patch_width_m=float(cfg["patch_width_m"]))
        traj = trajectory_from_config(cfg["trajectory"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _prepare_out(cfg["out"], cfg["force"])
    res = run_kidnap_episode(model, patchset, targets, traj, sim, scenario=scenario,
                             idealized=bool(cfg["idealized"]), seed=int(cfg["seed"]))
    res.write_csv(out / "trajectory.csv")
    summary = {"scenario": scenario, "idealized": bool(cfg["idealized"]),
               "tracking_error": res.tracking_error, "mean_error": res.mean_error,
               "hold_baseline_mean_error": hold_position_error(traj, sim)}
    _dump_json(summary, out / "summary.json")
    _dump_json(_artifact_config(cfg), out / "config.json")
    _write_run_sidecar(out, "simulate")
    print(f"scenario {scenario}: mean tracking error {res.mean_error:.4f} m "
          f"(hold-position baseline {summary['hold_baseline_mean_error']:.4f} m)")
    return 0


# -- argument parsing -----------------------------------------------------------

def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flypatch", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", default=None,
                       help="overwrite a non-empty output directory")
        p.set_defaults(func=func)
        return p

    p = common("gen-data", cmd_gen_data, "render a synthetic labelled scene corpus")
    p.add_argument("--size", type=int)
    p.add_argument("--y-bias", type=float)

    p = common("train-victim", cmd_train_victim, "train the surrogate victim")
    p.add_argument("--data")
    p.add_argument("--val-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mse-gate", type=float)

    p = common("quantize", cmd_quantize, "snap a victim model to int8 weights")
    p.add_argument("--model")

    p = common("attack", cmd_attack, "optimize patches and placements")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("-M", type=int, dest="M")
    p.add_argument("-N", type=int, dest="N")
    p.add_argument("-R", type=int, dest="R")
    p.add_argument("--n-joint", type=int)
    p.add_argument("--targets", help='JSON list, e.g. "[[1,-1,0],[1,1,0]]"')
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--dataset-size", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--patch-size", type=int, nargs=2)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--init-patch", help="PGM image used as the initial patch")
    _bool_flag(p, "augment", "training-time augmentation")
    _bool_flag(p, "quantized", "attack the int8-emulated victim")

    p = common("eval", cmd_eval, "cross-evaluate attack runs on FP and int8 victims")
    p.add_argument("--runs", nargs="+")
    p.add_argument("--model")
    p.add_argument("--data", help="override the dataset recorded in each run")

    p = common("simulate", cmd_simulate, "closed-loop kidnapping simulation")
    p.add_argument("--model")
    p.add_argument("--patches", help="attack trial directory")
    p.add_argument("--targets")
    p.add_argument("--scenario")
    _bool_flag(p, "idealized", "replace predictions by the chosen target")
    p.add_argument("--dt", type=float)
    p.add_argument("--duration", type=float)
    p.add_argument("--victim-speed", type=float)
    p.add_argument("--attacker-speed", type=float)
    p.add_argument("--standoff", type=float)
    p.add_argument("--patch-width-m", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(resolve(args.command, args))
    except ConfigError as exc:
        print(f"flypatch {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 1
        logger.debug("failure", exc_info=True)
        print(f"flypatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
