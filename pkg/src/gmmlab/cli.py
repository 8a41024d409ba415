"""Experiment harness: ``gmmlab gen|fit|diagnose|summarize``.

Every command reads one JSON config (``--config``) and works inside one output
directory (``--out``, overriding the config's ``out``). Missing config keys
fall back to :data:`DEFAULTS`, a 5-component, 8-dimensional instance with
separation scale 12, fit sizes 5, 10 and 15, and seeds 0 to 9.

Exit codes: 0 success, 2 validation failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from gmmlab.errors import GmmLabError, NumericalAbort, WhiteningFailed
from gmmlab.estimators import MonteCarlo, Quadrature1D, StratifiedMC
from gmmlab.model import MixtureModel, check_assumptions, generate_truth, partition
from gmmlab.tensors import default_delta_close, diagnostics_csv, id_diagnostics, tensor_error, whitening
from gmmlab.trainer import Online, Population, Trajectory, TrainConfig, detect_pruned, init_random, run

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ABORT = 3
SEED_ENV = "GMMLAB_SEED"
LOSS_SEED_OFFSET = 7919
ONLINE_SEED_STRIDE = 1_000_003

DEFAULTS: dict = {
    "out": "gmmlab_out",
    "truth": {"m": 5, "d": 8, "scale": 12.0, "weights": "equal", "seed": 0, "recenter": False},
    "n_list": [5, 10, 15],
    "seeds": list(range(10)),
    "train": {
        "step_size": 1.0,
        "iterations": 5000,
        "target_eps": 5e-4,
        "eps_prime": None,
        "snapshot_every": 100,
        "mode": "population",
        "estimator": {"kind": "stratified", "count": 20000},
        "batch": 50000,
        "loss_count": 20000,
        "weight_max_iters": 1000,
    },
    "diagnose": {"delta_close": None, "delta_close_const": 1.0, "restarts": 32, "iters": 200},
    "summarize": {"threshold": 1e-3, "prune_threshold": 1e-3},
}


class ConfigError(GmmLabError, ValueError):
    """The experiment config is malformed."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and key != "model":
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: Optional[str], out: Optional[str] = None) -> dict:
    """Merge the JSON file over the defaults and apply ``GMMLAB_SEED``."""
    user = {}
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    if out is not None:
        cfg["out"] = out
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV} must be an integer") from err
        if isinstance(cfg["truth"], dict):
            cfg["truth"]["seed"] = seed
        cfg["seeds"] = [seed]
    if not cfg["n_list"] or not cfg["seeds"]:
        raise ConfigError("need at least one fit size and one seed")
    return cfg


def _truth_path(cfg: dict) -> Path:
    return Path(cfg["out"]) / "truth.json"


def build_truth(cfg: dict) -> MixtureModel:
    spec = cfg["truth"]
    if "model" in spec:
        return MixtureModel.from_dict(spec["model"])
    if "path" in spec:
        return MixtureModel.from_json(Path(spec["path"]).read_text())
    return generate_truth(int(spec["m"]), int(spec["d"]), float(spec["scale"]), int(spec["seed"]),
                          spec.get("weights", "equal"), bool(spec.get("recenter", False)))


def _estimator(spec: dict, seed: int):
    kind = spec.get("kind", "stratified")
    if kind == "stratified":
        return StratifiedMC(seed, int(spec["count"]))
    if kind == "montecarlo":
        return MonteCarlo(seed, int(spec["count"]))
    if kind == "quadrature":
        return Quadrature1D(float(spec["grid_lo"]), float(spec["grid_hi"]), int(spec.get("nodes", 4096)))
    raise ConfigError(f"unknown estimator kind {kind!r}")


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    if t["mode"] == "population":
        mode = Population(_estimator(t["estimator"], seed))
    elif t["mode"] == "online":
        mode = Online(int(t["batch"]), ONLINE_SEED_STRIDE * (seed + 1))
    else:
        raise ConfigError(f"unknown mode {t['mode']!r}")
    loss_est = MonteCarlo(seed + LOSS_SEED_OFFSET, int(t["loss_count"])) if t.get("loss_count") else None
    return TrainConfig(step_size=float(t["step_size"]), iterations=int(t["iterations"]),
                       target_eps=float(t["target_eps"]), mode=mode,
                       eps_prime=None if t.get("eps_prime") is None else float(t["eps_prime"]),
                       snapshot_every=int(t["snapshot_every"]), loss_est=loss_est,
                       weight_max_iters=int(t.get("weight_max_iters", 1000)))


def _cell_name(n: int, seed: int) -> str:
    return f"traj_n{n}_s{seed}"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _eprint(*args):
    print(*args, file=sys.stderr)


def cmd_gen(cfg: dict) -> int:
    truth = build_truth(cfg)
    report = check_assumptions(truth, max(cfg["n_list"]))
    out = Path(cfg["out"])
    _write(out / "assumptions.json", json.dumps(report.to_dict(), indent=2) + "\n")
    if not (report.rank_ok and report.separated_ok):
        _eprint(json.dumps(report.to_dict(), indent=2))
        _eprint("assumption check failed: rank_ok=%s separated_ok=%s" % (report.rank_ok, report.separated_ok))
        return EXIT_INVALID
    _write(_truth_path(cfg), truth.to_json())
    print(str(_truth_path(cfg)))
    return EXIT_OK


def _load_truth(cfg: dict) -> MixtureModel:
    path = _truth_path(cfg)
    if not path.exists():
        raise ConfigError(f"missing truth model {path}; run gen first")
    return MixtureModel.from_json(path.read_text())


def _fit_cell(args: Tuple[dict, dict, int, int]) -> Tuple[str, int, str]:
    cfg, truth_dict, n, seed = args
    truth = MixtureModel.from_dict(truth_dict)
    tcfg = train_config(cfg, seed)
    fit0 = init_random(truth, n, seed)
    status = EXIT_OK
    message = ""
    try:
        traj = run(truth, fit0, tcfg)
    except NumericalAbort as err:
        traj = err.trajectory if err.trajectory is not None else Trajectory((), aborted=True)
        status, message = EXIT_ABORT, str(err)
    base = Path(cfg["out"]) / _cell_name(n, seed)
    _write(base.with_suffix(".csv"), traj.to_csv())
    _write(base.with_suffix(".json"), traj.to_json())
    return base.name, status, message


def cmd_fit(cfg: dict, jobs: int = 1) -> int:
    truth = _load_truth(cfg)
    cells = [(cfg, truth.to_dict(), int(n), int(s)) for n in cfg["n_list"] for s in cfg["seeds"]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_cell, cells))
    else:
        results = [_fit_cell(c) for c in cells]
    status = EXIT_OK
    for name, code, msg in results:
        if code != EXIT_OK:
            _eprint(f"{name}: {msg}")
            status = EXIT_ABORT
        else:
            print(name)
    return status


def _trajectory_files(out: Path) -> List[Path]:
    return sorted(out.glob("traj_n*_s*.json"))


def _parse_cell(path: Path) -> Tuple[int, int]:
    n_part, s_part = path.stem[len("traj_"):].split("_")
    return int(n_part[1:]), int(s_part[1:])


def _delta_close(cfg: dict) -> float:
    dg = cfg["diagnose"]
    if dg.get("delta_close") is not None:
        return float(dg["delta_close"])
    eps = float(cfg["train"]["target_eps"]) or float(cfg["summarize"]["threshold"])
    return default_delta_close(eps, float(dg.get("delta_close_const", 1.0)))


def diagnose_trajectory(truth: MixtureModel, traj: Trajectory, delta_close: float,
                        restarts: int = 32, iters: int = 200) -> List[tuple]:
    """(iter, IdDiagnostics, (t2, t3, t4)) per snapshot."""
    W = whitening(truth).W
    rows = []
    for snap in traj.snapshots:
        fit = snap.model
        diag = id_diagnostics(truth, fit, partition(fit, truth), delta_close)
        terr = tuple(tensor_error(truth, fit, k, W, restarts, iters) for k in (2, 3, 4))
        rows.append((snap.iter, diag, terr))
    return rows


def cmd_diagnose(cfg: dict, trajectory: Optional[str] = None) -> int:
    truth = _load_truth(cfg)
    out = Path(cfg["out"])
    files = [Path(trajectory)] if trajectory else _trajectory_files(out)
    if not files:
        _eprint(f"no trajectories in {out}")
        return EXIT_INVALID
    dg = cfg["diagnose"]
    delta = _delta_close(cfg)
    for path in files:
        if not path.exists():
            _eprint(f"missing trajectory {path}")
            return EXIT_INVALID
        traj = Trajectory.from_json(path.read_text())
        if not traj.snapshots:
            _eprint(f"{path} has no snapshots")
            return EXIT_INVALID
        rows = diagnose_trajectory(truth, traj, delta, int(dg["restarts"]), int(dg["iters"]))
        target = out / path.name.replace("traj_", "diag_").replace(".json", ".csv")
        _write(target, diagnostics_csv(rows))
        print(target.name)
    return EXIT_OK


def summarize_dir(out: Path, threshold: float, prune_threshold: float) -> Dict[str, dict]:
    cells: Dict[int, List[Tuple[int, Trajectory]]] = {}
    for path in _trajectory_files(out):
        n, seed = _parse_cell(path)
        traj = Trajectory.from_json(path.read_text())
        if traj.snapshots:
            cells.setdefault(n, []).append((seed, traj))
    summary = {}
    for n in sorted(cells):
        finals = [(seed, tr.final) for seed, tr in sorted(cells[n], key=lambda c: c[0])]
        kls = np.array([f.loss.value for _, f in finals])
        summary[str(n)] = {
            "runs": len(finals),
            "success_fraction": float(np.mean(kls <= threshold)),
            "median_final_kl": float(np.median(kls)),
            "final_kl": {str(seed): float(f.loss.value) for seed, f in finals},
            "pruned_counts": {str(seed): len(detect_pruned(f.model, prune_threshold)) for seed, f in finals},
        }
    return summary


def cmd_summarize(cfg: dict) -> int:
    out = Path(cfg["out"])
    sm = cfg["summarize"]
    summary = summarize_dir(out, float(sm["threshold"]), float(sm["prune_threshold"]))
    if not summary:
        _eprint(f"no trajectories in {out}")
        return EXIT_INVALID
    text = json.dumps({"threshold": float(sm["threshold"]), "by_n": summary}, indent=2) + "\n"
    _write(out / "summary.json", text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "fit", "diagnose", "summarize"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment JSON config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name == "diagnose":
            p.add_argument("--trajectory", help="diagnose a single trajectory JSON")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, max(1, args.jobs))
        if args.command == "diagnose":
            return cmd_diagnose(cfg, args.trajectory)
        return cmd_summarize(cfg)
    except WhiteningFailed as err:
        _eprint(f"whitening failed: {err}")
        return EXIT_INVALID
    except (GmmLabError, KeyError, TypeError) as err:
        _eprint(f"invalid input: {err}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
