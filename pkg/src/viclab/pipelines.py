"""Experiment pipelines: dataset generation, estimation sweeps, model
training, controller grid simulation.

Each stage reads what the previous one wrote, works from one merged
config document, and drops a ``resolved_config.json`` next to its
outputs so a run directory is self-describing.  Stages are deterministic
given (config, seed); parallel execution fans out over independent
trajectories or grid cells and merges results in index order, so the
output is identical to a sequential run.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import demos as dg
from . import estimation as est
from . import spd
from . import stiffness_model as sm
from . import tank_control as tc
from .errors import ConfigurationError, InvalidInputError, ParseError

DEFAULT_CONFIG = {
    "seed": 2024,
    "out": "runs",
    "demogen": {
        "n_demos": 10,
        "dim": 2,
        "dt": 1e-3,
        "duration": 10.0,
        "stride": 10,
        "inertia": 1.0,
        "stiffness": {
            "type": "rotating_ellipse",
            "k_major": 400.0,
            "k_minor": 100.0,
            "theta_end": math.pi / 4,
            "duration": 10.0,
        },
        "damping": {"type": "constant", "scalar": 50.0},
        "force": {"n_terms": 3, "amp": [1.5, 4.5], "omega": [0.5, 10.0]},
        "noise_std": 0.0,
    },
    "estimator": {
        "mode": "known",
        "methods": ["sym_weights", "nearest_spd", "convex"],
        "window": 3,
        "damping_value": 50.0,
        "sweep_guesses": list(range(26, 59, 4)),
        "zeta": 2.0,
        "max_iters": 10,
        "tol": 1e-6,
        "relax": 0.5,
        "smooth": 15,
    },
    "stiffmodel": {
        "h": 2.0,
        "lam": 1e-8,
        "stride": 10,
        "source_method": "sym_weights",
        "predict_demo": 0,
    },
    "tankvic": {
        "grid": [
            {"mode": "direct", "k_c": 13.0},
            {"mode": "direct", "k_c": 12.0},
            {"mode": "proposed", "k_c": 13.0},
            {"mode": "proposed", "k_c": 12.0},
            {"mode": "original_tank", "k_c": 13.0},
            {"mode": "original_tank", "k_c": 12.0},
        ],
        "dt": 1e-3,
        "duration": 110.0,
        "t_max": 10.0,
        "e_max": 1e3,
    },
}


def deep_merge(base, override):
    """Recursive dict merge; override wins, lists replace wholesale."""
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path=None, seed=None, out=None):
    """Defaults, overlaid with the config file, overlaid with CLI flags."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"no such config file: {path}")
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be an object")
        unknown = set(user) - set(cfg) - {"version"}
        if unknown:
            raise ConfigurationError(
                f"unknown config sections: {sorted(unknown)}"
            )
        cfg = deep_merge(cfg, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    return cfg


def write_resolved_config(cfg, out_dir):
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(cfg, version=__version__)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _damping_schedule(desc, dim):
    """Damping config: either a schedule descriptor or {"scalar": d}."""
    desc = dict(desc)
    if desc.get("type") == "constant" and "scalar" in desc:
        return dg.ConstantSchedule(float(desc["scalar"]) * np.eye(dim))
    if desc.get("type") == "critical" and "stiffness" not in desc:
        raise ConfigurationError(
            "critical damping config needs a nested stiffness descriptor"
        )
    return dg.schedule_from_descriptor(desc)


def _stiffness_schedule(desc, dim):
    desc = dict(desc)
    if desc.get("type") == "constant" and "scalar" in desc:
        return dg.ConstantSchedule(float(desc["scalar"]) * np.eye(dim))
    return dg.schedule_from_descriptor(desc)


def _gen_one(args):
    (index, entropy, gcfg) = args
    dim = int(gcfg["dim"])
    stiffness = _stiffness_schedule(gcfg["stiffness"], dim)
    damping = gcfg["damping"]
    if damping.get("type") == "critical" and "stiffness" not in damping:
        damping = dict(damping, stiffness=stiffness.descriptor())
    damping = _damping_schedule(damping, dim)
    params = dg.ImpedanceParams(
        inertia=float(gcfg["inertia"]) * np.eye(dim),
        stiffness=stiffness,
        damping=damping,
    )
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    fcfg = gcfg["force"]
    force = dg.random_multisine_force(
        rng, dim, n_terms=int(fcfg["n_terms"]),
        amp_range=tuple(fcfg["amp"]), omega_range=tuple(fcfg["omega"]),
    )
    demo = dg.simulate_msd(
        params, dg.ZeroReference(dim), force,
        dt=float(gcfg["dt"]), duration=float(gcfg["duration"]),
        noise_std=float(gcfg.get("noise_std", 0.0)),
        rng=rng,
    )
    demo = demo.decimate(int(gcfg["stride"]))
    demo.meta["index"] = index
    demo.meta["entropy"] = entropy
    return demo


def _pool_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def generate_dataset(cfg, out_dir, jobs=1):
    """Write the demonstration CSVs plus sidecars; returns the paths."""
    gcfg = cfg["demogen"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = int(gcfg["n_demos"])
    if n < 1:
        raise ConfigurationError("n_demos must be at least 1")
    seeds = [int(s.generate_state(1)[0])
             for s in np.random.SeedSequence(int(cfg["seed"])).spawn(n)]
    demos = _pool_map(_gen_one, [(i, seeds[i], gcfg) for i in range(n)], jobs)
    paths = []
    for i, demo in enumerate(demos):
        path = out_dir / f"demo_{i:02d}.csv"
        dg.save_demo(demo, path)
        paths.append(path)
    write_resolved_config(cfg, out_dir)
    return paths


def load_dataset(dataset_dir):
    dataset_dir = Path(dataset_dir)
    paths = sorted(dataset_dir.glob("demo_*.csv"))
    if not paths:
        raise ParseError(f"no demo_*.csv files under {dataset_dir}")
    return [dg.load_demo(p) for p in paths]


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                f"{v:.17g}" if isinstance(v, float) else v for v in row
            ])
    return Path(path)


def read_table(path):
    """CSV table -> (header, list of row dicts with floats where possible)."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such table: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty table", line=1) from None
        rows = []
        for row in reader:
            if not row:
                continue
            rec = {}
            for key, val in zip(header, row):
                try:
                    rec[key] = float(val)
                except ValueError:
                    rec[key] = val
            rows.append(rec)
    return header, rows


def _gt_track(demo):
    if demo.gt_stiffness is None:
        raise ConfigurationError(
            "dataset has no ground-truth stiffness; errors were requested"
        )
    return demo.gt_stiffness


def _estimate_known_one(args):
    (di, demo, method, ecfg) = args
    cfg = est.WindowConfig(length=int(ecfg["window"]))
    damping = est.KnownDamping(
        float(ecfg["damping_value"]) * np.eye(demo.dim)
    )
    result = est.estimate_sequence(demo, damping, cfg=cfg, method=method)
    errors = est.error_summary(result, _gt_track(demo))
    return di, method, result, errors


def _estimate_sweep_one(args):
    (di, demo, method, guess, ecfg) = args
    cfg = est.WindowConfig(length=int(ecfg["window"]))
    damping = est.KnownDamping(float(guess) * np.eye(demo.dim))
    result = est.estimate_sequence(demo, damping, cfg=cfg, method=method)
    dists = est.sequence_distance(result.stiffness, _gt_track(demo))
    return di, method, guess, dists


def run_estimation(cfg, out_dir, dataset_dir, jobs=1):
    """Dispatch on estimator.mode; emits track CSVs and error tables."""
    ecfg = cfg["estimator"]
    mode = ecfg["mode"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    demos = load_dataset(dataset_dir)
    if mode == "known":
        _estimate_known(ecfg, out_dir, demos, jobs)
    elif mode == "sweep":
        _estimate_sweep(ecfg, out_dir, demos, jobs)
    elif mode == "unknown":
        _estimate_unknown(ecfg, out_dir, demos)
    elif mode == "critical":
        _estimate_critical(ecfg, out_dir, demos)
    else:
        raise ConfigurationError(f"unknown estimator mode {mode!r}")
    write_resolved_config(cfg, out_dir)
    return out_dir


def _estimate_known(ecfg, out_dir, demos, jobs):
    tasks = [(di, demo, method, ecfg)
             for method in ecfg["methods"]
             for di, demo in enumerate(demos)]
    results = _pool_map(_estimate_known_one, tasks, jobs)
    by_traj = []
    pooled = {}
    timing = {}
    for di, method, result, errors in results:
        est.save_result(
            result, demos[di].t,
            out_dir / f"track_{method}_{di:02d}.csv", errors=errors,
        )
        for metric, stats in errors.items():
            by_traj.append(
                (method, di, metric, stats["mean"], stats["median"])
            )
        dists = {
            metric: est.sequence_distance(
                result.stiffness, _gt_track(demos[di]), metric
            )
            for metric in errors
        }
        for metric, d in dists.items():
            pooled.setdefault((method, metric), []).append(d)
        timing.setdefault(method, []).append(result.seconds_per_window)
    _write_table(
        out_dir / "errors_by_trajectory.csv",
        ["method", "demo", "metric", "mean", "median"],
        by_traj,
    )
    _write_table(
        out_dir / "errors_summary.csv",
        ["method", "metric", "median", "mean"],
        [
            (method, metric,
             float(np.median(np.concatenate(chunks))),
             float(np.mean(np.concatenate(chunks))))
            for (method, metric), chunks in sorted(pooled.items())
        ],
    )
    _write_table(
        out_dir / "timing.csv",
        ["method", "mean_seconds_per_window"],
        [(m, float(np.mean(v))) for m, v in sorted(timing.items())],
    )


def _estimate_sweep(ecfg, out_dir, demos, jobs):
    guesses = [float(g) for g in ecfg["sweep_guesses"]]
    methods = [m for m in ecfg["methods"] if m != "convex"]
    tasks = [(di, demo, method, guess, ecfg)
             for guess in guesses
             for method in methods
             for di, demo in enumerate(demos)]
    results = _pool_map(_estimate_sweep_one, tasks, jobs)
    pooled = {}
    for di, method, guess, dists in results:
        pooled.setdefault((guess, method), []).append(dists)
    _write_table(
        out_dir / "sweep_errors.csv",
        ["guess", "method", "median_log_euclidean"],
        [
            (f"{guess:g}", method,
             float(np.median(np.concatenate(chunks))))
            for (guess, method), chunks in sorted(pooled.items())
        ],
    )


def _estimate_unknown(ecfg, out_dir, demos):
    cfg = est.WindowConfig(length=int(ecfg["window"]))
    rows = []
    pooled = []
    for di, demo in enumerate(demos):
        result = est.estimate_unknown_damping(demo, cfg)
        errors = est.error_summary(result, _gt_track(demo))
        est.save_result(
            result, demo.t, out_dir / f"track_unknown_{di:02d}.csv",
            errors=errors,
        )
        rows.append(
            (di, float(result.damping),
             errors["log_euclidean"]["median"])
        )
        pooled.append(
            est.sequence_distance(result.stiffness, _gt_track(demo))
        )
    _write_table(
        out_dir / "unknown_damping.csv",
        ["demo", "recovered_damping", "median_log_euclidean"],
        rows,
    )
    _write_table(
        out_dir / "unknown_summary.csv",
        ["n_demos", "mean_recovered_damping", "median_log_euclidean"],
        [(
            len(demos),
            float(np.mean([r[1] for r in rows])),
            float(np.median(np.concatenate(pooled))),
        )],
    )


def _estimate_critical(ecfg, out_dir, demos):
    cfg = est.WindowConfig(length=int(ecfg["window"]))
    per_demo = []
    for di, demo in enumerate(demos):
        result = est.estimate_critical_damping(
            demo, cfg,
            zeta=float(ecfg["zeta"]), max_iters=int(ecfg["max_iters"]),
            tol=float(ecfg["tol"]), relax=float(ecfg["relax"]),
            smooth=int(ecfg["smooth"]),
        )
        est.save_result(
            result, demo.t, out_dir / f"track_critical_{di:02d}.csv",
            errors=est.error_summary(result, _gt_track(demo)),
        )
        per_demo.append(
            [est.sequence_distance(track, _gt_track(demo))
             for track in result.iteration_history]
        )
    n_iters = min(len(tracks) for tracks in per_demo)
    rows = []
    for it in range(n_iters):
        pooled = np.concatenate([tracks[it] for tracks in per_demo])
        rows.append((it + 1, float(np.median(pooled))))
    _write_table(
        out_dir / "iterations.csv",
        ["iteration", "median_log_euclidean"],
        rows,
    )
    _write_table(
        out_dir / "iterations_by_demo.csv",
        ["demo", "iteration", "median_log_euclidean"],
        [
            (di, it + 1, float(np.median(tracks[it])))
            for di, tracks in enumerate(per_demo)
            for it in range(len(tracks))
        ],
    )


def train_model(cfg, out_dir, estimate_dir, dataset_dir):
    """Fit the kernel regressor on saved estimation tracks."""
    mcfg = cfg["stiffmodel"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    demos = load_dataset(dataset_dir)
    method = mcfg["source_method"]
    tracks = []
    for di in range(len(demos)):
        path = Path(estimate_dir) / f"track_{method}_{di:02d}.csv"
        _, stiffness, _ = est.load_result(path)
        tracks.append(stiffness)
    training = sm.build_training_set(demos, tracks, stride=int(mcfg["stride"]))
    model = sm.train(training, h=float(mcfg["h"]), lam=float(mcfg["lam"]))
    model.save(out_dir / "model.json")
    pred = model.predict_batch(training.inputs)
    target = np.stack([
        spd.chol_matrix(vec).T @ spd.chol_matrix(vec)
        for vec in training.targets
    ])
    dists = est.sequence_distance(
        np.stack([spd.lift_spd(p, spd.SPD_EIG_FLOOR) for p in pred]),
        np.stack([spd.lift_spd(t, spd.SPD_EIG_FLOOR) for t in target]),
    )
    eigs = np.array([np.linalg.eigvalsh(p).min() for p in pred])
    _write_table(
        out_dir / "reconstruction.csv",
        ["rows", "mean_log_euclidean", "max_log_euclidean",
         "min_prediction_eigenvalue", "psd_fraction"],
        [(
            int(training.inputs.shape[0]),
            float(np.mean(dists)),
            float(np.max(dists)),
            float(eigs.min()),
            float(np.mean(eigs >= -1e-9)),
        )],
    )
    write_resolved_config(cfg, out_dir)
    return out_dir / "model.json"


def predict_model(cfg, out_dir, model_path, dataset_dir):
    """Predict stiffness along one demo's (force, position) trajectory."""
    mcfg = cfg["stiffmodel"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = sm.load_model(model_path)
    demos = load_dataset(dataset_dir)
    which = int(mcfg.get("predict_demo", 0))
    if not 0 <= which < len(demos):
        raise InvalidInputError(
            f"predict_demo {which} out of range (dataset has {len(demos)})"
        )
    demo = demos[which]
    if demo.dim != model.dim:
        raise InvalidInputError(
            f"model dimension {model.dim} does not match demo dim {demo.dim}"
        )
    queries = np.hstack([demo.f, demo.x])
    pred = model.predict_batch(queries)
    dim = model.dim
    header = ["t"] + [
        f"k{i + 1}{j + 1}" for i in range(dim) for j in range(dim)
    ]
    rows = [
        (float(demo.t[i]), *[float(v) for v in pred[i].ravel()])
        for i in range(len(demo.t))
    ]
    _write_table(out_dir / f"predicted_{which:02d}.csv", header, rows)
    if demo.gt_stiffness is not None:
        dists = est.sequence_distance(
            np.stack([_lift(p) for p in pred]),
            np.stack([_lift(k) for k in demo.gt_stiffness]),
        )
        _write_table(
            out_dir / f"prediction_errors_{which:02d}.csv",
            ["demo", "mean_log_euclidean", "median_log_euclidean"],
            [(which, float(np.mean(dists)), float(np.median(dists)))],
        )
    write_resolved_config(cfg, out_dir)
    return out_dir / f"predicted_{which:02d}.csv"


def _lift(matrix):
    return spd.lift_spd(matrix, spd.SPD_EIG_FLOOR)


def _simulate_one(args):
    (cell, tcfg, out_dir) = args
    cfg = tc.ControllerConfig(
        mode=cell["mode"],
        k_c=float(cell["k_c"]),
        dt=float(tcfg["dt"]),
        duration=float(tcfg["duration"]),
        t_max=float(tcfg["t_max"]),
        e_max=float(tcfg["e_max"]),
        alpha=tcfg.get("alpha"),
        xi=tcfg.get("xi"),
    )
    log = tc.run_simulation(cfg)
    tag = f"{cell['mode']}_kc{cell['k_c']:g}"
    log.to_csv(Path(out_dir) / f"sim_{tag}.csv")
    audit = tc.passivity_audit(log)
    audit.to_json(Path(out_dir) / f"audit_{tag}.json")
    return tag, cell, audit


def run_simulations(cfg, out_dir, jobs=1):
    """Run the controller grid; one log + audit per cell plus a summary."""
    tcfg = cfg["tankvic"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = tcfg["grid"]
    results = _pool_map(
        _simulate_one, [(cell, tcfg, out_dir) for cell in cells], jobs
    )
    rows = []
    for tag, cell, audit in results:
        rows.append((
            cell["mode"], float(cell["k_c"]), audit.outcome,
            -1.0 if audit.t_div is None else float(audit.t_div),
            audit.w0, audit.min_tank, audit.max_passivity_slack,
            audit.gate_duty, audit.rms_stiffness_dev,
            audit.rms_tracking_error,
        ))
    _write_table(
        out_dir / "grid_summary.csv",
        ["mode", "k_c", "outcome", "t_div", "w0", "min_tank",
         "max_passivity_slack", "gate_duty", "rms_stiffness_dev",
         "rms_tracking_error"],
        rows,
    )
    write_resolved_config(cfg, out_dir)
    return out_dir / "grid_summary.csv"
