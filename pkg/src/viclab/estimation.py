"""Sliding-window stiffness estimation from demonstration data.

Each window stacks a few consecutive error samples of the impedance
balance H e'' + K e + D e' = f and solves for the stiffness K that best
explains the force residual y = f - H e'' - D e'.  Three per-window
solvers are provided:

* ``sym_weights``   least squares over the canonical symmetric basis, so
                    the estimate is symmetric by construction; it is only
                    projected to the SPD cone when an eigenvalue falls
                    below the floor.
* ``nearest_spd``   unconstrained least squares K = Y X^T (X X^T)^-1
                    followed by a nearest-SPD projection.
* ``convex``        projected gradient descent on the PSD cone, either on
                    ||K X - Y||_F or on the normal-equations residual
                    ||K X X^T - Y X^T||_F.

Damping handling comes in three modes: a known damping matrix (or
per-sample schedule), an unknown constant scalar estimated jointly and
then averaged, and an iterative scheme that alternates stiffness
estimation with a critically-damped damping model.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.ndimage

from . import spd
from .errors import (
    DegenerateWindowError,
    EstimationError,
    FormatVersionError,
    InvalidInputError,
    ParseError,
    StepSizeError,
)

TIKHONOV = 1e-8
DEGENERATE_SV_RATIO = 1e-10

METHODS = ("sym_weights", "nearest_spd", "convex")


@dataclass
class WindowConfig:
    """Sliding-window settings; windows trail their anchor sample."""

    length: int = 3

    def __post_init__(self):
        if self.length < 2:
            raise InvalidInputError("window length must be at least 2")


@dataclass
class KnownDamping:
    """Damping known up front: a constant matrix or a per-sample schedule."""

    damping: np.ndarray

    def __post_init__(self):
        self.damping = np.asarray(self.damping, dtype=float)
        if self.damping.ndim not in (2, 3):
            raise InvalidInputError("damping must be (n, n) or (T, n, n)")


@dataclass
class UnknownScalarDamping:
    """Damping treated as an unknown constant d * I during estimation."""


@dataclass
class CriticalDamping:
    """Iterative scheme assuming damping is critically matched to stiffness."""

    zeta: float = 2.0
    max_iters: int = 10
    tol: float = 1e-6


@dataclass
class RegressionWindow:
    """One window of the force balance: columns are consecutive samples."""

    errors: np.ndarray       # X, shape (n, L)
    velocities: np.ndarray   # X', shape (n, L)
    targets: np.ndarray      # Y, shape (n, L)
    index: int = 0
    degenerate: bool = False


@dataclass
class EstimationResult:
    """Per-sample stiffness track plus bookkeeping from one estimation run."""

    stiffness: np.ndarray                  # (T, n, n)
    method: str
    mode: str
    window: int
    damping: object = None                 # None, float, or (T, n, n)
    seconds_per_window: float = 0.0
    degenerate: np.ndarray | None = None   # (T,) bool
    converged: bool = True
    iteration_history: list = field(default_factory=list)
    iteration_changes: list = field(default_factory=list)

    @property
    def n_samples(self):
        return self.stiffness.shape[0]

    @property
    def dim(self):
        return self.stiffness.shape[1]


def _window_indices(index, n_samples, length):
    # Trailing window [index - L + 1, index]; the first L - 1 anchors all
    # reuse the first full window so the output has one estimate per sample.
    if n_samples < length:
        raise InvalidInputError(
            f"demonstration has {n_samples} samples, window needs {length}"
        )
    if index < 0 or index >= n_samples:
        raise InvalidInputError(f"window anchor {index} out of range")
    if index < length - 1:
        return np.arange(length)
    return np.arange(index - length + 1, index + 1)


def _is_degenerate(x):
    sv = np.linalg.svd(x, compute_uv=False)
    return sv[-1] <= DEGENERATE_SV_RATIO * max(sv[0], 1.0)


def build_window(demo, index, cfg=None, damping=None):
    """Assemble the regression window anchored at ``index``.

    ``damping`` may be None (velocity term left in the unknowns), a
    constant matrix, or a per-sample (T, n, n) schedule aligned with the
    demonstration.  Targets are y_j = f_j - H e''_j [- D_j e'_j].
    """
    cfg = cfg or WindowConfig()
    idx = _window_indices(index, demo.n_samples, cfg.length)
    e, ed, edd = demo.errors()
    x = e[idx].T
    xd = ed[idx].T
    y = (demo.f[idx] - edd[idx] @ demo.inertia.T).T
    if damping is not None:
        damping = np.asarray(damping, dtype=float)
        if damping.ndim == 2:
            y = y - damping @ xd
        else:
            y = y - np.einsum("tij,jt->it", damping[idx], xd)
    return RegressionWindow(
        errors=x, velocities=xd, targets=y, index=int(index),
        degenerate=_is_degenerate(x),
    )


def _require_usable(win):
    if win.degenerate:
        raise DegenerateWindowError(
            f"window {win.index} has no usable excitation", index=win.index
        )


def estimate_lsq_nearest_spd(win, floor=spd.SPD_EIG_FLOOR):
    """Unconstrained least squares followed by nearest-SPD projection."""
    _require_usable(win)
    x, y = win.errors, win.targets
    a = x @ x.T + TIKHONOV * np.eye(x.shape[0])
    k_hat = np.linalg.solve(a, (y @ x.T).T).T
    return spd.nearest_spd(k_hat, floor=floor)


def _sym_design(x):
    # Row block for sample j holds the n equations sum_i w_i (M_i x_j) = y_j.
    basis = spd.sym_basis_tensor(x.shape[0])
    cols = np.einsum("pij,jl->lip", basis, x)
    return cols.reshape(-1, basis.shape[0]), basis


def _ridge_lstsq(design, rhs, lam=TIKHONOV):
    # Tikhonov-lifted least squares via orthogonal factorization.
    p = design.shape[1]
    aug = np.vstack([design, np.sqrt(lam) * np.eye(p)])
    b = np.concatenate([rhs, np.zeros(p)])
    sol, _, _, _ = scipy.linalg.lstsq(aug, b, lapack_driver="gelsy")
    return sol


def estimate_sym_weights(win, floor=spd.SPD_EIG_FLOOR):
    """Least squares over the symmetric basis weights.

    Solves min_w || sum_i w_i M_i X - Y ||_F with a small Tikhonov lift,
    recombines, and projects to SPD only if an eigenvalue sits below the
    floor.
    """
    _require_usable(win)
    design, basis = _sym_design(win.errors)
    w = _ridge_lstsq(design, win.targets.T.reshape(-1))
    k = np.tensordot(w, basis, axes=1)
    if np.linalg.eigvalsh(k)[0] < floor:
        k = spd.nearest_spd(k, floor=floor)
    return k


def estimate_sym_weights_with_damping(win, floor=spd.SPD_EIG_FLOOR):
    """Joint window solve for symmetric weights plus a scalar damping.

    Returns (K, d) where the velocity term d * e' was estimated alongside
    the stiffness.  The caller decides whether the window carried enough
    excitation to trust d.
    """
    _require_usable(win)
    design, basis = _sym_design(win.errors)
    vel_col = win.velocities.T.reshape(-1, 1)
    design = np.hstack([design, vel_col])
    sol = _ridge_lstsq(design, win.targets.T.reshape(-1))
    k = np.tensordot(sol[:-1], basis, axes=1)
    if np.linalg.eigvalsh(k)[0] < floor:
        k = spd.nearest_spd(k, floor=floor)
    return k, float(sol[-1])


def _psd_project(k):
    k = 0.5 * (k + k.T)
    w, v = np.linalg.eigh(k)
    if w[0] >= 0.0:
        return k
    return (v * np.maximum(w, 0.0)) @ v.T


def estimate_psd_convex(win, variant="normal_equations", iters=500, step=None,
                        floor=spd.SPD_EIG_FLOOR):
    """Projected gradient descent on the PSD cone.

    ``direct`` minimizes ||K X - Y||_F, ``normal_equations`` minimizes
    ||K (X X^T) - Y X^T||_F.  The default step is the inverse Lipschitz
    constant of the gradient.  Ten consecutive objective increases abort
    with a step-size error.

    Descent starts from the PSD projection of the ridge solution rather
    than from zero: on the nearly collinear windows a trajectory produces,
    the gradient barely moves the weak data direction within any sane
    budget, while the warm start is already correct there.
    """
    _require_usable(win)
    x, y = win.errors, win.targets
    n = x.shape[0]
    a = x @ x.T
    lip = float(np.linalg.norm(a, 2))
    if variant == "direct":
        def grad(k):
            return (k @ x - y) @ x.T

        def objective(k):
            return float(np.linalg.norm(k @ x - y))
        default_step = 1.0 / lip
    elif variant == "normal_equations":
        b = y @ x.T

        def grad(k):
            return (k @ a - b) @ a

        def objective(k):
            return float(np.linalg.norm(k @ a - b))
        default_step = 1.0 / lip**2
    else:
        raise InvalidInputError(f"unknown convex variant {variant!r}")
    if iters < 1:
        raise InvalidInputError("iteration budget must be positive")
    step = default_step if step is None else float(step)
    if step <= 0:
        raise InvalidInputError("step must be positive")

    ridge = win.targets @ x.T @ np.linalg.inv(a + TIKHONOV * np.eye(n))
    k = _psd_project(ridge)
    prev_obj = objective(k)
    rising = 0
    for _ in range(iters):
        k = _psd_project(k - step * grad(k))
        obj = objective(k)
        if obj > prev_obj * (1.0 + 1e-12):
            rising += 1
            if rising >= 10:
                raise StepSizeError(
                    f"objective rose for {rising} consecutive iterations; "
                    f"step {step:g} is too large"
                )
        else:
            rising = 0
        prev_obj = obj
    return spd.lift_spd(k, floor=floor)


_SOLVERS = {
    "sym_weights": estimate_sym_weights,
    "nearest_spd": estimate_lsq_nearest_spd,
    "convex": estimate_psd_convex,
}


def _sequence_with_damping(demo, damping, cfg, method, solver_kwargs=None,
                           floor=spd.SPD_EIG_FLOOR):
    """Run one per-window solver over every sample with known damping.

    Degenerate windows inherit the previous estimate (or a floor-lifted
    zero matrix when there is none yet) and are flagged.
    """
    if method not in _SOLVERS:
        raise InvalidInputError(f"unknown method {method!r}; use one of {METHODS}")
    solver = _SOLVERS[method]
    kwargs = dict(solver_kwargs or {})
    cfg = cfg or WindowConfig()
    n = demo.n_samples
    dim = demo.dim
    stiffness = np.empty((n, dim, dim))
    flags = np.zeros(n, dtype=bool)
    last = floor * np.eye(dim)
    times = []
    first = None
    for i in range(n):
        win = build_window(demo, i, cfg, damping=damping)
        if win.degenerate:
            flags[i] = True
            stiffness[i] = last
            continue
        if i >= cfg.length - 1 or first is None:
            t0 = time.perf_counter()
            k = solver(win, floor=floor, **kwargs)
            times.append(time.perf_counter() - t0)
            if i < cfg.length - 1:
                first = k
        else:
            k = first
        stiffness[i] = k
        last = k
    return stiffness, flags, (float(np.mean(times)) if times else 0.0)


def estimate_sequence(demo, mode, cfg=None, method="sym_weights",
                      solver_kwargs=None, floor=spd.SPD_EIG_FLOOR):
    """Estimate the stiffness track of a demonstration.

    ``mode`` selects the damping treatment (:class:`KnownDamping`,
    :class:`UnknownScalarDamping`, or :class:`CriticalDamping`);
    ``method`` the per-window solver.  Every returned stiffness is SPD.
    """
    cfg = cfg or WindowConfig()
    if isinstance(mode, KnownDamping):
        stiffness, flags, secs = _sequence_with_damping(
            demo, mode.damping, cfg, method, solver_kwargs, floor
        )
        return EstimationResult(
            stiffness=stiffness, method=method, mode="known_damping",
            window=cfg.length, damping=mode.damping,
            seconds_per_window=secs, degenerate=flags,
        )
    if isinstance(mode, UnknownScalarDamping):
        if method != "sym_weights":
            raise InvalidInputError(
                "unknown-damping estimation is defined for the sym_weights method"
            )
        return estimate_unknown_damping(demo, cfg, floor=floor)
    if isinstance(mode, CriticalDamping):
        if method != "sym_weights":
            raise InvalidInputError(
                "critically-damped estimation is defined for the sym_weights method"
            )
        return estimate_critical_damping(
            demo, cfg, zeta=mode.zeta, max_iters=mode.max_iters,
            tol=mode.tol, floor=floor,
        )
    raise InvalidInputError(f"unknown estimation mode {mode!r}")


def estimate_unknown_damping(demo, cfg=None, floor=spd.SPD_EIG_FLOOR):
    """Two-pass estimation with damping as an unknown constant d * I.

    Pass one solves each window jointly for symmetric weights and a scalar
    d, averaging d over windows whose joint design is well conditioned.
    Pass two re-runs the stiffness estimation with the averaged damping
    held fixed.
    """
    cfg = cfg or WindowConfig()
    _, ed, _ = demo.errors()
    if float(np.abs(ed).max()) < 1e-12:
        raise EstimationError(
            "velocities vanish everywhere; damping is unidentifiable"
        )
    d_values = []
    times = []
    for i in range(cfg.length - 1, demo.n_samples):
        win = build_window(demo, i, cfg, damping=None)
        if win.degenerate:
            continue
        design, _ = _sym_design(win.errors)
        joint = np.hstack([design, win.velocities.T.reshape(-1, 1)])
        sv = np.linalg.svd(joint, compute_uv=False)
        if sv[-1] <= 1e-8 * max(sv[0], 1.0):
            continue
        t0 = time.perf_counter()
        _, d = estimate_sym_weights_with_damping(win, floor=floor)
        times.append(time.perf_counter() - t0)
        d_values.append(d)
    if not d_values:
        raise EstimationError("no window identified the damping constant")
    d_bar = float(np.mean(d_values))
    damping = d_bar * np.eye(demo.dim)
    stiffness, flags, secs = _sequence_with_damping(
        demo, damping, cfg, "sym_weights", None, floor
    )
    return EstimationResult(
        stiffness=stiffness, method="sym_weights", mode="unknown_damping",
        window=cfg.length, damping=d_bar,
        seconds_per_window=float(np.mean(times)) if times else secs,
        degenerate=flags,
    )


def critical_damping_from_stiffness(stiffness, zeta=2.0,
                                    floor=spd.SPD_EIG_FLOOR):
    """Per-sample damping D_t sharing eigenvectors with K_t, eigenvalues
    zeta * sqrt(eig(K_t))."""
    stiffness = np.asarray(stiffness, dtype=float)
    out = np.empty_like(stiffness)
    for i, k in enumerate(stiffness):
        w, v = np.linalg.eigh(k)
        out[i] = (v * (zeta * np.sqrt(np.maximum(w, floor)))) @ v.T
    return out


def _smooth_spd_track(track, size, floor):
    """Temporal median filter on a stiffness track, re-lifted to SPD.

    Ill-conditioned windows leave isolated spikes in the raw track; fed
    straight into a damping refresh they poison the neighbouring windows
    on the next pass and the alternation spreads the damage instead of
    contracting.  The underlying schedules are smooth, so a short median
    filter removes the spikes at negligible bias.
    """
    smoothed = scipy.ndimage.median_filter(
        track, size=(size, 1, 1), mode="nearest"
    )
    smoothed = 0.5 * (smoothed + np.transpose(smoothed, (0, 2, 1)))
    return np.stack([spd.lift_spd(k, floor) for k in smoothed])


def estimate_critical_damping(demo, cfg=None, zeta=2.0, max_iters=10,
                              tol=1e-6, relax=0.5, smooth=15,
                              floor=spd.SPD_EIG_FLOOR):
    """Alternating stiffness / critically-matched damping estimation.

    Iteration 1 equals the unknown-constant-damping estimate.  Each later
    iteration derives a damping schedule from the current stiffness track
    (median-smoothed over ``smooth`` samples) and re-estimates; the new
    track is blended in with weight ``relax``.  Plain replacement has a
    loop gain above one on weakly excited windows, so both safeguards are
    required for the error to shrink.  Stops early when the mean
    log-Euclidean change between consecutive tracks drops below ``tol``.
    """
    if max_iters < 1:
        raise InvalidInputError("max_iters must be at least 1")
    if not 0.0 < relax <= 1.0:
        raise InvalidInputError("relax must be in (0, 1]")
    if smooth < 1 or smooth % 2 == 0:
        raise InvalidInputError("smooth must be a positive odd sample count")
    cfg = cfg or WindowConfig()
    base = estimate_unknown_damping(demo, cfg, floor=floor)
    history = [base.stiffness]
    changes = []
    converged = False
    damping_schedule = None
    for _ in range(1, max_iters):
        damping_schedule = critical_damping_from_stiffness(
            _smooth_spd_track(history[-1], smooth, floor), zeta=zeta,
            floor=floor,
        )
        stiffness, flags, secs = _sequence_with_damping(
            demo, damping_schedule, cfg, "sym_weights", None, floor
        )
        stiffness = (1.0 - relax) * history[-1] + relax * stiffness
        change = float(np.mean(sequence_distance(stiffness, history[-1])))
        history.append(stiffness)
        changes.append(change)
        if change < tol:
            converged = True
            break
    return EstimationResult(
        stiffness=history[-1], method="sym_weights", mode="critical_damping",
        window=cfg.length,
        damping=damping_schedule if damping_schedule is not None else base.damping,
        seconds_per_window=base.seconds_per_window,
        degenerate=base.degenerate, converged=converged,
        iteration_history=history, iteration_changes=changes,
    )


def sequence_distance(stiffness, reference, metric="log_euclidean"):
    """Per-sample SPD distance between two stiffness tracks."""
    stiffness = np.asarray(stiffness, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if stiffness.shape != reference.shape:
        raise InvalidInputError("stiffness tracks must share a shape")
    return np.array([
        spd.spd_distance(a, b, metric) for a, b in zip(stiffness, reference)
    ])


def error_summary(result, gt_stiffness, metrics=spd.METRICS):
    """Mean/median distance of an estimate against ground truth."""
    out = {}
    for metric in metrics:
        d = sequence_distance(result.stiffness, gt_stiffness, metric)
        out[metric] = {
            "mean": float(np.mean(d)),
            "median": float(np.median(d)),
        }
    return out


RESULT_FORMAT = "viclab-estimate/1"


def save_result(result, times, csv_path, errors=None):
    """Write the stiffness track as CSV plus a sidecar summary document.

    Columns are ``t`` followed by the row-major stiffness entries, with a
    trailing ``d`` column when a scalar damping was recovered.  ``errors``
    (the :func:`error_summary` dict) is embedded in the sidecar when the
    caller has ground truth at hand.
    """
    csv_path = Path(csv_path)
    times = np.asarray(times, dtype=float)
    if times.shape[0] != result.n_samples:
        raise InvalidInputError("one time stamp per stiffness sample required")
    dim = result.dim
    header = ["t"] + [f"k{i + 1}{j + 1}" for i in range(dim) for j in range(dim)]
    scalar_damping = isinstance(result.damping, (int, float))
    if scalar_damping:
        header.append("d")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(result.n_samples):
            row = [times[i], *result.stiffness[i].ravel()]
            if scalar_damping:
                row.append(float(result.damping))
            writer.writerow([f"{v:.17g}" for v in row])
    meta = {
        "format": RESULT_FORMAT,
        "mode": result.mode,
        "method": result.method,
        "window": result.window,
        "dim": dim,
        "n_samples": result.n_samples,
        "seconds_per_window": result.seconds_per_window,
        "converged": result.converged,
        "degenerate_windows": (
            int(np.sum(result.degenerate)) if result.degenerate is not None else 0
        ),
    }
    if scalar_damping:
        meta["damping"] = float(result.damping)
    if result.iteration_changes:
        meta["iteration_changes"] = [float(c) for c in result.iteration_changes]
    if errors is not None:
        meta["errors"] = errors
    with open(csv_path.with_suffix(csv_path.suffix + ".meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    return csv_path


def load_result(csv_path):
    """Load a saved stiffness track; returns (times, stiffness, meta)."""
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(csv_path.suffix + ".meta.json")
    if not csv_path.exists():
        raise ParseError(f"no such file: {csv_path}")
    if not meta_path.exists():
        raise ParseError(f"missing sidecar metadata: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != RESULT_FORMAT:
        raise FormatVersionError(
            f"unsupported estimate format {meta.get('format')!r}"
        )
    dim = int(meta["dim"])
    want = 1 + dim * dim + (1 if "damping" in meta else 0)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty estimate file", line=1) from None
        if len(header) != want:
            raise ParseError(
                f"expected {want} columns for dim {dim}, got {len(header)}",
                line=1,
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != want:
                raise ParseError(
                    f"expected {want} fields, got {len(row)}", line=lineno
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    data = np.asarray(rows, dtype=float)
    if data.shape[0] != int(meta["n_samples"]):
        raise ParseError(
            f"row count {data.shape[0]} does not match metadata "
            f"n_samples {meta['n_samples']}"
        )
    times = data[:, 0]
    stiffness = data[:, 1:1 + dim * dim].reshape(-1, dim, dim)
    return times, stiffness, meta
