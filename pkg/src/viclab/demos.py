"""Demonstration generation for impedance tasks.

A demonstration is a fixed-step record of a mass-spring-damper error
system H e'' + K(t) e + D(t) e' = f(t) driven by an external force
profile, expressed in task coordinates x = x_ref + e.  Generation uses
classic fixed-step RK4; the recorded acceleration is evaluated from the
dynamics at each sample, so every stored sample satisfies the impedance
balance exactly regardless of step size.

Position, velocity, acceleration, and force go to a delimited file; the
reference trajectory, the schedules, and the RNG seed travel in a sidecar
metadata document so a loaded demonstration can rebuild its error signals.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigurationError,
    DivergenceError,
    FormatVersionError,
    InvalidInputError,
    ParseError,
)

DEMO_FORMAT = "viclab-demo/1"


# ---------------------------------------------------------------------------
# reference trajectories
# ---------------------------------------------------------------------------

class ZeroReference:
    """Reference fixed at the origin; task coordinates equal the error."""

    def __init__(self, dim):
        if dim < 1:
            raise InvalidInputError("dimension must be positive")
        self.dim = int(dim)

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        shape = t.shape + (self.dim,)
        z = np.zeros(shape)
        return z, z.copy(), z.copy()

    def descriptor(self):
        return {"type": "zero", "dim": self.dim}


class SineReference:
    """Per-axis sinusoid x_i = A_i sin(w_i t + p_i) with analytic derivatives."""

    def __init__(self, amps, omegas, phases=None):
        self.amps = np.atleast_1d(np.asarray(amps, dtype=float))
        self.omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
        if phases is None:
            phases = np.zeros_like(self.amps)
        self.phases = np.atleast_1d(np.asarray(phases, dtype=float))
        if not (self.amps.shape == self.omegas.shape == self.phases.shape):
            raise InvalidInputError("amps, omegas, phases must share a shape")
        self.dim = self.amps.shape[0]

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        arg = np.multiply.outer(t, self.omegas) + self.phases
        x = self.amps * np.sin(arg)
        v = self.amps * self.omegas * np.cos(arg)
        a = -self.amps * self.omegas**2 * np.sin(arg)
        return x, v, a

    def descriptor(self):
        return {
            "type": "sine",
            "amps": self.amps.tolist(),
            "omegas": self.omegas.tolist(),
            "phases": self.phases.tolist(),
        }


def reference_from_descriptor(desc):
    kind = desc.get("type")
    if kind == "zero":
        return ZeroReference(desc["dim"])
    if kind == "sine":
        return SineReference(desc["amps"], desc["omegas"], desc.get("phases"))
    raise ParseError(f"unknown reference descriptor type {kind!r}")


def reference_consistency(ref, dt, duration, h=1e-5):
    """Max finite-difference residual of the reference derivatives.

    Central differences of the sampled position are compared against the
    reported velocity and acceleration on the simulation grid.
    """
    t = np.arange(0.0, duration + 0.5 * dt, dt)
    t = t[t >= h]
    x0, v0, a0 = ref.sample(t)
    xm, _, _ = ref.sample(t - h)
    xp, _, _ = ref.sample(t + h)
    v_fd = (xp - xm) / (2 * h)
    a_fd = (xp - 2 * x0 + xm) / h**2
    rv = float(np.abs(v_fd - v0).max()) if t.size else 0.0
    ra = float(np.abs(a_fd - a0).max()) if t.size else 0.0
    return max(rv, ra)


# ---------------------------------------------------------------------------
# force profiles
# ---------------------------------------------------------------------------

class MultiSineForce:
    """Sum of sinusoids per axis: f_i(t) = sum_h A_hi sin(w_hi t + p_hi)."""

    def __init__(self, amps, omegas, phases):
        self.amps = np.atleast_2d(np.asarray(amps, dtype=float))
        self.omegas = np.atleast_2d(np.asarray(omegas, dtype=float))
        self.phases = np.atleast_2d(np.asarray(phases, dtype=float))
        if not (self.amps.shape == self.omegas.shape == self.phases.shape):
            raise InvalidInputError("force coefficient arrays must share a shape")
        self.dim = self.amps.shape[1]

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        arg = np.multiply.outer(t, self.omegas) + self.phases
        return np.sum(self.amps * np.sin(arg), axis=-2)

    def descriptor(self):
        return {
            "type": "multisine",
            "amps": self.amps.tolist(),
            "omegas": self.omegas.tolist(),
            "phases": self.phases.tolist(),
        }


class ConstantForce:
    def __init__(self, values):
        self.values = np.atleast_1d(np.asarray(values, dtype=float))
        self.dim = self.values.shape[0]

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(self.values, t.shape + (self.dim,)).copy()

    def descriptor(self):
        return {"type": "constant", "values": self.values.tolist()}


def force_from_descriptor(desc):
    kind = desc.get("type")
    if kind == "multisine":
        return MultiSineForce(desc["amps"], desc["omegas"], desc["phases"])
    if kind == "constant":
        return ConstantForce(desc["values"])
    raise ParseError(f"unknown force descriptor type {kind!r}")


def random_multisine_force(rng, dim, n_terms=3, amp_range=(1.5, 4.5),
                           omega_range=(0.5, 10.0)):
    """Draw a distinct multi-sine force rule for one trajectory."""
    amps = rng.uniform(*amp_range, size=(n_terms, dim))
    omegas = rng.uniform(*omega_range, size=(n_terms, dim))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_terms, dim))
    return MultiSineForce(amps, omegas, phases)


# ---------------------------------------------------------------------------
# gain schedules
# ---------------------------------------------------------------------------

class ConstantSchedule:
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def __call__(self, t):
        return self.matrix

    def descriptor(self):
        return {"type": "constant", "matrix": self.matrix.tolist()}


class SampledSchedule:
    """Zero-order-hold schedule over a finite grid; out-of-range queries fail."""

    def __init__(self, times, matrices):
        self.times = np.asarray(times, dtype=float)
        self.matrices = np.asarray(matrices, dtype=float)
        if self.times.ndim != 1 or self.matrices.shape[0] != self.times.shape[0]:
            raise InvalidInputError("one matrix per time stamp required")

    def __call__(self, t):
        if t < self.times[0] - 1e-12 or t > self.times[-1] + 1e-12:
            raise ConfigurationError(
                f"schedule does not cover t={t:g} "
                f"(range {self.times[0]:g}..{self.times[-1]:g})"
            )
        idx = min(np.searchsorted(self.times, t + 1e-12) - 1, len(self.times) - 1)
        return self.matrices[max(idx, 0)]

    def descriptor(self):
        return {
            "type": "sampled",
            "times": self.times.tolist(),
            "matrices": self.matrices.tolist(),
        }


class RotatingEllipseSchedule:
    """Planar stiffness with fixed eigenvalues and a rotating principal axis.

    K(t) = R(theta)^T diag(k_major, k_minor) R(theta) with R the standard
    rotation matrix and theta ramping linearly from 0 to theta_end over the
    duration (clamped afterwards).  The major axis starts on the first
    coordinate and turns clockwise.
    """

    def __init__(self, k_major, k_minor, theta_end, duration):
        if k_major <= 0 or k_minor <= 0:
            raise InvalidInputError("stiffness axes must be positive")
        if duration <= 0:
            raise InvalidInputError("duration must be positive")
        self.k_major = float(k_major)
        self.k_minor = float(k_minor)
        self.theta_end = float(theta_end)
        self.duration = float(duration)
        self._diag = np.diag([self.k_major, self.k_minor])

    def __call__(self, t):
        frac = min(max(t / self.duration, 0.0), 1.0)
        theta = self.theta_end * frac
        c, s = np.cos(theta), np.sin(theta)
        r = np.array([[c, -s], [s, c]])
        return r.T @ self._diag @ r

    def descriptor(self):
        return {
            "type": "rotating_ellipse",
            "k_major": self.k_major,
            "k_minor": self.k_minor,
            "theta_end": self.theta_end,
            "duration": self.duration,
        }


def rotating_ellipse_schedule(k_major=400.0, k_minor=100.0,
                              theta_end=np.pi / 4, duration=10.0):
    return RotatingEllipseSchedule(k_major, k_minor, theta_end, duration)


class CriticalDampingSchedule:
    """Damping matched to a stiffness schedule: D = T^T (zeta sqrt(L)) T
    where K = T^T L T is the eigendecomposition of the stiffness."""

    def __init__(self, stiffness, zeta=2.0):
        self.stiffness = stiffness
        self.zeta = float(zeta)

    def __call__(self, t):
        k = self.stiffness(t)
        w, v = np.linalg.eigh(k)
        return (v * (self.zeta * np.sqrt(np.maximum(w, 0.0)))) @ v.T

    def descriptor(self):
        return {
            "type": "critical",
            "zeta": self.zeta,
            "stiffness": self.stiffness.descriptor(),
        }


def schedule_from_descriptor(desc):
    kind = desc.get("type")
    if kind == "constant":
        return ConstantSchedule(desc["matrix"])
    if kind == "sampled":
        return SampledSchedule(desc["times"], desc["matrices"])
    if kind == "rotating_ellipse":
        return RotatingEllipseSchedule(
            desc["k_major"], desc["k_minor"], desc["theta_end"], desc["duration"]
        )
    if kind == "critical":
        return CriticalDampingSchedule(
            schedule_from_descriptor(desc["stiffness"]), desc["zeta"]
        )
    raise ParseError(f"unknown schedule descriptor type {kind!r}")


@dataclass
class ImpedanceParams:
    """Task-space impedance: constant inertia plus gain schedules."""

    inertia: np.ndarray
    stiffness: object
    damping: object

    def __post_init__(self):
        self.inertia = np.atleast_2d(np.asarray(self.inertia, dtype=float))
        if not callable(self.stiffness) or not callable(self.damping):
            raise InvalidInputError("stiffness and damping must be schedules")


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------

@dataclass
class Demonstration:
    """Fixed-step record of one impedance task execution."""

    dt: float
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    f: np.ndarray
    inertia: np.ndarray
    reference: object
    gt_stiffness: np.ndarray | None = None
    gt_damping: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_samples(self):
        return self.x.shape[0]

    def errors(self):
        """Error coordinates (e, e', e'') relative to the reference."""
        rx, rv, ra = self.reference.sample(self.t)
        return self.x - rx, self.v - rv, self.a - ra

    def residuals(self):
        """Per-sample impedance balance residual ||H e'' + K e + D e' - f||.

        Requires the ground-truth schedules; by construction of the
        generator this is roundoff-level at every retained sample.
        """
        if self.gt_stiffness is None or self.gt_damping is None:
            raise InvalidInputError("residuals need ground-truth schedules")
        e, ed, edd = self.errors()
        lhs = (
            edd @ self.inertia.T
            + np.einsum("tij,tj->ti", self.gt_stiffness, e)
            + np.einsum("tij,tj->ti", self.gt_damping, ed)
        )
        return np.linalg.norm(lhs - self.f, axis=1)

    def decimate(self, stride):
        """Keep every ``stride``-th sample (sample 0 included)."""
        if stride < 1:
            raise InvalidInputError("stride must be >= 1")
        s = slice(None, None, int(stride))
        return Demonstration(
            dt=self.dt * stride,
            t=self.t[s].copy(),
            x=self.x[s].copy(),
            v=self.v[s].copy(),
            a=self.a[s].copy(),
            f=self.f[s].copy(),
            inertia=self.inertia.copy(),
            reference=self.reference,
            gt_stiffness=None if self.gt_stiffness is None else self.gt_stiffness[s].copy(),
            gt_damping=None if self.gt_damping is None else self.gt_damping[s].copy(),
            meta=dict(self.meta, stride=self.meta.get("stride", 1) * int(stride)),
        )


def _describe(obj):
    desc = getattr(obj, "descriptor", None)
    return desc() if callable(desc) else {"type": "opaque"}


def simulate_msd(params, ref, force, dt, duration, initial_error=None,
                 noise_std=0.0, rng=None):
    """Integrate H e'' + K(t) e + D(t) e' = f(t) with fixed-step RK4.

    Returns a :class:`Demonstration` sampled at every step, including the
    ground-truth schedules.  The recorded acceleration comes from the
    dynamics themselves, so the impedance balance holds exactly at each
    sample.  Optional zero-mean Gaussian noise perturbs only the recorded
    force, never the dynamics.
    """
    if dt <= 0 or duration <= 0:
        raise InvalidInputError("dt and duration must be positive")
    h = np.atleast_2d(np.asarray(params.inertia, dtype=float))
    dim = h.shape[0]
    h_inv = np.linalg.inv(h)
    n_steps = int(round(duration / dt))

    if initial_error is None:
        e = np.zeros(dim)
        ed = np.zeros(dim)
    else:
        e = np.asarray(initial_error[0], dtype=float).reshape(dim)
        ed = np.asarray(initial_error[1], dtype=float).reshape(dim)

    def accel(t, e, ed):
        k = np.asarray(params.stiffness(t), dtype=float)
        d = np.asarray(params.damping(t), dtype=float)
        return h_inv @ (force.sample(t) - k @ e - d @ ed)

    t_grid = np.arange(n_steps + 1) * dt
    es = np.empty((n_steps + 1, dim))
    eds = np.empty_like(es)
    edds = np.empty_like(es)
    fs = np.empty_like(es)
    gk = np.empty((n_steps + 1, dim, dim))
    gd = np.empty_like(gk)

    for i, t in enumerate(t_grid):
        gk[i] = params.stiffness(t)
        gd[i] = params.damping(t)
        fs[i] = force.sample(t)
        es[i] = e
        eds[i] = ed
        edds[i] = h_inv @ (fs[i] - gk[i] @ e - gd[i] @ ed)
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(ed))):
            raise DivergenceError(f"state became non-finite at t={t:g}", time=t)
        if i == n_steps:
            break
        k1e, k1v = ed, accel(t, e, ed)
        k2e = ed + 0.5 * dt * k1v
        k2v = accel(t + 0.5 * dt, e + 0.5 * dt * k1e, k2e)
        k3e = ed + 0.5 * dt * k2v
        k3v = accel(t + 0.5 * dt, e + 0.5 * dt * k2e, k3e)
        k4e = ed + dt * k3v
        k4v = accel(t + dt, e + dt * k3e, k4e)
        e = e + (dt / 6.0) * (k1e + 2 * k2e + 2 * k3e + k4e)
        ed = ed + (dt / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)

    rx, rv, ra = ref.sample(t_grid)
    f_rec = fs
    if noise_std > 0.0:
        rng = np.random.default_rng() if rng is None else rng
        f_rec = fs + rng.normal(0.0, noise_std, size=fs.shape)

    return Demonstration(
        dt=dt,
        t=t_grid,
        x=rx + es,
        v=rv + eds,
        a=ra + edds,
        f=f_rec,
        inertia=h.copy(),
        reference=ref,
        gt_stiffness=gk,
        gt_damping=gd,
        meta={
            "force": _describe(force),
            "stiffness": _describe(params.stiffness),
            "damping": _describe(params.damping),
            "noise_std": float(noise_std),
        },
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _fmt(x):
    return format(float(x), ".17g")


def _meta_path(csv_path):
    p = Path(csv_path)
    return p.with_suffix(p.suffix + ".meta.json")


def save_demo(demo, csv_path):
    """Write the sample table plus the sidecar metadata document."""
    csv_path = Path(csv_path)
    dim = demo.dim
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(dim)]
        + [f"v{i + 1}" for i in range(dim)]
        + [f"a{i + 1}" for i in range(dim)]
        + [f"f{i + 1}" for i in range(dim)]
    )
    has_gt = demo.gt_stiffness is not None and demo.gt_damping is not None
    if has_gt:
        header += [f"k{i + 1}{j + 1}" for i in range(dim) for j in range(dim)]
        header += [f"d{i + 1}{j + 1}" for i in range(dim) for j in range(dim)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(demo.n_samples):
            row = [demo.t[i], *demo.x[i], *demo.v[i], *demo.a[i], *demo.f[i]]
            if has_gt:
                row += [*demo.gt_stiffness[i].ravel(), *demo.gt_damping[i].ravel()]
            writer.writerow([_fmt(v) for v in row])
    meta = {
        "format": DEMO_FORMAT,
        "dt": demo.dt,
        "dim": dim,
        "n_samples": demo.n_samples,
        "inertia": demo.inertia.tolist(),
        "reference": demo.reference.descriptor(),
        **{k: v for k, v in demo.meta.items()},
    }
    with open(_meta_path(csv_path), "w") as fh:
        json.dump(meta, fh, indent=2)
    return csv_path


def load_demo(csv_path):
    """Load a demonstration; truncated or malformed files raise ParseError."""
    csv_path = Path(csv_path)
    meta_path = _meta_path(csv_path)
    if not csv_path.exists():
        raise ParseError(f"no such file: {csv_path}")
    if not meta_path.exists():
        raise ParseError(f"missing sidecar metadata: {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != DEMO_FORMAT:
        raise FormatVersionError(
            f"unsupported demo format {meta.get('format')!r}"
        )
    dim = int(meta["dim"])
    n_expected = int(meta["n_samples"])

    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty demo file", line=1) from None
        base_cols = 1 + 4 * dim
        gt_cols = base_cols + 2 * dim * dim
        if len(header) == base_cols:
            has_gt = False
        elif len(header) == gt_cols:
            has_gt = True
        else:
            raise ParseError(
                f"unexpected column count {len(header)} for dim {dim}", line=1
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"bad float: {exc}", line=lineno) from None
    if len(rows) != n_expected:
        raise ParseError(
            f"metadata promises {n_expected} samples, file has {len(rows)}",
            line=len(rows) + 1,
        )
    data = np.asarray(rows)
    t = data[:, 0]
    x = data[:, 1:1 + dim]
    v = data[:, 1 + dim:1 + 2 * dim]
    a = data[:, 1 + 2 * dim:1 + 3 * dim]
    f = data[:, 1 + 3 * dim:1 + 4 * dim]
    gt_k = gt_d = None
    if has_gt:
        k_flat = data[:, base_cols:base_cols + dim * dim]
        d_flat = data[:, base_cols + dim * dim:]
        gt_k = k_flat.reshape(-1, dim, dim)
        gt_d = d_flat.reshape(-1, dim, dim)
    extra = {
        k: v for k, v in meta.items()
        if k not in ("format", "dt", "dim", "n_samples", "inertia", "reference")
    }
    return Demonstration(
        dt=float(meta["dt"]),
        t=t,
        x=x,
        v=v,
        a=a,
        f=f,
        inertia=np.asarray(meta["inertia"], dtype=float),
        reference=reference_from_descriptor(meta["reference"]),
        gt_stiffness=gt_k,
        gt_damping=gt_d,
        meta=extra,
    )


# ---------------------------------------------------------------------------
# 1-dof tracking profile for the controller experiments
# ---------------------------------------------------------------------------

class TrackingTarget(NamedTuple):
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    k: np.ndarray


def control_ref_1dof(k_c, t):
    """Slow positional sinusoid with a faster stiffness wave around k_c.

    x_d(t) = 10 sin(0.1 t), k_d(t) = k_c + 10 sin(t); velocity and
    acceleration are the analytic derivatives.
    """
    t = np.asarray(t, dtype=float)
    x = 10.0 * np.sin(0.1 * t)
    v = np.cos(0.1 * t)
    a = -0.1 * np.sin(0.1 * t)
    k = k_c + 10.0 * np.sin(t)
    return TrackingTarget(x, v, a, k)
