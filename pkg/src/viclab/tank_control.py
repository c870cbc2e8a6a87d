"""Variable stiffness tracking control with an energy-tank safety layer.

The closed loop runs in error coordinates, H e'' + D e' + f(e) = F_ext,
where f(e) applies a time-varying reference stiffness.  Three control
modes share the integrator:

* ``direct``         the reference stiffness is applied unconditionally.
* ``proposed``       stiffness updates are gated on the weighted error
                     (e' + alpha e); while the gate trips, the applied
                     stiffness (and damping) freeze at their last values.
* ``original_tank``  a classic energy tank pays for the power demanded by
                     the stiffness variation and falls back to the constant
                     k_c when it runs empty, resuming once recharged.

Alongside the plant state an energy tank T is integrated.  Its rate is
written in energy form (T = x^2 / 2 combined with the tank-state dynamics
gives an expression free of divisions by the tank state):

    T' = sigma (alpha e^T K e + e'^T D e') - alpha e'^T H e'
         - e'^T (alpha^2 H - K - alpha D) e

with sigma = 1 exactly while T < T_max.  The storage W = V + T, with
V = (e' + alpha e)^T H (e' + alpha e) / 2, is the audited quantity: with
zero external force a passive run keeps W non-increasing, and any energy
the clamp at T = 0 has to create shows up as positive slack.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .demos import control_ref_1dof
from .errors import InvalidInputError, ParseError

SIM_FORMAT = "viclab-simlog/1"

MODES = ("direct", "original_tank", "proposed")

SIM_COLUMNS = [
    "t", "x", "v", "e", "edot", "k_ref", "k_applied",
    "tank_T", "sigma", "gate", "V", "W", "flux",
]


class TankState(NamedTuple):
    """Tank energy plus the charging switch evaluated from it."""

    energy: float
    sigma: float


@dataclass
class PlantParams:
    """Constant inertia and damping of the controlled error dynamics."""

    inertia: np.ndarray
    damping: np.ndarray

    def __post_init__(self):
        self.inertia = np.atleast_2d(np.asarray(self.inertia, dtype=float))
        self.damping = np.atleast_2d(np.asarray(self.damping, dtype=float))
        if self.inertia.shape != self.damping.shape:
            raise InvalidInputError("inertia and damping must share a shape")

    @property
    def dim(self):
        return self.inertia.shape[0]


@dataclass
class ControllerConfig:
    """Settings for one tracking run."""

    mode: str = "proposed"
    k_c: float = 13.0
    dt: float = 1e-3
    duration: float = 110.0
    alpha: float | None = None
    xi: float | None = None
    xi_min: float = 1e-4
    t_max: float = 10.0
    tank_init: float | None = None
    tank_resume: float | None = None
    e_max: float = 1e3
    initial_error: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}; use {MODES}")
        if self.dt <= 0 or self.duration <= 0:
            raise InvalidInputError("dt and duration must be positive")


class TrackingProfile:
    """Reference motion and stiffness wave used by the tracking runs."""

    def __init__(self, k_c):
        self.k_c = float(k_c)
        self.dim = 1

    def sample(self, t):
        tgt = control_ref_1dof(self.k_c, t)
        return (np.atleast_1d(tgt.x), np.atleast_1d(tgt.v),
                np.atleast_1d(tgt.a))

    def stiffness(self, t):
        return np.atleast_2d(control_ref_1dof(self.k_c, t).k)


def select_alpha(damping, inertia):
    """Largest error weight keeping the velocity term dissipative:
    min over the schedule of lambda_min(D_t) / lambda_max(H)."""
    inertia = np.atleast_2d(np.asarray(inertia, dtype=float))
    damping = np.asarray(damping, dtype=float)
    if damping.ndim == 2:
        damping = damping[None]
    if damping.ndim != 3 or damping.shape[0] == 0:
        raise InvalidInputError("damping must be (n, n) or a non-empty (T, n, n)")
    h_max = float(np.linalg.eigvalsh(inertia)[-1])
    d_min = min(float(np.linalg.eigvalsh(d)[0]) for d in damping)
    if h_max <= 0:
        raise InvalidInputError("inertia must be positive definite")
    return d_min / h_max


def compute_xi_default(e0, ed0, inertia, alpha, xi_min=1e-4):
    """Gate threshold from the initial storage: max(V(0) / 10, xi_min)."""
    e0 = np.atleast_1d(np.asarray(e0, dtype=float))
    ed0 = np.atleast_1d(np.asarray(ed0, dtype=float))
    inertia = np.atleast_2d(np.asarray(inertia, dtype=float))
    q = ed0 + alpha * e0
    v0 = 0.5 * float(q @ inertia @ q)
    return max(v0 / 10.0, xi_min)


def gate_stiffness(e, edot, alpha, xi, k_ref, k_prev):
    """Gate one stiffness update.

    Returns (k_applied, violated): the reference stiffness while the
    weighted error stays inside the gate, otherwise the previously applied
    stiffness unchanged (the update rate is pinned to zero).
    """
    e = np.atleast_1d(np.asarray(e, dtype=float))
    edot = np.atleast_1d(np.asarray(edot, dtype=float))
    q = edot + alpha * e
    if float(q @ q) < xi:
        return np.atleast_2d(np.asarray(k_ref, dtype=float)), False
    return np.atleast_2d(np.asarray(k_prev, dtype=float)), True


def tank_rate(e, edot, k_applied, damping, inertia, alpha, sigma):
    """Energy-form tank rate for the given instantaneous state."""
    ke = k_applied @ e
    de = damping @ edot
    coupling = alpha**2 * inertia - k_applied - alpha * damping
    return (
        sigma * (alpha * float(e @ ke) + float(edot @ de))
        - alpha * float(edot @ (inertia @ edot))
        - float(edot @ (coupling @ e))
    )


def tank_step(state, e, edot, k_applied, damping, inertia, alpha, dt,
              t_max=10.0):
    """Advance the tank one step with the state held fixed across it.

    Clamps the energy at zero from below and re-evaluates the charging
    switch against ``t_max``.
    """
    e = np.atleast_1d(np.asarray(e, dtype=float))
    edot = np.atleast_1d(np.asarray(edot, dtype=float))
    k_applied = np.atleast_2d(np.asarray(k_applied, dtype=float))
    damping = np.atleast_2d(np.asarray(damping, dtype=float))
    inertia = np.atleast_2d(np.asarray(inertia, dtype=float))
    rate = tank_rate(e, edot, k_applied, damping, inertia, alpha, state.sigma)
    energy = max(state.energy + dt * rate, 0.0)
    return TankState(energy, 1.0 if energy < t_max else 0.0)


@dataclass
class SimLog:
    """Column-oriented record of one tracking run."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    e: np.ndarray
    edot: np.ndarray
    k_ref: np.ndarray
    k_applied: np.ndarray
    tank: np.ndarray
    sigma: np.ndarray
    gate: np.ndarray
    lyap: np.ndarray       # V
    storage: np.ndarray    # W = V + tank
    flux: np.ndarray       # cumulative external power integral
    outcome: str = "stable"
    t_div: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return self.t.shape[0]

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SIM_COLUMNS)
            for i in range(self.n_steps):
                writer.writerow([
                    format(val, ".17g") for val in (
                        self.t[i], self.x[i], self.v[i], self.e[i],
                        self.edot[i], self.k_ref[i], self.k_applied[i],
                        self.tank[i], self.sigma[i], self.gate[i],
                        self.lyap[i], self.storage[i], self.flux[i],
                    )
                ])
        meta = {
            "format": SIM_FORMAT,
            "outcome": self.outcome,
            "t_div": self.t_div,
            **self.info,
        }
        with open(path.with_suffix(path.suffix + ".meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2)
        return path

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise ParseError(f"no such file: {path}")
        meta_path = path.with_suffix(path.suffix + ".meta.json")
        if not meta_path.exists():
            raise ParseError(f"missing sidecar metadata: {meta_path}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("format") != SIM_FORMAT:
            raise ParseError(f"unsupported log format {meta.get('format')!r}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SIM_COLUMNS:
                raise ParseError("unexpected simulation log header", line=1)
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(SIM_COLUMNS):
                    raise ParseError(
                        f"expected {len(SIM_COLUMNS)} fields, got {len(row)}",
                        line=lineno,
                    )
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ParseError(f"bad float: {exc}", line=lineno) from None
        data = np.asarray(rows)
        info = {k: v for k, v in meta.items()
                if k not in ("format", "outcome", "t_div")}
        return cls(
            t=data[:, 0], x=data[:, 1], v=data[:, 2], e=data[:, 3],
            edot=data[:, 4], k_ref=data[:, 5], k_applied=data[:, 6],
            tank=data[:, 7], sigma=data[:, 8], gate=data[:, 9],
            lyap=data[:, 10], storage=data[:, 11], flux=data[:, 12],
            outcome=meta.get("outcome", "stable"), t_div=meta.get("t_div"),
            info=info,
        )


def run_simulation(cfg, plant=None, ref=None):
    """Integrate one tracking run and return its :class:`SimLog`.

    The plant defaults to the 1-dof benchmark (inertia 10, damping 1);
    the reference to the slow sinusoid with a stiffness wave around
    ``cfg.k_c``.  The plant state and the tank integrate together with
    fixed-step RK4; the applied stiffness and the charging switch hold
    their step-start values across each step.
    """
    plant = plant or PlantParams(inertia=[[10.0]], damping=[[1.0]])
    ref = ref or TrackingProfile(cfg.k_c)
    dim = plant.dim
    h = plant.inertia
    d = plant.damping
    h_inv = np.linalg.inv(h)
    alpha = cfg.alpha if cfg.alpha is not None else select_alpha(d, h)

    rx0, rv0, _ = ref.sample(0.0)
    if cfg.initial_error is None:
        # Plant at rest at the origin while the reference is already moving.
        e = -np.asarray(rx0, dtype=float).reshape(dim)
        ed = -np.asarray(rv0, dtype=float).reshape(dim)
    else:
        e = np.asarray(cfg.initial_error[0], dtype=float).reshape(dim)
        ed = np.asarray(cfg.initial_error[1], dtype=float).reshape(dim)

    xi = cfg.xi if cfg.xi is not None else compute_xi_default(
        e, ed, h, alpha, cfg.xi_min
    )
    tank = cfg.tank_init if cfg.tank_init is not None else (
        1.0 if cfg.mode == "original_tank" else 0.0
    )
    # Once the baseline falls back to k_c it stays there until the tank has
    # recharged to the resume level (defaults to the initial fill).
    resume_level = cfg.tank_resume if cfg.tank_resume is not None else tank
    fallen = False
    k_c_mat = cfg.k_c * np.eye(dim)

    n_steps = int(round(cfg.duration / cfg.dt))
    dt = cfg.dt
    cols = np.full((n_steps + 1, 13), np.nan)
    outcome, t_div = "stable", None
    k_prev = ref.stiffness(0.0)
    n_rows = 0

    for i in range(n_steps + 1):
        t = i * dt
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(ed))
                and np.isfinite(tank)):
            outcome, t_div = "diverged", t
            break
        rx, rv, _ = ref.sample(t)
        k_ref_mat = ref.stiffness(t)
        sigma = 1.0 if tank < cfg.t_max else 0.0

        if cfg.mode == "direct":
            k_app, gate = k_ref_mat, False
        elif cfg.mode == "proposed":
            k_app, gate = gate_stiffness(e, ed, alpha, xi, k_ref_mat, k_prev)
        else:
            # original_tank: the variable part k_ref - k_c demands power
            # -edot (k_ref - k_c) e from the tank; an empty tank facing a
            # positive demand forces the k_c fallback.
            if fallen and tank >= resume_level:
                fallen = False
            if (not fallen and tank <= 0.0
                    and float(ed @ ((k_c_mat - k_ref_mat) @ e)) > 0.0):
                fallen = True
            k_app, gate = (k_c_mat, True) if fallen else (k_ref_mat, False)

        q = ed + alpha * e
        lyap = 0.5 * float(q @ h @ q)
        cols[i] = (
            t, float((rx + e)[0]), float((rv + ed)[0]), float(e[0]),
            float(ed[0]), float(k_ref_mat[0, 0]), float(k_app[0, 0]),
            tank, sigma, float(gate), lyap, lyap + tank, 0.0,
        )
        n_rows = i + 1
        k_prev = k_app

        if float(np.linalg.norm(e)) > cfg.e_max:
            outcome, t_div = "diverged", t
            break
        if i == n_steps:
            break

        if cfg.mode == "original_tank":
            k_var = k_app - k_c_mat

            def trate(ee, dd):
                return (sigma * float(dd @ (d @ dd))
                        - max(-float(dd @ (k_var @ ee)), 0.0))
        else:
            coupling = alpha**2 * h - k_app - alpha * d

            def trate(ee, dd):
                return (
                    sigma * (alpha * float(ee @ (k_app @ ee))
                             + float(dd @ (d @ dd)))
                    - alpha * float(dd @ (h @ dd))
                    - float(dd @ (coupling @ ee))
                )

        def accel(ee, dd):
            return -(h_inv @ (d @ dd + k_app @ ee))

        a1 = accel(e, ed)
        r1 = trate(e, ed)
        e2, d2 = e + 0.5 * dt * ed, ed + 0.5 * dt * a1
        a2 = accel(e2, d2)
        r2 = trate(e2, d2)
        e3, d3 = e + 0.5 * dt * (ed + 0.5 * dt * a1), ed + 0.5 * dt * a2
        a3 = accel(e3, d3)
        r3 = trate(e3, d3)
        e4, d4 = e + dt * (ed + 0.5 * dt * a2), ed + dt * a3
        a4 = accel(e4, d4)
        r4 = trate(e4, d4)
        e = e + (dt / 6.0) * (ed + 2 * d2 + 2 * d3 + d4)
        ed = ed + (dt / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        tank = max(tank + (dt / 6.0) * (r1 + 2 * r2 + 2 * r3 + r4), 0.0)

    data = cols[:n_rows]
    return SimLog(
        t=data[:, 0].copy(), x=data[:, 1].copy(), v=data[:, 2].copy(),
        e=data[:, 3].copy(), edot=data[:, 4].copy(), k_ref=data[:, 5].copy(),
        k_applied=data[:, 6].copy(), tank=data[:, 7].copy(),
        sigma=data[:, 8].copy(), gate=data[:, 9].copy(),
        lyap=data[:, 10].copy(), storage=data[:, 11].copy(),
        flux=data[:, 12].copy(), outcome=outcome, t_div=t_div,
        info={
            "mode": cfg.mode, "k_c": cfg.k_c, "alpha": alpha, "xi": xi,
            "t_max": cfg.t_max, "dt": cfg.dt, "duration": cfg.duration,
            "e_max": cfg.e_max, "tank_resume": resume_level,
            "inertia": plant.inertia.tolist(),
            "damping": plant.damping.tolist(),
        },
    )


@dataclass
class PassivityReport:
    """Summary verdicts of one run's energy bookkeeping."""

    outcome: str
    t_div: float | None
    w0: float
    min_tank: float
    max_passivity_slack: float
    gate_duty: float
    rms_stiffness_dev: float
    rms_tracking_error: float

    def to_dict(self):
        return {
            "outcome": self.outcome,
            "t_div": self.t_div,
            "w0": self.w0,
            "min_tank": self.min_tank,
            "max_passivity_slack": self.max_passivity_slack,
            "gate_duty": self.gate_duty,
            "rms_stiffness_dev": self.rms_stiffness_dev,
            "rms_tracking_error": self.rms_tracking_error,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        return Path(path)


def passivity_audit(log):
    """Evaluate the storage inequality and gating statistics of a run.

    Slack is max_t [W(t) - W(0) - flux(t)]; a passive run keeps it within
    integration tolerance of zero.
    """
    if log.n_steps == 0:
        raise InvalidInputError("empty simulation log")
    w0 = float(log.storage[0])
    slack = float(np.max(log.storage - w0 - log.flux))
    return PassivityReport(
        outcome=log.outcome,
        t_div=log.t_div,
        w0=w0,
        min_tank=float(np.min(log.tank)),
        max_passivity_slack=slack,
        gate_duty=float(np.mean(log.gate)),
        rms_stiffness_dev=float(np.sqrt(np.mean((log.k_applied - log.k_ref) ** 2))),
        rms_tracking_error=float(np.sqrt(np.mean(log.e ** 2))),
    )


def storage_rate_decomposition(log):
    """Check of the damped storage rate along a logged run.

    With V2 = V + e^T (K + alpha D - alpha^2 H) e / 2 the analytic rate is
    e'^T (alpha H - D) e' + e^T Q e, Q = dK/2 + alpha dD/2 - alpha K, with
    the schedule derivatives taken as central differences of the applied
    values.  Returns (residuals, smooth) where ``smooth`` masks interior
    steps away from stiffness jumps; the identity is exact only where the
    applied stiffness varies smoothly.
    """
    alpha = float(log.info["alpha"])
    h = float(np.asarray(log.info["inertia"]).reshape(-1)[0])
    d = float(np.asarray(log.info["damping"]).reshape(-1)[0])
    dt = float(log.info["dt"])
    k = log.k_applied
    beta = k + alpha * d - alpha**2 * h
    v2 = log.lyap + 0.5 * beta * log.e**2
    kdot = np.gradient(k, dt)
    q_gain = 0.5 * kdot - alpha * k
    analytic = (alpha * h - d) * log.edot**2 + q_gain * log.e**2
    v2dot = np.gradient(v2, dt)
    residuals = np.abs(v2dot - analytic)
    # Discontinuities happen exactly where the applied value departs from
    # the schedule (gate freezes, valve holds) and at the kinks on either
    # side of such intervals; the schedule's own motion is smooth.
    held = np.abs(k - log.k_ref) > 1e-12
    near_hold = held.copy()
    for shift in (1, 2):
        near_hold[:-shift] |= held[shift:]
        near_hold[shift:] |= held[:-shift]
    smooth = ~near_hold
    smooth[0] = smooth[-1] = False
    return residuals, smooth
