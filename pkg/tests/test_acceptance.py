"""Acceptance suite: one test per advertised guarantee.

Every test here grades a property the package promises end to end, on
the same full-size artifacts the CLI produces (session fixtures in
conftest.py run the real pipelines once).  Thresholds are pinned; a
failing line names the measured value so the verdict is auditable.

Known reds on this benchmark configuration, kept honest rather than
tuned away: the direct k_c=12 run does not cross the divergence
threshold within the 110 s horizon, the proposed controller trades
tracking error above the original-tank baseline at k_c=12, and the
gate's freeze-and-release mechanism injects real storage jumps, so the
passivity slack sits far above the audit tolerance.
"""

import numpy as np
import pytest
from scipy.stats import spearmanr

from viclab import demos as dg
from viclab import estimation as est
from viclab import pipelines as pl
from viclab import stiffness_model as sm
from viclab import tank_control as tc
from viclab.errors import DegenerateWindowError

TRUE_DAMPING = 50.0


def _medians(summary_path):
    _, rows = pl.read_table(summary_path)
    med = {(r["method"], r["metric"]): r["median"] for r in rows}
    return med, sorted({r["metric"] for r in rows})


def _grid_cells(grid_dir):
    _, rows = pl.read_table(grid_dir / "grid_summary.csv")
    return {(r["mode"], r["k_c"]): r for r in rows}


def test_c01_window_solvers_recover_exactly():
    """All three solvers reproduce K to 1e-5 on exact 2-dof windows."""
    rng = np.random.default_rng(20240101)
    solvers = (est.estimate_sym_weights, est.estimate_lsq_nearest_spd,
               est.estimate_psd_convex)
    checked = 0
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        k = (q * rng.uniform(20.0, 500.0, size=2)) @ q.T
        d = float(rng.uniform(5.0, 80.0))
        e = rng.normal(size=(3, 2))
        ed = rng.normal(size=(3, 2))
        edd = rng.normal(size=(3, 2))
        demo = dg.Demonstration(
            dt=0.01, t=np.arange(3) * 0.01, x=e, v=ed, a=edd,
            f=edd + e @ k.T + d * ed,
            inertia=np.eye(2), reference=dg.ZeroReference(2),
        )
        win = est.build_window(demo, 2, damping=d * np.eye(2))
        if win.degenerate:
            continue
        scale = np.linalg.norm(k)
        for solver in solvers:
            try:
                rel = np.linalg.norm(solver(win) - k) / scale
            except DegenerateWindowError:
                continue
            assert rel <= 1e-5, (
                f"{solver.__name__} relative error {rel:.2e} > 1e-5"
            )
            checked += 1
    assert checked >= 250  # degeneracy is measure-zero for these draws


def test_c02_known_damping_error_levels(known_dir):
    """Median log-Euclidean error <= 0.1; proposed within 1.5x baseline."""
    med, metrics = _medians(known_dir / "errors_summary.csv")
    assert len(metrics) == 3
    for method in ("sym_weights", "nearest_spd", "convex"):
        le = med[(method, "log_euclidean")]
        assert le <= 0.1, f"{method} median log-Euclidean {le:.4f} > 0.1"
    for metric in metrics:
        ratio = med[("sym_weights", metric)] / med[("nearest_spd", metric)]
        assert ratio <= 1.5, f"{metric}: {ratio:.3f}x baseline > 1.5x"


def test_c03_damping_mismatch_sweep(sweep_dir):
    """Wrong-damping sweep: proposed beats baseline at the extreme
    guesses and its error tracks the mismatch magnitude."""
    _, rows = pl.read_table(sweep_dir / "sweep_errors.csv")
    prop = {r["guess"]: r["median_log_euclidean"]
            for r in rows if r["method"] == "sym_weights"}
    base = {r["guess"]: r["median_log_euclidean"]
            for r in rows if r["method"] == "nearest_spd"}
    for guess in (26.0, 58.0):
        assert prop[guess] <= base[guess], (
            f"at guess {guess:g}: proposed {prop[guess]:.4f} > "
            f"baseline {base[guess]:.4f}"
        )
    guesses = sorted(prop)
    rho = float(spearmanr(
        [prop[g] for g in guesses],
        [abs(g - TRUE_DAMPING) for g in guesses],
    ).statistic)
    assert rho >= 0.8, f"Spearman rho {rho:.3f} < 0.8"


def test_c04_unknown_damping_recovery(unknown_dir, known_dir):
    """Joint solve recovers d within 5%; re-estimation stays within 2x
    of the known-damping error level."""
    _, rows = pl.read_table(unknown_dir / "unknown_summary.csv")
    row = rows[0]
    rec = row["mean_recovered_damping"]
    assert abs(rec - TRUE_DAMPING) <= 0.05 * TRUE_DAMPING, (
        f"recovered damping {rec:.3f} not within 5% of {TRUE_DAMPING:g}"
    )
    med, _ = _medians(known_dir / "errors_summary.csv")
    known_le = med[("sym_weights", "log_euclidean")]
    assert row["median_log_euclidean"] <= 2.0 * known_le, (
        f"median log-Euclidean {row['median_log_euclidean']:.4f} > "
        f"2x known run's {known_le:.4f}"
    )


def test_c05_critical_damping_iterations(critical_dir):
    """Alternating estimation: error non-increasing from iteration 2
    on (tol 1e-3 per step), final <= initial."""
    _, rows = pl.read_table(critical_dir / "iterations.csv")
    errs = [r["median_log_euclidean"]
            for r in sorted(rows, key=lambda r: r["iteration"])]
    assert len(errs) >= 2
    steps = np.diff(errs[1:])
    if len(steps):
        assert np.all(steps <= 1e-3), (
            f"error increases after iteration 2: max step {steps.max():+.2e}"
        )
    assert errs[-1] <= errs[0], f"final {errs[-1]:.4f} > initial {errs[0]:.4f}"


def test_c06_solver_timing_envelope(known_dir):
    """Per-window cost: proposed <= 3x nearest-SPD; the convex QP
    reference costs >= 50x the proposed solver."""
    _, rows = pl.read_table(known_dir / "timing.csv")
    times = {r["method"]: r["mean_seconds_per_window"] for r in rows}
    ratio = times["sym_weights"] / times["nearest_spd"]
    assert ratio <= 3.0, f"sym_weights {ratio:.2f}x nearest_spd > 3x"
    ratio = times["convex"] / times["sym_weights"]
    assert ratio >= 50.0, f"convex only {ratio:.1f}x sym_weights < 50x"


def test_c07_model_reconstruction_and_psd(model_dir):
    """Kernel model reconstructs its training set to 0.05 mean error,
    never emits an indefinite matrix, and maps zero state to zero."""
    _, rows = pl.read_table(model_dir / "reconstruction.csv")
    row = rows[0]
    assert row["mean_log_euclidean"] <= 0.05, (
        f"mean log-Euclidean {row['mean_log_euclidean']:.4f} > 0.05"
    )
    assert row["psd_fraction"] == 1.0
    assert row["min_prediction_eigenvalue"] >= -1e-9
    model = sm.load_model(model_dir / "model.json")
    np.testing.assert_array_equal(
        model.predict(np.zeros(2 * model.dim)),
        np.zeros((model.dim, model.dim)),
    )


def test_c08_controller_grid_outcomes(grid_dir):
    """Benchmark grid: direct gains split stable/diverged at k_c 13/12,
    the proposed controller stays stable at k_c=12 with less stiffness
    deviation than the original tank and no worse tracking."""
    cell = _grid_cells(grid_dir)
    problems = []
    for mode, k_c, want in (("direct", 13.0, "stable"),
                            ("direct", 12.0, "diverged"),
                            ("proposed", 12.0, "stable")):
        got = cell[(mode, k_c)]["outcome"]
        if got != want:
            problems.append(f"{mode}/k_c={k_c:g} outcome {got!r}, "
                            f"expected {want!r}")
    prop, orig = cell[("proposed", 12.0)], cell[("original_tank", 12.0)]
    dev_p, dev_o = prop["rms_stiffness_dev"], orig["rms_stiffness_dev"]
    if not dev_p < dev_o:
        problems.append(f"rms stiffness deviation {dev_p:.4f} not below "
                        f"original tank's {dev_o:.4f}")
    rms_p, rms_o = prop["rms_tracking_error"], orig["rms_tracking_error"]
    if not rms_p <= rms_o:
        problems.append(f"rms tracking error {rms_p:.4f} > original "
                        f"tank's {rms_o:.4f}")
    assert not problems, "; ".join(problems)


def test_c09_proposed_passivity(grid_dir):
    """Every proposed run: storage never exceeds its initial level
    beyond tolerance, the tank never goes negative, and the applied
    stiffness is bit-constant inside each gated interval."""
    _, rows = pl.read_table(grid_dir / "grid_summary.csv")
    proposed = [r for r in rows if r["mode"] == "proposed"]
    assert proposed
    problems = []
    for r in proposed:
        bound = 1e-6 * max(r["w0"], 1.0)
        if r["max_passivity_slack"] > bound:
            problems.append(
                f"k_c={r['k_c']:g}: passivity slack "
                f"{r['max_passivity_slack']:.4g} J > {bound:.1e} J"
            )
        if r["min_tank"] < 0.0:
            problems.append(f"k_c={r['k_c']:g}: tank dips to "
                            f"{r['min_tank']:.3e} J")
        log = tc.SimLog.from_csv(grid_dir / f"sim_proposed_kc{r['k_c']:g}.csv")
        gate = np.concatenate([[0.0], log.gate, [0.0]]) > 0.5
        starts = np.flatnonzero(gate[1:] & ~gate[:-1])
        ends = np.flatnonzero(~gate[1:] & gate[:-1])
        for s, e in zip(starts, ends):
            if np.unique(log.k_applied[s:e]).size != 1:
                problems.append(
                    f"k_c={r['k_c']:g}: applied stiffness varies inside "
                    f"the gated interval starting at t={log.t[s]:.3f} s"
                )
    assert not problems, "; ".join(problems)


def test_c10_kernel_psd_and_integrator_order():
    """Gram matrices stay PSD over random input sets; the integrator
    shows fourth-order convergence under step halving."""
    rng = np.random.default_rng(1234)
    worst = np.inf
    for _ in range(100):
        n = int(rng.integers(2, 40))
        dim = int(rng.integers(1, 7))
        s = rng.normal(scale=rng.uniform(0.5, 5.0), size=(n, dim))
        g = sm.gram(s, h=float(rng.uniform(0.3, 3.0)))
        worst = min(worst, float(np.linalg.eigvalsh(g).min()))
    assert worst >= -1e-9, f"Gram min eigenvalue {worst:.2e} < -1e-9"

    params = dg.ImpedanceParams(
        inertia=np.eye(1),
        stiffness=dg.ConstantSchedule([[50.0]]),
        damping=dg.ConstantSchedule([[2.0]]),
    )
    force = dg.MultiSineForce([[3.0]], [[2.0]], [[0.4]])

    def endpoint(dt):
        d = dg.simulate_msd(params, dg.ZeroReference(1), force, dt, 1.0,
                            initial_error=([0.5], [0.0]))
        return d.x[-1, 0]

    ref = endpoint(1.25e-4)
    order = float(np.log2(abs(endpoint(4e-3) - ref)
                          / abs(endpoint(2e-3) - ref)))
    assert order >= 3.5, f"observed order {order:.2f} < 3.5"
