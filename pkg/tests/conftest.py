"""Session fixtures shared across the suite.

The full-size pipeline artifacts (10-demo dataset, estimation runs, the
110 s controller grid) are expensive, so they are built once per session
and only when a test actually pulls them in.  Unit tests use the small
``quick_demo`` instead.
"""

import numpy as np
import pytest

from viclab import demos as dg
from viclab import pipelines as pl


@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def base_config():
    return pl.load_config()


@pytest.fixture(scope="session")
def dataset_dir(run_root, base_config):
    out = run_root / "dataset"
    pl.generate_dataset(base_config, out)
    return out


@pytest.fixture(scope="session")
def demos10(dataset_dir):
    return pl.load_dataset(dataset_dir)


@pytest.fixture(scope="session")
def known_dir(run_root, base_config, dataset_dir):
    out = run_root / "estimate_known"
    pl.run_estimation(base_config, out, dataset_dir)
    return out


@pytest.fixture(scope="session")
def sweep_dir(run_root, base_config, dataset_dir):
    cfg = pl.deep_merge(base_config, {"estimator": {"mode": "sweep"}})
    out = run_root / "estimate_sweep"
    pl.run_estimation(cfg, out, dataset_dir)
    return out


@pytest.fixture(scope="session")
def unknown_dir(run_root, base_config, dataset_dir):
    cfg = pl.deep_merge(base_config, {"estimator": {"mode": "unknown"}})
    out = run_root / "estimate_unknown"
    pl.run_estimation(cfg, out, dataset_dir)
    return out


@pytest.fixture(scope="session")
def critical_config(base_config):
    # Separate seed so the critically damped demos are not correlated with
    # the constant-damping dataset.
    return pl.deep_merge(base_config, {
        "seed": 2025,
        "demogen": {"n_demos": 5, "damping": {"type": "critical", "zeta": 2.0}},
        "estimator": {"mode": "critical"},
    })


@pytest.fixture(scope="session")
def critical_dataset_dir(run_root, critical_config):
    out = run_root / "dataset_critical"
    pl.generate_dataset(critical_config, out)
    return out


@pytest.fixture(scope="session")
def critical_dir(run_root, critical_config, critical_dataset_dir):
    out = run_root / "estimate_critical"
    pl.run_estimation(critical_config, out, critical_dataset_dir)
    return out


@pytest.fixture(scope="session")
def model_dir(run_root, base_config, known_dir, dataset_dir):
    out = run_root / "model"
    pl.train_model(base_config, out, known_dir, dataset_dir)
    return out


@pytest.fixture(scope="session")
def grid_dir(run_root, base_config):
    out = run_root / "simulate"
    pl.run_simulations(base_config, out)
    return out


@pytest.fixture(scope="session")
def quick_demo():
    """Short noise-free demonstration with known schedules (2 s, 201 samples)."""
    rng = np.random.default_rng(11)
    params = dg.ImpedanceParams(
        inertia=np.eye(2),
        stiffness=dg.rotating_ellipse_schedule(duration=2.0),
        damping=dg.ConstantSchedule(50.0 * np.eye(2)),
    )
    force = dg.random_multisine_force(rng, 2)
    demo = dg.simulate_msd(params, dg.ZeroReference(2), force, 1e-3, 2.0)
    return demo.decimate(10)
