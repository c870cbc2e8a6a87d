"""Kernel stiffness regressor.

Kernel oracle: ker(s, s') = (s . s') exp(-h ||s - s'||^2), so for
s = (1, 0), s' = (1, 1), h = 0.5 the value is exp(-0.5), and the Gram
diagonal equals the squared input norms.
"""

import json

import numpy as np
import pytest

from viclab import demos as dg
from viclab import spd
from viclab import stiffness_model as sm
from viclab.errors import FormatVersionError, InvalidInputError, ParseError


def factor_targets(mats):
    return np.stack([spd.chol_vec(k) for k in mats])


def small_training_set(rng, m=40):
    """Inputs in the unit ball paired with factors of nearby SPD matrices."""
    inputs = rng.normal(size=(m, 4))
    mats = []
    for s in inputs:
        base = np.diag([3.0 + s[0] ** 2, 2.0 + s[1] ** 2])
        base[0, 1] = base[1, 0] = 0.5 * s[2]
        mats.append(spd.lift_spd(base, floor=0.5))
    return sm.TrainingSet(inputs, factor_targets(mats)), np.stack(mats)


class TestKernel:
    def test_hand_value(self):
        val = sm.kernel_eval([1.0, 0.0], [1.0, 1.0], h=0.5)
        assert val == pytest.approx(np.exp(-0.5))

    def test_vanishes_at_origin(self):
        assert sm.kernel_eval([0.0, 0.0], [1.0, 2.0], h=1.0) == 0.0

    def test_input_validation(self):
        with pytest.raises(InvalidInputError):
            sm.kernel_eval([1.0], [1.0, 2.0])
        with pytest.raises(InvalidInputError):
            sm.kernel_eval(np.eye(2), np.eye(2))

    def test_gram_matches_pairwise_eval(self):
        rng = np.random.default_rng(0)
        s = rng.normal(size=(6, 3))
        g = sm.gram(s, h=0.7)
        for i in range(6):
            for j in range(6):
                assert g[i, j] == pytest.approx(
                    sm.kernel_eval(s[i], s[j], h=0.7), abs=1e-12
                )

    def test_gram_diagonal_is_squared_norm(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(5, 4))
        np.testing.assert_allclose(
            np.diag(sm.gram(s)), np.sum(s * s, axis=1), rtol=1e-12
        )

    def test_gram_symmetric_psd(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            s = rng.normal(size=(rng.integers(2, 30), 4))
            g = sm.gram(s, h=2.0)
            np.testing.assert_array_equal(g, g.T)
            assert np.linalg.eigvalsh(g)[0] >= -1e-9

    def test_gram_validation(self):
        with pytest.raises(InvalidInputError):
            sm.gram(np.empty((0, 3)))
        with pytest.raises(InvalidInputError):
            sm.gram(np.array([[1.0, np.inf]]))

    def test_cross_gram_consistent_with_gram(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=(7, 4))
        np.testing.assert_allclose(
            sm.cross_gram(s, s, h=1.3), sm.gram(s, h=1.3), atol=1e-12
        )

    def test_cross_gram_dimension_check(self):
        with pytest.raises(InvalidInputError):
            sm.cross_gram(np.ones((2, 3)), np.ones((4, 5)))


class TestTrainingSet:
    def test_build_from_demo(self, quick_demo):
        track = quick_demo.gt_stiffness
        ts = sm.build_training_set([quick_demo], [track], stride=10)
        n_rows = len(range(0, quick_demo.n_samples, 10))
        assert ts.inputs.shape == (n_rows, 4)
        assert ts.targets.shape == (n_rows, 3)
        np.testing.assert_array_equal(
            ts.inputs[0], np.concatenate([quick_demo.f[0], quick_demo.x[0]])
        )
        np.testing.assert_allclose(ts.targets[0], spd.chol_vec(track[0]))

    def test_build_validation(self, quick_demo):
        with pytest.raises(InvalidInputError):
            sm.build_training_set([quick_demo], [])
        with pytest.raises(InvalidInputError):
            sm.build_training_set(
                [quick_demo], [quick_demo.gt_stiffness[:-1]]
            )

    def test_pairing_validation(self):
        with pytest.raises(InvalidInputError):
            sm.TrainingSet(np.ones((3, 4)), np.ones((4, 3)))
        with pytest.raises(InvalidInputError):
            sm.TrainingSet(np.ones(3), np.ones((3, 3)))


class TestModel:
    def test_reconstructs_training_targets(self):
        rng = np.random.default_rng(4)
        ts, mats = small_training_set(rng)
        model = sm.train(ts, h=1.0, lam=1e-8)
        pred = model.predict_batch(ts.inputs)
        worst = max(
            np.linalg.norm(p - k) / np.linalg.norm(k)
            for p, k in zip(pred, mats)
        )
        assert worst < 1e-3

    def test_zero_input_predicts_zero_matrix(self):
        rng = np.random.default_rng(5)
        ts, _ = small_training_set(rng)
        model = sm.train(ts)
        assert np.all(model.predict(np.zeros(4)) == 0.0)

    def test_predictions_always_psd(self):
        rng = np.random.default_rng(6)
        ts, _ = small_training_set(rng)
        model = sm.train(ts)
        queries = rng.normal(scale=5.0, size=(50, 4))
        pred = model.predict_batch(queries)
        for p in pred:
            np.testing.assert_allclose(p, p.T, atol=1e-12)
            assert np.linalg.eigvalsh(p)[0] >= -1e-9

    def test_predict_matches_batch(self):
        rng = np.random.default_rng(7)
        ts, _ = small_training_set(rng)
        model = sm.train(ts)
        q = rng.normal(size=4)
        np.testing.assert_allclose(
            model.predict(q), model.predict_batch(q[None])[0], atol=1e-14
        )

    def test_query_validation(self):
        rng = np.random.default_rng(8)
        ts, _ = small_training_set(rng)
        model = sm.train(ts)
        with pytest.raises(InvalidInputError):
            model.predict(np.zeros(3))
        with pytest.raises(InvalidInputError):
            model.predict_batch(np.zeros((2, 5)))

    def test_train_validation(self):
        rng = np.random.default_rng(9)
        ts, _ = small_training_set(rng)
        with pytest.raises(InvalidInputError):
            sm.train(ts, lam=0.0)
        bad = sm.TrainingSet(ts.inputs, ts.targets[:, :2])
        with pytest.raises(InvalidInputError):
            sm.train(bad)
        narrow = sm.TrainingSet(ts.inputs[:, :3], ts.targets)
        with pytest.raises(InvalidInputError):
            sm.train(narrow)

    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        ts, _ = small_training_set(rng)
        model = sm.train(ts)
        path = tmp_path / "model.json"
        model.save(path)
        back = sm.load_model(path)
        assert back.dim == model.dim
        q = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(
            back.predict_batch(q), model.predict_batch(q)
        )

    def test_load_rejects_unknown_format(self, tmp_path):
        rng = np.random.default_rng(11)
        ts, _ = small_training_set(rng)
        path = tmp_path / "model.json"
        sm.train(ts).save(path)
        doc = json.loads(path.read_text())
        doc["format"] = "viclab-stiffness-model/2"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatVersionError):
            sm.load_model(path)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ParseError):
            sm.load_model(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ParseError):
            sm.load_model(bad)


def test_end_to_end_on_generated_demo(quick_demo):
    """Train on the ground-truth track of one demo and read it back."""
    track = quick_demo.gt_stiffness
    ts = sm.build_training_set([quick_demo], [track], stride=5)
    model = sm.train(ts)
    pred = model.predict_batch(ts.inputs)
    dists = [
        spd.spd_distance(
            spd.lift_spd(p, spd.SPD_EIG_FLOOR),
            spd.lift_spd(np.asarray(k), spd.SPD_EIG_FLOOR),
        )
        for p, k in zip(pred, track[::5])
    ]
    # Rows with near-zero state reconstruct poorly by design (the kernel
    # vanishes there); the mean over the demo still stays small.
    assert float(np.mean(dists)) < 0.2
