"""Kernel model mapping force/position state to a full stiffness matrix.

Training pairs couple inputs s = (f, x) (external force first, then task
position) with vectorized triangular factors of estimated stiffness
matrices.  The kernel is the product of a linear and a Gaussian term,

    ker(s_i, s_j) = (s_i . s_j) * exp(-h ||s_i - s_j||^2),

which vanishes identically at s = 0, so the model predicts a zero matrix
for zero input by construction.  Predictions rebuild K = L^T L from the
regressed factor vector and are therefore positive semidefinite no matter
how far the query sits from the training data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import spd
from .errors import FormatVersionError, InvalidInputError, ParseError

MODEL_FORMAT = "viclab-stiffness-model/1"


def kernel_eval(s_i, s_j, h=1.0):
    """Product kernel value for a single pair of state vectors."""
    s_i = np.asarray(s_i, dtype=float)
    s_j = np.asarray(s_j, dtype=float)
    if s_i.shape != s_j.shape or s_i.ndim != 1:
        raise InvalidInputError("kernel inputs must be 1-d and equally sized")
    diff = s_i - s_j
    return float(np.dot(s_i, s_j) * np.exp(-h * np.dot(diff, diff)))


def _pairwise_sqdist(a, b, inner):
    na = np.sum(a * a, axis=1)[:, None]
    nb = np.sum(b * b, axis=1)[None, :]
    sq = na + nb - 2.0 * inner
    return np.maximum(sq, 0.0)


def gram(inputs, h=1.0):
    """Kernel matrix of a set of input rows; symmetric and PSD."""
    s = np.asarray(inputs, dtype=float)
    if s.ndim != 2 or s.shape[0] == 0:
        raise InvalidInputError("inputs must be a non-empty (m, d) array")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("inputs contain non-finite entries")
    inner = s @ s.T
    g = inner * np.exp(-h * _pairwise_sqdist(s, s, inner))
    return 0.5 * (g + g.T)


def cross_gram(queries, inputs, h=1.0):
    """Kernel values between query rows and training rows."""
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    s = np.asarray(inputs, dtype=float)
    if q.shape[1] != s.shape[1]:
        raise InvalidInputError(
            f"query dim {q.shape[1]} does not match training dim {s.shape[1]}"
        )
    inner = q @ s.T
    return inner * np.exp(-h * _pairwise_sqdist(q, s, inner))


@dataclass
class TrainingSet:
    """Paired kernel inputs and vectorized stiffness factors."""

    inputs: np.ndarray    # (m, 2n)
    targets: np.ndarray   # (m, n(n+1)/2)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise InvalidInputError("inputs and targets must be 2-d")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise InvalidInputError("inputs and targets must pair up row-wise")


def build_training_set(demos, stiffness_tracks, stride=1):
    """Assemble (force, position) -> factor pairs from estimation output.

    ``stiffness_tracks`` holds one SPD stiffness per retained sample of
    each demonstration; ``stride`` thins the samples.
    """
    if len(demos) != len(stiffness_tracks):
        raise InvalidInputError("one stiffness track per demonstration required")
    rows = []
    targets = []
    for demo, track in zip(demos, stiffness_tracks):
        track = np.asarray(track, dtype=float)
        if track.shape[0] != demo.n_samples:
            raise InvalidInputError("stiffness track does not match demo length")
        for i in range(0, demo.n_samples, int(stride)):
            rows.append(np.concatenate([demo.f[i], demo.x[i]]))
            targets.append(spd.chol_vec(track[i]))
    return TrainingSet(np.asarray(rows), np.asarray(targets))


@dataclass
class KernelStiffnessModel:
    """Trained kernel regressor over stiffness factors."""

    h: float
    lam: float
    dim: int
    inputs: np.ndarray        # (m, 2 * dim)
    coefficients: np.ndarray  # (m, dim(dim+1)/2)

    def predict_factor(self, s):
        """Factor vector(s) for one query or a batch of queries."""
        kv = cross_gram(s, self.inputs, self.h)
        out = kv @ self.coefficients
        return out[0] if np.asarray(s).ndim == 1 else out

    def predict(self, s):
        """Stiffness matrix K = L^T L for a single query state."""
        s = np.asarray(s, dtype=float)
        if s.ndim != 1 or s.shape[0] != 2 * self.dim:
            raise InvalidInputError(
                f"query must have length {2 * self.dim}, got shape {s.shape}"
            )
        vec = self.predict_factor(s)
        l = spd.chol_matrix(vec)
        return l.T @ l

    def predict_batch(self, states):
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 2 * self.dim:
            raise InvalidInputError(
                f"queries must be (m, {2 * self.dim}), got {states.shape}"
            )
        vecs = self.predict_factor(states)
        out = np.empty((states.shape[0], self.dim, self.dim))
        for i, vec in enumerate(vecs):
            l = spd.chol_matrix(vec)
            out[i] = l.T @ l
        return out

    def save(self, path):
        doc = {
            "format": MODEL_FORMAT,
            "h": self.h,
            "lam": self.lam,
            "dim": self.dim,
            "inputs": self.inputs.tolist(),
            "coefficients": self.coefficients.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
        return Path(path)


def train(training_set, h=2.0, lam=1e-8):
    """Kernel ridge fit: coefficients = (Gram + lam I)^-1 targets.

    One Gram factorization is shared across all target columns.  The
    ridge must stay well below the typical diagonal (inputs have norms
    of a few units, so k(s, s) is O(10)) or reconstruction of the
    training targets visibly degrades.
    """
    if lam <= 0:
        raise InvalidInputError("ridge parameter must be positive")
    s = training_set.inputs
    y = training_set.targets
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("targets contain non-finite entries")
    g = gram(s, h)
    m = g.shape[0]
    try:
        cho = scipy.linalg.cho_factor(g + lam * np.eye(m), lower=True)
        coef = scipy.linalg.cho_solve(cho, y)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise InvalidInputError(f"kernel system could not be solved: {exc}") from exc
    n_tri = y.shape[1]
    dim = int(round((np.sqrt(8 * n_tri + 1) - 1) / 2))
    if dim * (dim + 1) // 2 != n_tri:
        raise InvalidInputError(
            f"target width {n_tri} is not a triangular number"
        )
    if s.shape[1] != 2 * dim:
        raise InvalidInputError(
            f"input width {s.shape[1]} does not match 2 * dim = {2 * dim}"
        )
    return KernelStiffnessModel(
        h=float(h), lam=float(lam), dim=dim,
        inputs=s.copy(), coefficients=coef,
    )


def load_model(path):
    """Load a serialized model; unknown format tags are rejected."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"no such file: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed model file: {exc}", line=exc.lineno) from None
    if doc.get("format") != MODEL_FORMAT:
        raise FormatVersionError(
            f"unsupported model format {doc.get('format')!r}"
        )
    return KernelStiffnessModel(
        h=float(doc["h"]), lam=float(doc["lam"]), dim=int(doc["dim"]),
        inputs=np.asarray(doc["inputs"], dtype=float),
        coefficients=np.asarray(doc["coefficients"], dtype=float),
    )
