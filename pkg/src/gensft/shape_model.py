"""Statistical shape model: construction by PCA, instantiation, persistence.

A model is a mean point cloud plus M basis displacement fields; a shape
is mean + sum(w_i * basis_i), optionally posed rigidly. Basis fields are
scaled so that a unit weight moves the shape by one sample standard
deviation along that mode, which turns sum(w_i^2) into a Mahalanobis-like
prior downstream.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    InconsistentPointCounts,
    InsufficientSamples,
    ParseError,
    ZeroVarianceWarning,
)
from .geometry import RigidTransform


@dataclass(frozen=True)
class ShapeModel:
    """Mean 3xN cloud and M basis 3xN displacement fields."""

    mean: np.ndarray
    bases: tuple

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float)
        if m.ndim != 2 or m.shape[0] != 3:
            raise DimensionMismatch(f"mean must be 3xN, got {m.shape}")
        if m.shape[1] < 4:
            raise DimensionMismatch("model needs at least 4 points")
        bs = tuple(np.asarray(b, dtype=float) for b in self.bases)
        if not bs:
            raise DimensionMismatch("model needs at least one basis")
        for b in bs:
            if b.shape != m.shape:
                raise DimensionMismatch(f"basis shape {b.shape} != mean shape {m.shape}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "bases", bs)

    @property
    def n_points(self):
        return self.mean.shape[1]

    @property
    def n_bases(self):
        return len(self.bases)


@dataclass(frozen=True)
class ShapeInstance:
    """Basis weights plus a rigid pose (object frame to world frame)."""

    weights: np.ndarray
    pose: RigidTransform

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not np.isfinite(w).all():
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)


def deform(model, weights):
    """Object-frame shape: mean + sum(w_i * basis_i)."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != model.n_bases:
        raise DimensionMismatch(f"expected {model.n_bases} weights, got {w.shape[0]}")
    out = model.mean.copy()
    for wi, basis in zip(w, model.bases):
        out += wi * basis
    return out


def instantiate(model, instance):
    """World-frame shape: pose applied to the deformed cloud."""
    return instance.pose.apply(deform(model, instance.weights))


def build_ssm(samples, variance_fraction=0.99):
    """PCA shape model from pre-aligned samples.

    Bases are right-singular vectors of the centered, vectorized sample
    matrix, scaled by sigma_i = s_i / sqrt(K-1); the smallest M whose
    cumulative variance reaches `variance_fraction` are kept (at least
    one). A population with no variation yields a single zero basis and
    a ZeroVarianceWarning.
    """
    mats = [np.asarray(s, dtype=float) for s in samples]
    if len(mats) < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {len(mats)}")
    shape = mats[0].shape
    for s in mats:
        if s.ndim != 2 or s.shape[0] != 3:
            raise DimensionMismatch(f"samples must be 3xN, got {s.shape}")
        if s.shape != shape:
            raise InconsistentPointCounts(f"sample shapes differ: {s.shape} vs {shape}")
    if not (0.0 < variance_fraction <= 1.0):
        raise ValueError("variance_fraction must lie in (0, 1]")
    data = np.stack([s.reshape(-1) for s in mats])  # K x 3N, row-major per sample
    mean_vec = data.mean(axis=0)
    mean = mean_vec.reshape(shape)
    # Deviation fields carry no net translation: pose handles that downstream.
    fields = [(s - mean) - (s - mean).mean(axis=1, keepdims=True) for s in mats]
    centered = np.stack([f.reshape(-1) for f in fields])
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    variances = sing**2
    total = variances.sum()
    if total <= 1e-24:
        warnings.warn("population has zero variance; using one zero basis", ZeroVarianceWarning)
        return ShapeModel(mean, (np.zeros(shape),))
    cum = np.cumsum(variances) / total
    m = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
    m = min(m, len(mats) - 1)
    scale = sing[:m] / np.sqrt(len(mats) - 1)  # unit weight = one sample SD
    bases = tuple((scale[i] * vt[i]).reshape(shape) for i in range(m))
    return ShapeModel(mean, bases)


def save_model(model, path):
    """Write the model as JSON: {"n", "m", "mean", "bases"}, points as rows."""
    doc = {
        "n": model.n_points,
        "m": model.n_bases,
        "mean": model.mean.T.tolist(),
        "bases": [b.T.tolist() for b in model.bases],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path):
    """Read a model written by save_model; raises ParseError with diagnostics."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        n, m = int(doc["n"]), int(doc["m"])
        mean = np.asarray(doc["mean"], dtype=float).T
        bases = tuple(np.asarray(b, dtype=float).T for b in doc["bases"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad shape-model document ({exc})") from exc
    if mean.shape != (3, n):
        raise ParseError(f"{path}: field 'mean' has {mean.shape[1] if mean.ndim == 2 else '?'} points, header says n={n}")
    if len(bases) != m:
        raise ParseError(f"{path}: {len(bases)} bases present, header says m={m}")
    return ShapeModel(mean, bases)
