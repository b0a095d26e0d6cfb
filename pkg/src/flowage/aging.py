"""Bidirectional aging API: age prediction, conditional sampling, templates.

Forward direction: project a velocity field into the subspace, run the
flow, denormalize latent slot 0 to years. Inverse direction: fix the age
slot, draw the variability part from the unit Gaussian prior, and run the
exact inverse; Monte-Carlo means of such draws give age-conditioned
morphology templates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .flow import FlowModel
from .geometry import VelocityField
from .subspace import SubspaceModel, project, reconstruct

AGE_BIN_EDGES = (40.0, 50.0, 60.0, 70.0, 80.0)
AGE_BIN_LABELS = ("<40", "40-50", "50-60", "60-70", "70-80", ">80")


@dataclass
class AgingModel:
    subspace: SubspaceModel
    flow: FlowModel
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.subspace.n_sub != self.flow.n_sub:
            raise ValidationError(
                f"subspace n_sub {self.subspace.n_sub} does not match flow n_sub {self.flow.n_sub}"
            )


@dataclass
class BinResult:
    label: str
    count: int
    mae: float | None  # None for empty bins


@dataclass
class EvalReport:
    per_bin: list[BinResult]
    overall_mae: float
    n_subjects: int


@dataclass
class MLRBaseline:
    """Ordinary least squares age regression on subspace coordinates."""

    weights: np.ndarray
    intercept: float


def predict_age_coords(m: AgingModel, coords: np.ndarray) -> float:
    """Age in years for a single coordinate vector."""
    Y, _, _ = m.flow.forward_batch(np.asarray(coords, dtype=np.float64)[None, :])
    mean, std = m.flow.age_norm
    return float(Y[0, 0] * std + mean)


def predict_age(m: AgingModel, v: VelocityField) -> float:
    """Age in years for a velocity field: project, run the flow, denormalize."""
    return predict_age_coords(m, project(m.subspace, v))


def predict_ages_batch(m: AgingModel, coords: np.ndarray) -> np.ndarray:
    Y, _, _ = m.flow.forward_batch(coords)
    mean, std = m.flow.age_norm
    return Y[:, 0] * std + mean


def sample_conditional(m: AgingModel, age: float, n: int, seed: int) -> np.ndarray:
    """Draw n coordinate vectors conditioned on age, shape (n, n_sub).

    The age slot of the latent is fixed at the normalized age; the
    variability part is drawn from the unit Gaussian prior. Deterministic
    for a fixed seed.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    mean, std = m.flow.age_norm
    a_norm = (float(age) - mean) / std
    rng = np.random.default_rng(seed)
    Y = np.empty((n, m.flow.n_sub))
    Y[:, 0] = a_norm
    Y[:, 1:] = rng.standard_normal((n, m.flow.n_sub - 1))
    V, _ = m.flow.inverse_batch(Y)
    return V


def conditional_template(m: AgingModel, age: float, n_samples: int = 10000, seed: int = 0) -> VelocityField:
    """Monte-Carlo estimate of the expected velocity field at a given age.

    The mean is taken in coordinate space and reconstructed once;
    reconstruction is affine, so this matches averaging reconstructed
    fields while touching the voxel grid only once.
    """
    samples = sample_conditional(m, age, n_samples, seed)
    return reconstruct(m.subspace, samples.mean(axis=0))


def evaluate_predictions(ages_true: np.ndarray, ages_pred: np.ndarray) -> EvalReport:
    """Per-age-bin and overall mean absolute error in years.

    Bins are closed-open [lo, hi) with open-ended <40 and >80 groups.
    Empty bins are reported with count 0 and no MAE.
    """
    ages_true = np.asarray(ages_true, dtype=np.float64)
    ages_pred = np.asarray(ages_pred, dtype=np.float64)
    if ages_true.size == 0:
        raise ValidationError("cannot evaluate an empty test set")
    if ages_true.shape != ages_pred.shape:
        raise ValidationError(f"shape mismatch: {ages_true.shape} vs {ages_pred.shape}")
    err = np.abs(ages_pred - ages_true)
    edges = (-np.inf,) + AGE_BIN_EDGES + (np.inf,)
    per_bin = []
    for i, label in enumerate(AGE_BIN_LABELS):
        sel = (ages_true >= edges[i]) & (ages_true < edges[i + 1])
        cnt = int(sel.sum())
        per_bin.append(BinResult(label, cnt, float(err[sel].mean()) if cnt else None))
    return EvalReport(per_bin, float(err.mean()), int(ages_true.size))


def evaluate(m: AgingModel, test: list[tuple[VelocityField, float]]) -> EvalReport:
    if not test:
        raise ValidationError("cannot evaluate an empty test set")
    coords = np.stack([project(m.subspace, v) for v, _ in test])
    ages = np.array([float(a) for _, a in test])
    return evaluate_predictions(ages, predict_ages_batch(m, coords))


def fit_mlr(data: list[tuple[np.ndarray, float]]) -> MLRBaseline:
    """Least-squares age regression on the same coordinates the flow sees.

    Falls back to a tiny ridge penalty (with a warning) when the design
    is singular or has fewer samples than coordinates.
    """
    if len(data) < 2:
        raise ValidationError(f"need at least 2 samples to fit the baseline, got {len(data)}")
    X = np.stack([np.asarray(c, dtype=np.float64) for c, _ in data])
    y = np.array([float(a) for _, a in data])
    n, p = X.shape
    A = np.concatenate([X, np.ones((n, 1))], axis=1)
    if n > p:
        sol, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        if rank < p + 1:
            warnings.warn("singular normal equations; refitting with ridge fallback (lambda=1e-6)")
            sol = _ridge(A, y)
    else:
        warnings.warn(f"n_pop={n} <= n_sub={p}: OLS is not unique, using ridge fallback (lambda=1e-6)")
        sol = _ridge(A, y)
    return MLRBaseline(weights=sol[:-1], intercept=float(sol[-1]))


def _ridge(A: np.ndarray, y: np.ndarray, lam: float = 1e-6) -> np.ndarray:
    k = A.shape[1]
    return np.linalg.solve(A.T @ A + lam * np.eye(k), A.T @ y)


def predict_mlr(b: MLRBaseline, coords: np.ndarray) -> float:
    return float(np.asarray(coords, dtype=np.float64) @ b.weights + b.intercept)


def predict_mlr_batch(b: MLRBaseline, coords: np.ndarray) -> np.ndarray:
    return coords @ b.weights + b.intercept
