"""PCA subspace of velocity fields: fit, project, reconstruct.

A cohort of velocity fields is flattened to rows of an n_pop x 3*n_vox
matrix and reduced by a mean-centered thin SVD. The fitted model maps
fields to n_sub standardized coordinates and back; round trips are exact
for in-span fields because the basis columns are orthonormal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import VelocityField

RANK_TOL = 1e-12  # singular values below RANK_TOL * largest are treated as zero


@dataclass
class SubspaceModel:
    """Affine subspace of maximum data variation over a training cohort.

    Attributes
    ----------
    mean : VelocityField
        Voxelwise mean of the training fields.
    basis : np.ndarray
        (3*n_vox, n_sub) orthonormal columns, leading principal directions.
    singular_values : np.ndarray
        Descending singular values of the centered data matrix, one per
        retained component.
    coord_scale : np.ndarray
        Per-dimension standardization factors; singular_value / sqrt(n_pop - 1)
        when `standardize` is on (training coordinates then have unit sample
        variance), all ones otherwise.
    variance_captured : float
        Fraction of total training variance covered by the retained components.
    """

    mean: VelocityField
    basis: np.ndarray
    singular_values: np.ndarray
    coord_scale: np.ndarray
    variance_captured: float
    n_pop: int
    standardize: bool = True

    @property
    def n_sub(self) -> int:
        return self.basis.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mean.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.mean.spacing


def field_to_vec(v: VelocityField) -> np.ndarray:
    return v.data.reshape(-1)


def vec_to_field(vec: np.ndarray, dims, spacing) -> VelocityField:
    nx, ny, nz = dims
    return VelocityField(vec.reshape(nx, ny, nz, 3), spacing)


def fit(fields: list[VelocityField], n_sub: int, standardize: bool = True) -> SubspaceModel:
    """Fit the PCA subspace to a cohort of velocity fields.

    Uses a thin SVD of the mean-centered n_pop x 3*n_vox data matrix,
    computed through the n_pop x n_pop Gram matrix when the voxel count
    dominates the cohort size. The sign of each basis column is fixed so
    its largest-magnitude entry is positive, which makes the fit
    deterministic up to input order.

    Raises
    ------
    ValidationError
        If n_sub is out of range, grids are inconsistent, or a requested
        component is rank deficient.
    """
    n_pop = len(fields)
    if n_pop < 2:
        raise ValidationError(f"need at least 2 fields to fit a subspace, got {n_pop}")
    dims, spacing = fields[0].dims, fields[0].spacing
    for i, f in enumerate(fields):
        if f.dims != dims or f.spacing != spacing:
            raise ValidationError(f"field {i} grid {f.dims}/{f.spacing} differs from field 0 {dims}/{spacing}")
    n_feat = int(np.prod(dims)) * 3
    if not (1 <= n_sub <= min(n_pop - 1, n_feat)):
        raise ValidationError(f"n_sub must be in [1, min(n_pop - 1, 3*n_vox)] = [1, {min(n_pop - 1, n_feat)}], got {n_sub}")

    X = np.stack([field_to_vec(f) for f in fields])
    mean_vec = X.mean(axis=0)
    Xc = X - mean_vec

    if n_feat > n_pop:
        # Gram trick: eigendecompose the small n_pop x n_pop matrix. Rank
        # deficiency must be judged on the eigenvalues here; taking square
        # roots first would lift machine-noise eigenvalues (~1e-16 * largest)
        # to ~1e-8 * largest singular values and mask true deficiency.
        G = Xc @ Xc.T
        evals, U = np.linalg.eigh(G)
        order = np.argsort(evals)[::-1]
        evals, U = evals[order], U[:, order]
        _check_rank(evals[:n_sub], evals[0], "squared singular value")
        svals = np.sqrt(np.maximum(evals[:n_sub], 0.0))
        basis = (Xc.T @ U[:, :n_sub]) / svals
    else:
        _, svals_all, Vt = np.linalg.svd(Xc, full_matrices=False)
        svals = svals_all[:n_sub]
        _check_rank(svals, svals_all[0], "singular value")
        basis = Vt[:n_sub].T

    # Deterministic sign convention: largest-magnitude entry positive.
    flip = basis[np.abs(basis).argmax(axis=0), np.arange(n_sub)] < 0
    basis[:, flip] *= -1.0

    total_var = float(np.sum(Xc * Xc))
    captured = float(np.sum(svals**2) / total_var) if total_var > 0 else 1.0
    scale = svals / np.sqrt(n_pop - 1) if standardize else np.ones(n_sub)
    return SubspaceModel(
        mean=vec_to_field(mean_vec, dims, spacing),
        basis=basis,
        singular_values=svals.copy(),
        coord_scale=scale,
        variance_captured=min(captured, 1.0),
        n_pop=n_pop,
        standardize=standardize,
    )


def _check_rank(vals: np.ndarray, largest: float, what: str) -> None:
    bad = np.nonzero(vals < RANK_TOL * largest)[0]
    if bad.size:
        raise ValidationError(
            f"rank deficiency: component {bad[0]} has {what} {vals[bad[0]]:.3e} "
            f"< {RANK_TOL:g} * largest ({largest:.3e}); reduce n_sub"
        )


def project(model: SubspaceModel, v: VelocityField) -> np.ndarray:
    """Coordinates of a field in the subspace: inv(diag(scale)) @ Q.T @ (v - mean)."""
    if v.dims != model.dims or v.spacing != model.spacing:
        raise ValidationError(f"field grid {v.dims}/{v.spacing} does not match model {model.dims}/{model.spacing}")
    return (model.basis.T @ (field_to_vec(v) - field_to_vec(model.mean))) / model.coord_scale


def reconstruct(model: SubspaceModel, coords: np.ndarray) -> VelocityField:
    """Minimum-norm field for the given coordinates: mean + Q @ diag(scale) @ c."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (model.n_sub,):
        raise ValidationError(f"expected {model.n_sub} coordinates, got shape {coords.shape}")
    vec = field_to_vec(model.mean) + model.basis @ (model.coord_scale * coords)
    return vec_to_field(vec, model.dims, model.spacing)


def project_many(model: SubspaceModel, fields: list[VelocityField]) -> np.ndarray:
    """Stack of coordinate vectors for a list of fields, shape (n, n_sub)."""
    return np.stack([project(model, f) for f in fields])
