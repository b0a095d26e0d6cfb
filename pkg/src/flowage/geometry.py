"""Stationary-velocity-field exponentials, warping, and Jacobian analysis.

Velocity and deformation fields are dense grids of 3-vectors stored as
float64 arrays of shape (nx, ny, nz, 3) with displacement components in
mm; voxel (i, j, k) sits at physical position (i*sx, j*sy, k*sz). Scalar
volumes use shape (nx, ny, nz). All interpolation clamps sample points to
the grid border, so no NaNs are ever produced for out-of-grid reads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError


def _check_spacing(spacing) -> tuple[float, float, float]:
    s = tuple(float(x) for x in spacing)
    if len(s) != 3 or any(x <= 0 for x in s):
        raise ValidationError(f"spacing must be 3 strictly positive values, got {spacing!r}")
    return s


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise ValidationError(f"{what} contains non-finite values")


@dataclass
class VelocityField:
    """Stationary velocity field, (nx, ny, nz, 3) float64, components in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValidationError(f"velocity data must have shape (nx, ny, nz, 3), got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        _check_finite(self.data, "velocity field")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


@dataclass
class DeformationField:
    """Deformation phi(x) = x + d(x); stores the displacement d in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValidationError(f"displacement data must have shape (nx, ny, nz, 3), got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        _check_finite(self.data, "deformation field")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


@dataclass
class Volume:
    """Scalar 3D image with an interpolation tag ('trilinear' or 'nearest')."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    interpolation: str = "trilinear"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must have shape (nx, ny, nz), got {self.data.shape}")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ValidationError(f"interpolation must be 'trilinear' or 'nearest', got {self.interpolation!r}")
        self.spacing = _check_spacing(self.spacing)
        _check_finite(self.data, "volume")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


def identity_deformation(dims, spacing=(1.0, 1.0, 1.0)) -> DeformationField:
    """Deformation with zero displacement everywhere."""
    nx, ny, nz = dims
    return DeformationField(np.zeros((nx, ny, nz, 3)), spacing)


def voxel_grid(dims) -> np.ndarray:
    """Voxel-index coordinates of every grid node, shape (nx, ny, nz, 3)."""
    idx = np.indices(dims, dtype=np.float64)
    return np.moveaxis(idx, 0, -1)


def _sample(data: np.ndarray, pos_vox: np.ndarray, mode: str) -> np.ndarray:
    """Sample `data` at fractional voxel positions with border clamping.

    data: (nx, ny, nz) or (nx, ny, nz, C); pos_vox: (..., 3) voxel coords.
    """
    nx, ny, nz = data.shape[:3]
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    p = np.clip(pos_vox, 0.0, hi)

    if mode == "nearest":
        i = np.rint(p).astype(np.intp)
        return data[i[..., 0], i[..., 1], i[..., 2]]

    i0 = np.floor(p).astype(np.intp)
    i0 = np.minimum(i0, np.maximum(data.shape[:3], 2) - 2)  # keep i0+1 in range
    f = p - i0
    i1 = np.minimum(i0 + 1, np.array(data.shape[:3]) - 1)

    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = i1[..., 0], i1[..., 1], i1[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    if data.ndim == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]

    c00 = data[x0, y0, z0] * (1 - fx) + data[x1, y0, z0] * fx
    c01 = data[x0, y0, z1] * (1 - fx) + data[x1, y0, z1] * fx
    c10 = data[x0, y1, z0] * (1 - fx) + data[x1, y1, z0] * fx
    c11 = data[x0, y1, z1] * (1 - fx) + data[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _compose_displacements(outer: np.ndarray, inner: np.ndarray, spacing) -> np.ndarray:
    """Displacement of phi_outer o phi_inner: d(x) = d_in(x) + d_out(x + d_in(x))."""
    dims = outer.shape[:3]
    sp = np.asarray(spacing, dtype=np.float64)
    pos = voxel_grid(dims) + inner / sp
    return inner + _sample(outer, pos, "trilinear")


def svf_exp(v: VelocityField, n_squarings: int = 8) -> DeformationField:
    """Group exponential of a stationary velocity field by scaling and squaring.

    The velocity is scaled by 2**-n_squarings, taken as a small
    displacement, and the resulting deformation is composed with itself
    n_squarings times using trilinear interpolation.

    Parameters
    ----------
    v : VelocityField
    n_squarings : int
        Number of self-compositions; 8 is an accuracy/cost point that the
        self-convergence tests pin down.
    """
    if n_squarings < 0:
        raise ValidationError(f"n_squarings must be >= 0, got {n_squarings}")
    if not np.isfinite(v.data).all():
        raise ValidationError("velocity field contains non-finite values")
    d = v.data * (2.0 ** -float(n_squarings))
    for _ in range(int(n_squarings)):
        d = _compose_displacements(d, d, v.spacing)
    if not np.isfinite(d).all():
        raise NumericalError("svf_exp produced non-finite displacements")
    return DeformationField(d, v.spacing)


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """Composition phi_outer o phi_inner, sampled with trilinear interpolation."""
    if outer.dims != inner.dims or outer.spacing != inner.spacing:
        raise ValidationError(
            f"deformation grids do not match: {outer.dims}/{outer.spacing} vs {inner.dims}/{inner.spacing}"
        )
    return DeformationField(_compose_displacements(outer.data, inner.data, outer.spacing), outer.spacing)


def warp(img: Volume, phi: DeformationField) -> Volume:
    """Pull-back warp: output(x) = img(x + d(x)) using the volume's interpolation tag."""
    if img.dims != phi.dims or img.spacing != phi.spacing:
        raise ValidationError(f"image grid {img.dims}/{img.spacing} does not match deformation {phi.dims}/{phi.spacing}")
    sp = np.asarray(img.spacing, dtype=np.float64)
    pos = voxel_grid(img.dims) + phi.data / sp
    out = _sample(img.data, pos, img.interpolation)
    return Volume(out, img.spacing, img.interpolation)


def jacobian_det_map(phi: DeformationField) -> Volume:
    """Per-voxel determinant of the spatial Jacobian of phi(x) = x + d(x).

    Central differences in the interior, one-sided at borders, scaled by
    the voxel spacing. Identity deformations give exactly 1.0 everywhere;
    values > 1 mark local expansion, < 1 contraction.
    """
    if any(n < 2 for n in phi.dims):
        raise ValidationError(f"jacobian_det_map needs >= 2 voxels along each axis, got {phi.dims}")
    sx, sy, sz = phi.spacing
    # J[i][j] = d(phi_i)/d(x_j) = delta_ij + d(d_i)/d(x_j)
    J = [[None] * 3 for _ in range(3)]
    for i in range(3):
        gx, gy, gz = np.gradient(phi.data[..., i], sx, sy, sz, edge_order=1)
        J[i][0], J[i][1], J[i][2] = gx, gy, gz
        J[i][i] = J[i][i] + 1.0
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    return Volume(det, phi.spacing)
