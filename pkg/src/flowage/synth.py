"""Synthetic cohorts with a known generative model.

Each subject's velocity field is a linear combination of k smooth
Gaussian-bump basis fields. Factor 0 follows a mean path g(age) (linear,
quadratic, or sigmoid in a normalized age variable) plus Gaussian noise;
the remaining factors are pure nuisance noise. A tiny full-rank voxel
jitter keeps the cohort covariance non-degenerate so subspaces larger
than k can be fitted. The emitted generator record carries everything a
test oracle needs: bump geometry, per-subject factor values, the
noiseless mean path, and a quadrature routine for the Bayes-optimal MAE
of any age estimator.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import atomic_write_bytes, write_velocity
from .cohort import ManifestRow, write_manifest
from .errors import ValidationError
from .geometry import VelocityField, voxel_grid

GENERATORS = ("linear", "quadratic", "sigmoid")


@dataclass
class SynthConfig:
    n_subjects: int = 2400
    n_test: int = 400
    dims: tuple[int, int, int] = (16, 16, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    age_range: tuple[float, float] = (20.0, 90.0)
    generator: str = "sigmoid"
    n_factors: int = 4
    noise_std: float = 0.1
    voxel_noise_std: float = 1e-3
    bump_amp: float = 2.0
    sigmoid_width: float = 0.6
    seed: int = 7
    bump_centers: list | None = None  # voxel-fraction triples, seeded when omitted
    bump_widths: list | None = None   # fractions of the smallest extent

    def validate(self) -> None:
        if not (1 <= self.n_factors <= 16):
            raise ValidationError(f"n_factors must be in [1, 16], got {self.n_factors}")
        if any(n < 8 for n in self.dims):
            raise ValidationError(f"dims must be >= 8 along each axis, got {self.dims}")
        if self.n_subjects < 2:
            raise ValidationError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if not (0 <= self.n_test < self.n_subjects):
            raise ValidationError(f"n_test must be in [0, n_subjects), got {self.n_test}")
        if self.generator not in GENERATORS:
            raise ValidationError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        if self.age_range[0] >= self.age_range[1]:
            raise ValidationError(f"age_range must be increasing, got {self.age_range}")
        if self.noise_std < 0 or self.voxel_noise_std < 0:
            raise ValidationError("noise levels must be >= 0")
        if self.bump_centers is not None and len(self.bump_centers) != self.n_factors:
            raise ValidationError(f"bump_centers must list {self.n_factors} triples")
        if self.bump_widths is not None and len(self.bump_widths) != self.n_factors:
            raise ValidationError(f"bump_widths must list {self.n_factors} values")


def _normalized_age(cfg_range, ages):
    lo, hi = cfg_range
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return (np.asarray(ages, dtype=np.float64) - mid) / half


def mean_path_factor0(cfg: SynthConfig, ages) -> np.ndarray:
    """Noiseless mean of factor 0 at the given ages; other factors are zero-mean."""
    a = _normalized_age(cfg.age_range, ages)
    if cfg.generator == "linear":
        return a
    if cfg.generator == "quadratic":
        return (a + 0.3 * a * a) / 1.3
    w = cfg.sigmoid_width
    return np.tanh(a / w) / np.tanh(1.0 / w)


@dataclass
class GeneratorRecord:
    """Ground truth for a synthesized cohort."""

    config: SynthConfig
    bump_centers_mm: np.ndarray  # (k, 3)
    bump_widths_mm: np.ndarray   # (k,)
    bump_dirs: np.ndarray        # (k, 3), unit vectors
    ids: list[str]
    ages: np.ndarray             # (n,)
    splits: list[str]
    factors: np.ndarray          # (n, k) = mean path + factor noise
    bayes_mae_years: float = field(default=float("nan"))

    def mean_path(self, ages) -> np.ndarray:
        """(len(ages), k) noiseless factor means."""
        g = np.zeros((len(np.atleast_1d(ages)), self.config.n_factors))
        g[:, 0] = mean_path_factor0(self.config, ages)
        return g

    def basis_field(self, j: int) -> np.ndarray:
        """Basis field j as an (nx, ny, nz, 3) array."""
        pos = voxel_grid(self.config.dims) * np.asarray(self.config.spacing)
        d2 = np.sum((pos - self.bump_centers_mm[j]) ** 2, axis=-1)
        bump = self.config.bump_amp * np.exp(-d2 / (2.0 * self.bump_widths_mm[j] ** 2))
        return bump[..., None] * self.bump_dirs[j]

    def basis_matrix(self) -> np.ndarray:
        """(k, 3*n_vox) stacked flattened basis fields."""
        return np.stack([self.basis_field(j).reshape(-1) for j in range(self.config.n_factors)])

    def true_mean_field(self, age: float) -> VelocityField:
        """Noise-free expected velocity field at an age."""
        g = self.mean_path([age])[0]
        vec = g @ self.basis_matrix()
        nx, ny, nz = self.config.dims
        return VelocityField(vec.reshape(nx, ny, nz, 3), self.config.spacing)

    def bayes_optimal_mae(self) -> float:
        """MAE of the posterior-median age estimator under the generator.

        Only factor 0 is informative, so the optimal estimator observes
        c = g(age) + eps with eps ~ N(0, noise_std^2) and a uniform age
        prior; the expectation over (age, eps) is taken by quadrature with
        the posterior median computed on a fine age grid.
        """
        return bayes_mae_quadrature(self.config)

    def to_json(self) -> str:
        doc = {
            "config": asdict(self.config),
            "bump_centers_mm": self.bump_centers_mm.tolist(),
            "bump_widths_mm": self.bump_widths_mm.tolist(),
            "bump_dirs": self.bump_dirs.tolist(),
            "ids": self.ids,
            "ages": self.ages.tolist(),
            "splits": self.splits,
            "factors": self.factors.tolist(),
            "bayes_mae_years": self.bayes_mae_years,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "GeneratorRecord":
        doc = json.loads(Path(path).read_text())
        cfg_doc = dict(doc["config"])
        for key in ("dims", "spacing", "age_range"):
            cfg_doc[key] = tuple(cfg_doc[key])
        cfg = SynthConfig(**cfg_doc)
        return cls(
            config=cfg,
            bump_centers_mm=np.asarray(doc["bump_centers_mm"], dtype=np.float64),
            bump_widths_mm=np.asarray(doc["bump_widths_mm"], dtype=np.float64),
            bump_dirs=np.asarray(doc["bump_dirs"], dtype=np.float64),
            ids=list(doc["ids"]),
            ages=np.asarray(doc["ages"], dtype=np.float64),
            splits=list(doc["splits"]),
            factors=np.asarray(doc["factors"], dtype=np.float64),
            bayes_mae_years=float(doc["bayes_mae_years"]),
        )


def synth_cohort(cfg: SynthConfig) -> tuple[list[tuple[VelocityField, float]], GeneratorRecord]:
    """Generate a cohort; bit-identical for identical configs."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_factors
    extent = np.asarray(cfg.dims) * np.asarray(cfg.spacing)

    if cfg.bump_centers is None:
        centers = (0.3 + 0.4 * rng.random((k, 3))) * extent
    else:
        centers = np.asarray(cfg.bump_centers, dtype=np.float64) * extent
    if cfg.bump_widths is None:
        widths = (0.12 + 0.10 * rng.random(k)) * extent.min()
    else:
        widths = np.asarray(cfg.bump_widths, dtype=np.float64) * extent.min()
    dirs = rng.standard_normal((k, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    n = cfg.n_subjects
    ages = rng.uniform(cfg.age_range[0], cfg.age_range[1], size=n)
    eps = rng.standard_normal((n, k)) * cfg.noise_std
    factors = eps.copy()
    factors[:, 0] += mean_path_factor0(cfg, ages)

    splits = ["train"] * (n - cfg.n_test) + ["test"] * cfg.n_test
    ids = [f"subj_{i:05d}" for i in range(n)]
    record = GeneratorRecord(cfg, centers, widths, dirs, ids, ages, splits, factors)

    basis = record.basis_matrix()
    nx, ny, nz = cfg.dims
    fields = []
    for i in range(n):
        vec = factors[i] @ basis
        if cfg.voxel_noise_std > 0:
            vec = vec + rng.standard_normal(vec.shape) * cfg.voxel_noise_std
        fields.append((VelocityField(vec.reshape(nx, ny, nz, 3), cfg.spacing), float(ages[i])))
    return fields, record


def write_cohort(cfg: SynthConfig, out_dir) -> tuple[Path, GeneratorRecord]:
    """Materialize a cohort: per-subject containers, manifest.csv, generator.json."""
    out_dir = Path(out_dir)
    fields, record = synth_cohort(cfg)
    rows = []
    for (v, age), sid, split in zip(fields, record.ids, record.splits):
        vpath = out_dir / "fields" / f"{sid}.vf"
        write_velocity(vpath, v)
        rows.append(ManifestRow(sid, age, vpath, split))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    record.bayes_mae_years = record.bayes_optimal_mae()
    atomic_write_bytes(out_dir / "generator.json", record.to_json().encode())
    return manifest, record


def bayes_mae_quadrature(
    cfg: SynthConfig, n_age: int = 141, n_eps: int = 281, n_grid: int = 2801
) -> float:
    """Expected |error| of the posterior-median estimator, by quadrature.

    Noise-free generators are perfectly invertible, so the result is 0.
    """
    lo, hi = cfg.age_range
    sigma = cfg.noise_std
    if sigma == 0:
        return 0.0
    T = np.linspace(lo, hi, n_grid)
    G = mean_path_factor0(cfg, T)

    ages = lo + (hi - lo) * (np.arange(n_age) + 0.5) / n_age  # midpoint rule
    eps = np.linspace(-6.0 * sigma, 6.0 * sigma, n_eps)
    w_eps = np.exp(-0.5 * (eps / sigma) ** 2)
    w_eps /= w_eps.sum()

    g_ages = mean_path_factor0(cfg, ages)
    C = (g_ages[:, None] + eps[None, :]).reshape(-1)
    medians = np.empty_like(C)
    chunk = 4096
    for start in range(0, C.size, chunk):
        c = C[start : start + chunk, None]
        W = np.exp(-0.5 * ((c - G[None, :]) / sigma) ** 2)
        # trapezoid CDF over the inner grid
        inc = 0.5 * (W[:, 1:] + W[:, :-1])
        cum = np.cumsum(inc, axis=1)
        total = cum[:, -1]
        half = 0.5 * total
        idx = np.argmax(cum >= half[:, None], axis=1)
        rows = np.arange(c.shape[0])
        prev = np.where(idx > 0, cum[rows, idx - 1], 0.0)
        seg = cum[rows, idx] - prev
        frac = np.where(seg > 0, (half - prev) / np.maximum(seg, 1e-300), 0.5)
        medians[start : start + chunk] = T[idx] + frac * (T[1] - T[0])
    err = np.abs(medians.reshape(n_age, n_eps) - ages[:, None])
    return float((err @ w_eps).mean())
