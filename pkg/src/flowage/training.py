"""Maximum-likelihood training of the flow.

The loss for one sample with latent [a | z] is

    L = 0.5 * (sigma**-2 * (a - a_gt)**2 + ||z||**2) - log_det

where log_det is the forward log-determinant of the flow at the sample,
so minimizing L is exact negative-log-likelihood training under a unit
Gaussian prior on z and a Gaussian age residual with std sigma. Training
is unidirectional: only the forward pass is ever evaluated, yet the
trained model samples through the exact inverse without refitting.

Gradients are accumulated by hand through the coupling layers, the mixing
transforms, and the log-det terms; they are checked against central
finite differences in the test suite. The optimizer is AdamW with
decoupled weight decay applied to MLP weight matrices only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .flow import FlowModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    sigma: float = 0.14
    epochs: int = 20000
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch: str | int = "full"
    seed: int = 0
    grad_check: bool = False
    record_every: int = 100
    age_units: str = "normalized"  # 'normalized': ages standardized, sigma in latent units

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch != "full" and (not isinstance(self.batch, int) or self.batch < 1):
            raise ValidationError(f"batch must be 'full' or a positive integer, got {self.batch!r}")
        if self.age_units not in ("normalized", "years"):
            raise ValidationError(f"age_units must be 'normalized' or 'years', got {self.age_units!r}")
        if self.record_every < 1:
            raise ValidationError(f"record_every must be >= 1, got {self.record_every}")


@dataclass
class TrainRecord:
    epoch: int
    loss: float
    age_mse: float      # mean squared age residual, normalized units
    z_norm_mean: float  # mean of ||z||^2 over the batch
    log_det_mean: float


def nll_loss(a: float, z: np.ndarray, a_gt: float, sigma: float, log_det: float) -> float:
    """Single-sample loss 0.5*(sigma^-2*(a-a_gt)^2 + ||z||^2) - log_det.

    During training log_det is the forward log-determinant of the flow at
    the sample, which makes the result the exact negative log-likelihood
    (up to an additive constant).
    """
    if sigma <= 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    z = np.asarray(z, dtype=np.float64)
    val = 0.5 * ((a - a_gt) ** 2 / sigma**2 + float(z @ z)) - log_det
    if not np.isfinite(val):
        raise NumericalError(f"non-finite loss value {val}")
    return float(val)


def _loss_terms(Y: np.ndarray, ld: np.ndarray, ages_norm: np.ndarray, sigma: float):
    """Mean loss over a batch plus its decomposition terms."""
    res = Y[:, 0] - ages_norm
    age_mse = float(np.mean(res**2))
    z_sq = float(np.mean(np.sum(Y[:, 1:] ** 2, axis=1)))
    ld_mean = float(np.mean(ld))
    loss = 0.5 * (age_mse / sigma**2 + z_sq) - ld_mean
    return loss, age_mse, z_sq, ld_mean


def grad(model: FlowModel, coords: np.ndarray, ages_norm: np.ndarray, cfg: TrainConfig):
    """Analytic gradient of the mean loss over a batch.

    Returns (TrainRecord-like stats tuple, {param name: gradient}).
    Raises NumericalError naming the first offending parameter if any
    gradient entry is non-finite.
    """
    coords = np.asarray(coords, dtype=np.float64)
    ages_norm = np.asarray(ages_norm, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != model.n_sub:
        raise ValidationError(f"coords must be (batch, {model.n_sub}), got {coords.shape}")
    if ages_norm.shape != (coords.shape[0],):
        raise ValidationError(f"ages must be ({coords.shape[0]},), got {ages_norm.shape}")
    B = coords.shape[0]

    Y, ld, caches = model.forward_batch(coords, want_cache=True)
    loss, age_mse, z_sq, ld_mean = _loss_terms(Y, ld, ages_norm, cfg.sigma)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")

    g_Y = Y / B
    g_Y[:, 0] = (Y[:, 0] - ages_norm) / (cfg.sigma**2 * B)
    g_ld = np.full(B, -1.0 / B)
    _, grads = model.backward_batch(caches, g_Y, g_ld)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient in parameter {name}")
    return (loss, age_mse, z_sq, ld_mean), grads


class AdamW:
    """AdamW with decoupled weight decay on weight matrices only."""

    def __init__(self, params: list[tuple[str, np.ndarray]], lr: float, weight_decay: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params}
        self.v = {name: np.zeros_like(p) for name, p in params}

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - ADAM_BETA1**self.t
        b2c = 1.0 - ADAM_BETA2**self.t
        for name, p in params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
            if self.weight_decay > 0 and ".W" in name:
                p -= self.lr * self.weight_decay * p


def normalize_ages(ages: np.ndarray, age_units: str) -> tuple[float, float]:
    """(mean, std) used to map ages to the latent scale; identity in 'years' mode."""
    if age_units == "years":
        return 0.0, 1.0
    mean = float(np.mean(ages))
    std = float(np.std(ages))
    if std <= 0:
        raise ValidationError("training ages are all identical; cannot normalize")
    return mean, std


def _grad_spot_check(model: FlowModel, coords: np.ndarray, ages_norm: np.ndarray, cfg: TrainConfig) -> None:
    """Compare a handful of analytic gradient entries against central differences."""
    _, grads = grad(model, coords, ages_norm, cfg)
    rng = np.random.default_rng(0)
    params = list(model.parameters())
    h = 1e-6
    for k in rng.choice(len(params), size=min(3, len(params)), replace=False):
        name, p = params[int(k)]
        flat = p.reshape(-1)
        idx = int(rng.integers(flat.size))
        orig = flat[idx]
        flat[idx] = orig + h
        Yp, ldp, _ = model.forward_batch(coords)
        lp, *_ = _loss_terms(Yp, ldp, ages_norm, cfg.sigma)
        flat[idx] = orig - h
        Ym, ldm, _ = model.forward_batch(coords)
        lm, *_ = _loss_terms(Ym, ldm, ages_norm, cfg.sigma)
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)[idx]
        if abs(an - fd) > 1e-4 * max(1.0, abs(fd)):
            raise NumericalError(f"gradient check failed for {name}[{idx}]: analytic {an:.6e} vs fd {fd:.6e}")


def train(model: FlowModel, data: list[tuple[np.ndarray, float]], cfg: TrainConfig, on_record=None):
    """Train the flow in place and return (model, records).

    `data` is a list of (coordinate vector, age in years). Ages are
    normalized per cfg.age_units and the normalization is stored on the
    model so predictions come back in years. Records are full-batch
    evaluations taken every cfg.record_every epochs (and at the final
    epoch); a NaN loss aborts with the last good epoch in the message.
    """
    cfg.validate()
    if len(data) < 2:
        raise ValidationError(f"need at least 2 training samples, got {len(data)}")
    coords = np.stack([np.asarray(c, dtype=np.float64) for c, _ in data])
    ages = np.array([float(a) for _, a in data])
    if not np.isfinite(ages).all():
        raise ValidationError("training ages contain non-finite values")

    mean, std = normalize_ages(ages, cfg.age_units)
    model.age_norm = (mean, std)
    ages_norm = (ages - mean) / std

    if cfg.grad_check:
        _grad_spot_check(model, coords[: min(16, len(data))], ages_norm[: min(16, len(data))], cfg)

    params = list(model.parameters())
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = coords.shape[0]
    batch = n if cfg.batch == "full" else min(int(cfg.batch), n)

    records: list[TrainRecord] = []

    def record(epoch: int) -> TrainRecord:
        Y, ld, _ = model.forward_batch(coords)
        loss, age_mse, z_sq, ld_mean = _loss_terms(Y, ld, ages_norm, cfg.sigma)
        rec = TrainRecord(epoch, loss, age_mse, z_sq, ld_mean)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        return rec

    last_good = -1
    for epoch in range(cfg.epochs):
        if batch == n:
            order = np.arange(n)
        else:
            order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            try:
                (loss, _, _, _), grads = grad(model, coords[sel], ages_norm[sel], cfg)
            except NumericalError as e:
                raise NumericalError(f"{e}; training aborted at epoch {epoch}, last good epoch {last_good}") from e
            opt.step(params, grads)
        last_good = epoch
        if (epoch + 1) % cfg.record_every == 0 or epoch == cfg.epochs - 1:
            record(epoch)

    if cfg.epochs == 0:
        record(-1)
    return model, records


def write_train_log(records: list[TrainRecord], path) -> None:
    """CSV log: epoch, loss, age_mse, z_norm_mean, log_det_mean."""
    lines = ["epoch,loss,age_mse,z_norm_mean,log_det_mean"]
    for r in records:
        lines.append(f"{r.epoch},{r.loss!r},{r.age_mse!r},{r.z_norm_mean!r},{r.log_det_mean!r}")
    from .container import atomic_write_bytes

    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def config_hash(cfg: TrainConfig) -> str:
    """Stable fingerprint of a training configuration."""
    canon = ";".join(f"{k}={getattr(cfg, k)!r}" for k in sorted(vars(cfg)))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def data_fingerprint(coords: np.ndarray, ages: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(coords, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(ages, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]
