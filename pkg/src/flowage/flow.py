"""Invertible coupling-layer network over subspace coordinates.

The model is a chain of affine coupling layers interleaved with fixed
volume-preserving mixing transforms (index reversals and frozen random
orthogonal matrices). Each coupling layer rescales and shifts the first
half of its input using a small shared-weight ReLU network fed with the
second half, so both directions are exact and the log-determinant is a
cheap sum of the (soft-clamped) scale logits.

Slot 0 of the final output is the structured latent holding the
normalized age; the remaining slots carry the nuisance variability z.
Everything runs in float64 and is deterministic for a fixed build seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError


@dataclass
class FlowConfig:
    n_sub: int
    n_lay: int = 16
    n_hid: int = 2
    hidden_width: int = 32
    scale_clamp: float = 2.0

    def validate(self) -> None:
        bad = []
        if self.n_sub < 2:
            bad.append(f"n_sub >= 2 (got {self.n_sub})")
        if self.n_lay < 1:
            bad.append(f"n_lay >= 1 (got {self.n_lay})")
        if self.n_hid < 0:
            bad.append(f"n_hid >= 0 (got {self.n_hid})")
        if self.hidden_width < 1:
            bad.append(f"hidden_width >= 1 (got {self.hidden_width})")
        if self.scale_clamp <= 0:
            bad.append(f"scale_clamp > 0 (got {self.scale_clamp})")
        if bad:
            raise ValidationError("invalid flow config: " + "; ".join(bad))


@dataclass
class LatentCode:
    """Structured latent [a | z]: slot 0 is the normalized age."""

    a: float
    z: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate(([self.a], self.z))

    @classmethod
    def from_vector(cls, y: np.ndarray) -> "LatentCode":
        y = np.asarray(y, dtype=np.float64)
        return cls(a=float(y[0]), z=y[1:].copy())


class CouplingLayer:
    """Affine coupling: w1 = exp(s_hat(u2)) * u1 + t(u2), w2 = u2.

    The first ceil(n_sub/2) slots are transformed, the rest pass through.
    A single two-headed MLP maps u2 to [scale logits | translations];
    scale logits are soft-clamped via c * tanh(s / c) to keep exp(s)
    bounded during training without breaking invertibility.
    """

    def __init__(self, index: int, n_sub: int, weights: list[np.ndarray], biases: list[np.ndarray], scale_clamp: float):
        self.index = index
        self.n_sub = n_sub
        self.d1 = (n_sub + 1) // 2
        self.d2 = n_sub - self.d1
        self.weights = weights
        self.biases = biases
        self.scale_clamp = float(scale_clamp)

    def _mlp(self, x: np.ndarray, want_cache: bool):
        cache = [x] if want_cache else None
        h = x
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if l < last:
                if want_cache:
                    cache.append(h)
                h = np.maximum(h, 0.0)
                if want_cache:
                    cache.append(h)
        return h, cache

    def _mlp_backward(self, cache, g_out):
        """Gradients of the MLP w.r.t. input and parameters, reverse order."""
        gW, gb = [None] * len(self.weights), [None] * len(self.biases)
        g = g_out
        last = len(self.weights) - 1
        for l in range(last, -1, -1):
            a_in = cache[2 * l]
            gW[l] = a_in.T @ g
            gb[l] = g.sum(axis=0)
            g = g @ self.weights[l].T
            if l > 0:
                g = g * (cache[2 * l - 1] > 0)
        return g, gW, gb

    def _heads(self, u2: np.ndarray, want_cache: bool):
        raw, cache = self._mlp(u2, want_cache)
        s_raw = raw[:, : self.d1]
        t = raw[:, self.d1 :]
        c = self.scale_clamp
        th = np.tanh(s_raw / c)
        return th * c, t, th, cache

    def forward(self, U: np.ndarray, want_cache: bool = False):
        u1, u2 = U[:, : self.d1], U[:, self.d1 :]
        s_hat, t, th, cache = self._heads(u2, want_cache)
        exp_s = np.exp(s_hat)
        w1 = exp_s * u1 + t
        if not np.isfinite(w1).all():
            raise NumericalError(f"non-finite activations in coupling layer {self.index} (forward)")
        W = np.concatenate([w1, u2], axis=1)
        ld = s_hat.sum(axis=1)
        ctx = (u1, u2, th, exp_s, cache) if want_cache else None
        return W, ld, ctx

    def inverse(self, W: np.ndarray):
        w1, w2 = W[:, : self.d1], W[:, self.d1 :]
        s_hat, t, _, _ = self._heads(w2, False)
        u1 = np.exp(-s_hat) * (w1 - t)
        if not np.isfinite(u1).all():
            raise NumericalError(f"non-finite activations in coupling layer {self.index} (inverse)")
        return np.concatenate([u1, w2], axis=1), -s_hat.sum(axis=1)

    def backward(self, ctx, g_W: np.ndarray, g_ld: np.ndarray):
        """Pull cotangents back through the forward pass.

        g_W is the cotangent on the layer output, g_ld the per-sample
        cotangent on this layer's log-det contribution. Returns the input
        cotangent plus parameter gradients aligned with weights/biases.
        """
        u1, u2, th, exp_s, cache = ctx
        g_w1, g_w2 = g_W[:, : self.d1], g_W[:, self.d1 :]
        g_u1 = g_w1 * exp_s
        g_shat = g_w1 * exp_s * u1 + g_ld[:, None]
        g_sraw = g_shat * (1.0 - th * th)
        g_raw = np.concatenate([g_sraw, g_w1], axis=1)
        g_u2_mlp, gW, gb = self._mlp_backward(cache, g_raw)
        g_U = np.concatenate([g_u1, g_w2 + g_u2_mlp], axis=1)
        return g_U, gW, gb


class MixingTransform:
    """Fixed volume-preserving mixer between coupling layers.

    kind 'reverse' flips the slot order; kind 'orthogonal' applies a
    frozen random orthogonal matrix. Both contribute exactly zero to the
    log-determinant.
    """

    def __init__(self, kind: str, matrix: np.ndarray | None = None, seed: int = 0):
        if kind not in ("reverse", "orthogonal"):
            raise ValidationError(f"mixing kind must be 'reverse' or 'orthogonal', got {kind!r}")
        if kind == "orthogonal" and matrix is None:
            raise ValidationError("orthogonal mixing requires a matrix")
        self.kind = kind
        self.matrix = matrix
        self.seed = seed

    def forward(self, U: np.ndarray) -> np.ndarray:
        if self.kind == "reverse":
            return U[:, ::-1]
        return U @ self.matrix.T

    def inverse(self, W: np.ndarray) -> np.ndarray:
        if self.kind == "reverse":
            return W[:, ::-1]
        return W @ self.matrix

    def backward(self, g_W: np.ndarray) -> np.ndarray:
        if self.kind == "reverse":
            return g_W[:, ::-1]
        return g_W @ self.matrix


class FlowModel:
    """Ordered chain of coupling layers and mixing transforms."""

    def __init__(self, config: FlowConfig, stages: list, age_norm: tuple[float, float] = (0.0, 1.0), seed: int = 0):
        self.config = config
        self.stages = stages
        self.age_norm = (float(age_norm[0]), float(age_norm[1]))
        self.seed = seed

    @property
    def n_sub(self) -> int:
        return self.config.n_sub

    def coupling_layers(self) -> list[CouplingLayer]:
        return [s for s in self.stages if isinstance(s, CouplingLayer)]

    def parameters(self):
        """Yield (name, array) for every trainable tensor, in a fixed order."""
        for layer in self.coupling_layers():
            for l, (W, b) in enumerate(zip(layer.weights, layer.biases)):
                yield f"layer{layer.index:02d}.W{l}", W
                yield f"layer{layer.index:02d}.b{l}", b

    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.parameters())

    def forward_batch(self, V: np.ndarray, want_cache: bool = False):
        """Map coordinates to latents; returns (Y, log_det, caches)."""
        X = np.asarray(V, dtype=np.float64)
        ld = np.zeros(X.shape[0])
        caches = [] if want_cache else None
        for stage in self.stages:
            if isinstance(stage, CouplingLayer):
                X, ld_i, ctx = stage.forward(X, want_cache)
                ld = ld + ld_i
                if want_cache:
                    caches.append(ctx)
            else:
                X = stage.forward(X)
                if want_cache:
                    caches.append(None)
        return X, ld, caches

    def inverse_batch(self, Y: np.ndarray):
        """Exact inverse chain; log_det is the Jacobian log-det of the inverse map."""
        X = np.asarray(Y, dtype=np.float64)
        ld = np.zeros(X.shape[0])
        for stage in reversed(self.stages):
            if isinstance(stage, CouplingLayer):
                X, ld_i = stage.inverse(X)
                ld = ld + ld_i
            else:
                X = stage.inverse(X)
        return X, ld

    def backward_batch(self, caches, g_Y: np.ndarray, g_ld: np.ndarray):
        """Reverse-mode pass matching forward_batch(want_cache=True).

        Returns (input cotangent, {param name: gradient}).
        """
        grads: dict[str, np.ndarray] = {}
        g = g_Y
        for stage, ctx in zip(reversed(self.stages), reversed(caches)):
            if isinstance(stage, CouplingLayer):
                g, gW, gb = stage.backward(ctx, g, g_ld)
                for l in range(len(gW)):
                    grads[f"layer{stage.index:02d}.W{l}"] = gW[l]
                    grads[f"layer{stage.index:02d}.b{l}"] = gb[l]
            else:
                g = stage.backward(g)
        return g, grads


def _random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-ish orthogonal matrix: QR of a Gaussian draw with a sign-fixed diagonal."""
    A = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(A)
    return Q * np.sign(np.diag(R))


def build_flow(cfg: FlowConfig, seed: int) -> FlowModel:
    """Construct a flow that starts as the exact identity map.

    Hidden layers use He-scaled Gaussian init; the final linear layer of
    every coupling MLP is zero-initialized so every fresh coupling is an
    identity. Consecutive coupling layers are linked by fixed mixing: an
    index reversal after every second layer and a frozen seeded random
    orthogonal matrix after the others, so every layer sees a freshly
    mixed partition. A final fixed closure stage, the inverse of the
    accumulated mixing product, makes the whole fresh chain exactly the
    identity; like all mixing it is orthogonal, contributes nothing to
    the log-determinant, and is stored verbatim in checkpoints.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    d1 = (cfg.n_sub + 1) // 2
    d2 = cfg.n_sub - d1
    sizes = [d2] + [cfg.hidden_width] * cfg.n_hid + [2 * d1]

    stages: list = []
    mix_product = None
    for i in range(1, cfg.n_lay + 1):
        weights, biases = [], []
        for l in range(len(sizes) - 1):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            if l == len(sizes) - 2:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / max(fan_in, 1))
            weights.append(W)
            biases.append(np.zeros(fan_out))
        stages.append(CouplingLayer(i, cfg.n_sub, weights, biases, cfg.scale_clamp))
        if i < cfg.n_lay:
            if mix_product is None:
                mix_product = np.eye(cfg.n_sub)
            if i % 2 == 0:
                stages.append(MixingTransform("reverse", seed=seed))
                mix_product = mix_product[::-1]
            else:
                M = _random_orthogonal(cfg.n_sub, rng)
                stages.append(MixingTransform("orthogonal", M, seed=seed))
                mix_product = M @ mix_product
    if mix_product is not None:
        stages.append(MixingTransform("orthogonal", np.ascontiguousarray(mix_product.T), seed=seed))
    return FlowModel(cfg, stages, seed=seed)


# Functional single-vector wrappers around the batched model methods.

def coupling_forward(layer: CouplingLayer, u: np.ndarray) -> tuple[np.ndarray, float]:
    u = np.asarray(u, dtype=np.float64)
    W, ld, _ = layer.forward(u[None, :])
    return W[0], float(ld[0])


def coupling_inverse(layer: CouplingLayer, w: np.ndarray) -> tuple[np.ndarray, float]:
    w = np.asarray(w, dtype=np.float64)
    U, ld = layer.inverse(w[None, :])
    return U[0], float(ld[0])


def flow_forward(model: FlowModel, v: np.ndarray) -> tuple[LatentCode, float]:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_sub,):
        raise ValidationError(f"expected {model.n_sub} coordinates, got shape {v.shape}")
    Y, ld, _ = model.forward_batch(v[None, :])
    return LatentCode.from_vector(Y[0]), float(ld[0])


def flow_inverse(model: FlowModel, latent) -> tuple[np.ndarray, float]:
    y = latent.vector() if isinstance(latent, LatentCode) else np.asarray(latent, dtype=np.float64)
    if y.shape != (model.n_sub,):
        raise ValidationError(f"expected latent of length {model.n_sub}, got shape {y.shape}")
    V, ld = model.inverse_batch(y[None, :])
    return V[0], float(ld[0])
