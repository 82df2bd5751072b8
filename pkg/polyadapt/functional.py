"""Fused differentiable operations built on :mod:`polyadapt.tensor`."""
from __future__ import annotations

import math

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .tensor import Function, Tensor

_GELU_C = math.sqrt(2.0 / math.pi)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *, eps: float) -> np.ndarray:
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        self.xhat = centered * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        _, gamma, _ = self.inputs
        dxhat = grad * gamma.data
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        grad_x = self.inv_std * (dxhat - mean_d - self.xhat * mean_dx)
        flat = grad.reshape(-1, grad.shape[-1])
        grad_gamma = (flat * self.xhat.reshape(flat.shape)).sum(axis=0)
        grad_beta = flat.sum(axis=0)
        return grad_x, grad_gamma, grad_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then apply the affine."""
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a last dimension of at least 1")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class Gelu(Function):
    """Tanh approximation of the Gaussian error linear unit."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        c = x.dtype.type(_GELU_C)
        inner = c * (x + x.dtype.type(0.044715) * x ** 3)
        self.x = x
        self.tanh = np.tanh(inner)
        return x.dtype.type(0.5) * x * (1 + self.tanh)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        x, t = self.x, self.tanh
        c = x.dtype.type(_GELU_C)
        d_inner = c * (1 + x.dtype.type(3 * 0.044715) * x * x)
        local = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * d_inner
        return (grad * local,)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


class MaskedSoftmax(Function):
    """Softmax over the last axis; masked entries get probability 0.

    Rows with every entry masked produce all-zero probabilities.
    """

    def forward(self, x: np.ndarray, *, mask: np.ndarray | None) -> np.ndarray:
        if mask is None:
            shifted = x - x.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            self.p = e / e.sum(axis=-1, keepdims=True)
            return self.p
        mask = np.broadcast_to(mask, x.shape)
        filled = np.where(mask, x, -np.inf)
        row_max = filled.max(axis=-1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0).astype(x.dtype)
        e = np.where(mask, np.exp(np.where(mask, x - row_max, 0.0)), 0.0).astype(x.dtype)
        total = e.sum(axis=-1, keepdims=True)
        self.p = e / np.where(total > 0, total, 1.0).astype(x.dtype)
        return self.p

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        p = self.p
        return (p * (grad - (grad * p).sum(axis=-1, keepdims=True)),)


def masked_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    return MaskedSoftmax.apply(x, mask=mask)


class SoftmaxCrossEntropy(Function):
    def forward(
        self,
        logits: np.ndarray,
        *,
        targets: np.ndarray,
        valid: np.ndarray,
        smoothing: float,
        reduction: str,
    ) -> np.ndarray:
        n, v = logits.shape
        shifted = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - lse
        safe_targets = np.where(valid, targets, 0)
        nll = -logp[np.arange(n), safe_targets]
        smooth = -logp.mean(axis=-1)
        eps = logits.dtype.type(smoothing)
        per_row = (1 - eps) * nll + eps * smooth
        weights = valid.astype(logits.dtype)
        count = weights.sum()
        if reduction == "mean" and count > 0:
            weights = weights / count
        self.weights = weights
        self.probs = np.exp(logp)
        self.targets = safe_targets
        self.eps = eps
        return np.asarray((per_row * weights).sum(), dtype=logits.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        n, v = self.probs.shape
        local = self.probs - self.eps / v
        local[np.arange(n), self.targets] -= 1 - self.eps
        return (local * (self.weights * grad)[:, None],)


def softmax_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    smoothing: float = 0.0,
    mask: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Label-smoothed negative log-likelihood over the non-masked rows.

    ``mask`` marks rows that count (``True``); padding rows are excluded.
    ``reduction="sum"`` returns the unnormalized total, used by gradient
    accumulation which normalizes by the token count of the whole update.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B×V] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ParameterError(f"label smoothing must be in [0, 1), got {smoothing}")
    if reduction not in ("mean", "sum"):
        raise ParameterError(f"unknown reduction {reduction!r}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    valid = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    bad = valid & ((targets < 0) | (targets >= v))
    if bad.any():
        raise DataError(f"target ids out of range [0, {v}): {sorted(set(targets[bad].tolist()))}")
    return SoftmaxCrossEntropy.apply(logits, targets=targets, valid=valid, smoothing=smoothing, reduction=reduction)


class Dropout(Function):
    def forward(self, x: np.ndarray, *, keep: np.ndarray, p: float) -> np.ndarray:
        self.scale = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
        return x * self.scale

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.scale,)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return Dropout.apply(x, keep=keep, p=p)


class L2Normalize(Function):
    def forward(self, x: np.ndarray, *, eps: float) -> np.ndarray:
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        self.norm = np.maximum(norm, x.dtype.type(eps))
        self.y = x / self.norm
        return self.y

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y = self.y
        return ((grad - y * (grad * y).sum(axis=-1, keepdims=True)) / self.norm,)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    return L2Normalize.apply(x, eps=eps)


class HeadBiasAdd(Function):
    """Add a per-head vector ``u[H×dh]`` to every position of ``x[B×H×T×dh]``."""

    def forward(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or u.shape != (x.shape[1], x.shape[3]):
            raise DimensionError(f"head bias {u.shape} does not fit {x.shape}")
        return x + u[None, :, None, :]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad, grad.sum(axis=(0, 2))


def head_bias_add(x: Tensor, u: Tensor) -> Tensor:
    return HeadBiasAdd.apply(x, u)


class PadEdge(Function):
    """Extend axis 1 of ``x[B×T×F]`` to ``length`` by repeating the last frame."""

    def forward(self, x: np.ndarray, *, length: int) -> np.ndarray:
        self.t = x.shape[1]
        if length == self.t:
            return x
        return np.pad(x, ((0, 0), (0, length - self.t), (0, 0)), mode="edge")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = grad[:, : self.t].copy()
        if grad.shape[1] > self.t:
            out[:, -1] += grad[:, self.t :].sum(axis=1)
        return (out,)


def pad_edge(x: Tensor, length: int) -> Tensor:
    return PadEdge.apply(x, length=length)


class WhereMask(Function):
    """Replace positions ``mask[B×T]`` of ``x[B×T×d]`` by the vector ``fill[d]``."""

    def forward(self, x: np.ndarray, fill: np.ndarray, *, mask: np.ndarray) -> np.ndarray:
        self.mask = np.asarray(mask, dtype=bool)
        return np.where(self.mask[..., None], fill, x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask[..., None]
        return np.where(m, 0.0, grad).astype(grad.dtype), grad[self.mask].sum(axis=0)


def where_mask(x: Tensor, mask: np.ndarray, fill: Tensor) -> Tensor:
    return WhereMask.apply(x, fill, mask=mask)


class Outer(Function):
    def forward(self, r: np.ndarray, s: np.ndarray) -> np.ndarray:
        if r.ndim != 1 or s.ndim != 1:
            raise DimensionError(f"outer expects vectors, got {r.shape} and {s.shape}")
        return np.outer(r, s)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r, s = self.inputs
        return grad @ s.data, r.data @ grad


def outer(r: Tensor, s: Tensor) -> Tensor:
    return Outer.apply(r, s)


class FactorSum(Function):
    """``Σᵢ R[i] S[i]ᵀ`` accumulated in index order, for stacked factors."""

    def forward(self, r: np.ndarray, s: np.ndarray) -> np.ndarray:
        if r.ndim != 2 or s.ndim != 2 or r.shape[0] != s.shape[0]:
            raise DimensionError(f"factor stacks {r.shape} and {s.shape} do not pair up")
        out = np.zeros((r.shape[1], s.shape[1]), dtype=r.dtype)
        for i in range(r.shape[0]):
            out += np.outer(r[i], s[i])
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r, s = self.inputs
        return s.data @ grad.T, r.data @ grad


def factor_sum(r: Tensor, s: Tensor) -> Tensor:
    return FactorSum.apply(r, s)


class StraightThrough(Function):
    """Nearest-codebook quantization with an identity gradient to the input."""

    def forward(self, z: np.ndarray, codebook: np.ndarray, *, index: np.ndarray) -> np.ndarray:
        return codebook[index]

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, None]:
        return grad, None


def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row by squared Euclidean distance."""
    flat = z.reshape(-1, z.shape[-1])
    dist = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * flat @ codebook.T + (codebook * codebook).sum(axis=1)[None, :]
    return dist.argmin(axis=1).reshape(z.shape[:-1])


def straight_through_quantize(z: Tensor, codebook: Tensor) -> tuple[Tensor, np.ndarray]:
    index = nearest_codes(z.data, codebook.data)
    return StraightThrough.apply(z, codebook, index=index), index


def sinusoidal_positions(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div)[:, : d_model // 2]
    return table.astype(dtype)
