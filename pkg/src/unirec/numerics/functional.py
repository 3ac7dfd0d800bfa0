"""Differentiable building blocks used by the news and user encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tensor import Tensor, as_tensor, matmul

# Large negative logit for masked positions; exp() underflows to exactly 0.
_MASKED = -1e30


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (True = keep) broadcasts against ``x``.

    A slice whose entries are all masked falls back to the uniform
    distribution, so fully padded inputs still map to a fixed output.
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax needs a non-empty axis")
    z = x.data
    keep = None
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(keep, z, _MASKED)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dx = p * (g - (g * p).sum(axis=axis, keepdims=True))
        if keep is not None:
            dx = np.where(keep, dx, 0.0)
        return (dx,)

    return Tensor._result(p, (x,), backward)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError("logsumexp needs a non-empty axis")
    z = x.data
    top = z.max(axis=axis, keepdims=True)
    e = np.exp(z - top)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + top).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return Tensor._result(xhat, (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    x = as_tensor(x)
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ConfigurationError("dropout rate must be below 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    """Projections for multi-head self-attention.

    Each matrix is ``d x d``; columns ``h*dk:(h+1)*dk`` of ``query``, ``key``
    and ``value`` form the projection of head ``h``. ``output`` mixes the
    concatenated heads back to ``d`` dimensions.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"query": self.query, "key": self.key, "value": self.value, "output": self.output}


@dataclass
class PoolingParams:
    """Additive attention pooling: score_t = query . tanh(seq_t @ proj + bias)."""

    proj: Tensor
    bias: Tensor
    query: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"proj": self.proj, "bias": self.bias, "query": self.query}


def multi_head_self_attention(
    seq,
    params: AttentionParams,
    heads: int,
    mask=None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over axis -2 of ``seq`` (..., L, d).

    ``mask`` has shape (..., L) and marks valid key positions. Returns the
    (..., L, d) output, plus the (..., heads, L, L) weights when requested.
    """
    seq = as_tensor(seq)
    if seq.ndim < 2:
        raise DimensionError("self-attention expects (..., L, d) input")
    *lead, length, d = seq.shape
    lead = tuple(lead)
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dimension {d} is not divisible by {heads} heads")
    if length < 1:
        raise DimensionError("self-attention needs at least one position")
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(lead + (length, heads, dk)).swapaxes(-2, -3)

    q = split(matmul(seq, params.query))
    k = split(matmul(seq, params.key))
    v = split(matmul(seq, params.value))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    key_mask = None
    if mask is not None:
        key_mask = np.asarray(mask, dtype=bool)[..., None, None, :]
    weights = softmax(scores, axis=-1, mask=key_mask)
    context = matmul(weights, v).swapaxes(-2, -3).reshape(lead + (length, d))
    out = matmul(context, params.output)
    if return_weights:
        return out, weights
    return out


def attention_pool(seq, params: PoolingParams, mask=None) -> Tensor:
    """Collapse (..., L, d) to (..., d) with a learned query vector."""
    seq = as_tensor(seq)
    *lead, length, d = seq.shape
    hidden = (matmul(seq, params.proj) + params.bias).tanh()
    logits = matmul(hidden, params.query)
    weights = softmax(logits, axis=-1, mask=mask)
    pooled = matmul(weights.reshape(tuple(lead) + (1, length)), seq)
    return pooled.reshape(tuple(lead) + (d,))
