"""
Fused neural-network operations on top of the tensor tape.

Each function computes its forward pass in numpy and registers a hand-written
backward, which keeps the tape short and the gradients numerically stable.
"""
import math

import numpy as np
from scipy import special

from rtdforge.services.tensor import (
    LossError,
    ShapeError,
    Tensor,
    TokenIndexError,
    add,
    matmul,
    record,
)

IGNORE_INDEX = -100


def _shift_by_max(x: np.ndarray, axis: int) -> np.ndarray:
    # x - max(x) with +inf entries mapped to 0 instead of NaN
    peak = x.max(axis=axis, keepdims=True)
    with np.errstate(invalid='ignore'):
        return np.where(x == peak, 0.0, x - peak).astype(x.dtype, copy=False)


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(_shift_by_max(x, axis))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = _shift_by_max(x, axis)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    out = softmax_array(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward, 'softmax')


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-12) -> Tensor:
    """Standardize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {width}")
    if epsilon <= 0:
        raise ValueError("layer_norm epsilon must be positive")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + epsilon)
    normed = centered * inv_std
    out = normed * gain.data + bias.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        d_normed = g * gain.data
        grad_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, (g * normed).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return record(out, (x, gain, bias), backward, 'layer_norm')


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return record(out.astype(x.dtype, copy=False), (x,), backward, 'gelu')


def dropout(x: Tensor, rate: float, rng, training: bool) -> Tensor:
    """Inverted dropout; ``rng`` is anything with ``random(shape)``."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return record(x.data * keep, (x,), lambda g: (g * keep,), 'dropout')


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward scatter-adds into shared rows."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"Token id out of range for table with {vocab} rows")
    out = table.data[ids]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return record(out, (table,), backward, 'embedding')


def cross_entropy_from_logits(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_from_logits expects [N, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(f"Targets shape {targets.shape} does not match logits {logits.shape}")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise LossError("no loss positions")
    vocab = logits.shape[1]
    picked = targets[valid]
    if picked.min() < 0 or picked.max() >= vocab:
        raise TokenIndexError(f"Target id out of range for {vocab} classes")
    rows = np.nonzero(valid)[0]
    log_probs = log_softmax_array(logits.data[rows], axis=-1)
    loss = -log_probs[np.arange(count), picked].sum() / count

    def backward(g):
        grad = np.zeros_like(logits.data)
        row_grad = np.exp(log_probs)
        row_grad[np.arange(count), picked] -= 1.0
        grad[rows] = row_grad * (g / count)
        return (grad,)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, 'cross_entropy')


def binary_cross_entropy_from_logits(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean sigmoid cross-entropy over positions selected by ``mask``."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ShapeError(f"Labels shape {labels.shape} does not match logits {logits.shape}")
    mask = np.ones(logits.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"Mask shape {mask.shape} does not match logits {logits.shape}")
    count = int(mask.sum())
    if count == 0:
        raise LossError("no loss positions")
    positive = labels > 0.5
    x = logits.data
    per_position = np.where(positive, np.logaddexp(0.0, -x), np.logaddexp(0.0, x))
    loss = per_position[mask].sum() / count

    def backward(g):
        grad = (special.expit(x) - positive.astype(x.dtype)) * mask * (g / count)
        return (grad.astype(x.dtype, copy=False),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward, 'binary_cross_entropy')


def mse_loss(predictions: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=predictions.dtype).reshape(predictions.shape)
    if predictions.size == 0:
        raise LossError("no loss positions")
    diff = predictions.data - targets
    loss = (diff ** 2).mean()

    def backward(g):
        return (2.0 * diff * (g / diff.size),)

    return record(np.asarray(loss, dtype=predictions.dtype), (predictions,), backward, 'mse')


def masked_mean(hidden: Tensor, attention_mask) -> Tensor:
    """Average ``hidden[B, L, H]`` over positions where ``attention_mask`` is 1."""
    weights = np.asarray(attention_mask, dtype=hidden.dtype)
    counts = weights.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise LossError("Cannot pool a sequence without tokens")
    weights = weights / counts
    out = np.einsum('blh,bl->bh', hidden.data, weights)

    def backward(g):
        return (g[:, None, :] * weights[:, :, None],)

    return record(out, (hidden,), backward, 'masked_mean')
