"""Differentiable ops used by the network.

Every op accepts a single sample laid out ``[channels, time]`` or a batch
``[n, channels, time]``; batch statistics (batch norm) are taken over the
``n`` and ``time`` axes together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, check_finite, record

Padding = Union[int, tuple]


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data, True
    if x.ndim == 2:
        return x.data[None], False
    raise ValueError(f"{op}: expected [c, T] or [n, c, T], got shape {x.shape}")


def _unbatch(arr: np.ndarray, batched: bool) -> np.ndarray:
    return arr if batched else arr[0]


def _pads(padding: Padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    left, right = padding
    return int(left), int(right)


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: Padding = 0) -> int:
    left, right = _pads(padding)
    span = length + left + right - kernel
    return span // stride + 1 if span >= 0 else 0


def grouped_conv1d(x: Tensor, weight: Tensor, stride: int = 1, padding: Padding = 0,
                   groups: int = 1) -> Tensor:
    """1D cross-correlation with ``groups`` equal channel groups.

    ``weight`` is ``[c_out, c_in / groups, k]``; output channel ``j`` of
    group ``i`` only sees input channels of group ``i``.
    """
    X, batched = _as_batch(x, "grouped_conv1d")
    W = weight.data
    if W.ndim != 3:
        raise ValueError(f"grouped_conv1d: weight must be rank 3, got {W.shape}")
    n, c_in, length = X.shape
    c_out, cg, k = W.shape
    if stride < 1:
        raise ValueError("grouped_conv1d: stride must be >= 1")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"grouped_conv1d: groups={groups} must divide c_in={c_in} and c_out={c_out}")
    if cg != c_in // groups:
        raise ValueError(f"grouped_conv1d: weight expects {cg * groups} input channels, got {c_in}")
    left, right = _pads(padding)
    if length + left + right < k:
        raise ValueError(f"grouped_conv1d: input length {length} (+padding) shorter than kernel {k}")
    t_out = (length + left + right - k) // stride + 1
    og = c_out // groups
    Xp = np.pad(X, ((0, 0), (0, 0), (left, right))) if left or right else X
    span = stride * (t_out - 1) + 1

    depthwise = cg == 1 and og == 1
    pointwise = k == 1 and stride == 1

    if pointwise and groups == 1:
        out = np.matmul(W[:, :, 0], Xp)
    elif depthwise:
        out = np.zeros((n, c_out, t_out), dtype=np.result_type(X, W))
        for j in range(k):
            out += Xp[:, :, j:j + span:stride] * W[None, :, 0, j, None]
    else:
        win = sliding_window_view(Xp, k, axis=2)[:, :, ::stride, :]
        out = np.empty((n, c_out, t_out), dtype=np.result_type(X, W))
        for g in range(groups):
            ci, co = slice(g * cg, (g + 1) * cg), slice(g * og, (g + 1) * og)
            out[:, co] = np.tensordot(win[:, ci], W[co], axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    check_finite(out, "grouped_conv1d")

    def backward_fn(gy):
        gY = gy if batched else gy[None]
        gx = gw = None
        if weight.requires_grad:
            if pointwise and groups == 1:
                gw = np.einsum("not,nct->oc", gY, Xp)[:, :, None]
            elif depthwise:
                gw = np.empty_like(W)
                for j in range(k):
                    gw[:, 0, j] = np.einsum("nct,nct->c", gY, Xp[:, :, j:j + span:stride])
            else:
                gw = np.empty_like(W)
                for g in range(groups):
                    ci, co = slice(g * cg, (g + 1) * cg), slice(g * og, (g + 1) * og)
                    gw[co] = np.tensordot(gY[:, co], win[:, ci], axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gxp = np.zeros_like(Xp)
            if pointwise and groups == 1:
                gxp = np.matmul(W[:, :, 0].T, gY)
            elif depthwise:
                for j in range(k):
                    gxp[:, :, j:j + span:stride] += gY * W[None, :, 0, j, None]
            else:
                for g in range(groups):
                    ci, co = slice(g * cg, (g + 1) * cg), slice(g * og, (g + 1) * og)
                    # [n, T_out, cg, k]
                    gwin = np.tensordot(gY[:, co], W[co], axes=([1], [0]))
                    for j in range(k):
                        gxp[:, ci, j:j + span:stride] += gwin[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left:left + length]
            gx = _unbatch(gx, batched)
        return gx, gw

    return record("grouped_conv1d", (x, weight), Tensor(_unbatch(out, batched)), backward_fn)


def depthwise_conv1d(x: Tensor, weight: Tensor, stride: int = 1, padding: Padding = 0) -> Tensor:
    """Per-channel temporal convolution; ``weight`` is ``[c, 1, k]``."""
    c = x.shape[-2]
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ValueError(f"depthwise_conv1d: weight {weight.shape} does not match {c} channels")
    return grouped_conv1d(x, weight, stride=stride, padding=padding, groups=c)


def avg_pool1d(x: Tensor, width: int, stride: Optional[int] = None) -> Tensor:
    X, batched = _as_batch(x, "avg_pool1d")
    stride = width if stride is None else stride
    if width < 1 or stride < 1:
        raise ValueError("avg_pool1d: width and stride must be >= 1")
    length = X.shape[2]
    if length < width:
        raise ValueError(f"avg_pool1d: input length {length} shorter than window {width}")
    t_out = (length - width) // stride + 1
    span = stride * (t_out - 1) + 1
    out = np.zeros(X.shape[:2] + (t_out,), dtype=X.dtype)
    for j in range(width):
        out += X[:, :, j:j + span:stride]
    out /= width

    def backward_fn(gy):
        gY = (gy if batched else gy[None]) / width
        gx = np.zeros_like(X)
        for j in range(width):
            gx[:, :, j:j + span:stride] += gY
        return (_unbatch(gx, batched),)

    return record("avg_pool1d", (x,), Tensor(_unbatch(out, batched)), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis: ``[c, T] -> [c]``, ``[n, c, T] -> [n, c]``."""
    if x.ndim not in (2, 3):
        raise ValueError(f"global_avg_pool: expected rank 2 or 3, got {x.shape}")
    length = x.shape[-1]
    if length == 0:
        raise ValueError("global_avg_pool: empty time axis")
    out = x.data.mean(axis=-1)

    def backward_fn(gy):
        return (np.broadcast_to(gy[..., None] / length, x.shape).copy(),)

    return record("global_avg_pool", (x,), Tensor(out), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[c]`` or ``[n, c]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: shapes x={x.shape} w={weight.shape} b={bias.shape}")
    out = check_finite(x.data @ weight.data.T + bias.data, "linear")

    def backward_fn(gy):
        gx = gy @ weight.data
        if gy.ndim == 1:
            gw = np.outer(gy, x.data)
            gb = gy
        else:
            gw = gy.T @ x.data
            gb = gy.sum(axis=0)
        return gx, gw, gb

    return record("linear", (x, weight, bias), Tensor(out), backward_fn)


def log_compress(x: Tensor) -> Tensor:
    """Elementwise ``log(|x| + 1)``; the subgradient of ``|x|`` at 0 is 0."""
    out = np.log1p(np.abs(x.data))

    def backward_fn(gy):
        return (gy * np.sign(x.data) / (1.0 + np.abs(x.data)),)

    return record("log_compress", (x,), Tensor(out), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(gy):
        return (gy * (x.data > 0),)

    return record("relu", (x,), Tensor(out), backward_fn)


@dataclass
class BNState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel batch normalization with affine ``gamma``/``beta``.

    Training normalizes by the statistics of the current batch (over samples
    and time) and updates the running averages in ``state``.
    """
    X, batched = _as_batch(x, "batchnorm1d")
    c = X.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm1d: affine params must be ({c},)")
    G = gamma.data[None, :, None]
    B = beta.data[None, :, None]
    if training:
        m = X.shape[0] * X.shape[2]
        mean = X.mean(axis=(0, 2))
        var = X.var(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (X - mean[None, :, None]) * inv_std[None, :, None]
        mom = state.momentum
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
        state.num_batches_tracked += 1
    else:
        if state.num_batches_tracked == 0:
            raise RuntimeError("batchnorm1d: eval mode before any running statistics were recorded")
        m = None
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (X - state.running_mean[None, :, None]) * inv_std[None, :, None]
    out = check_finite(G * xhat + B, "batchnorm1d")

    def backward_fn(gy):
        gY = gy if batched else gy[None]
        ggamma = (gY * xhat).sum(axis=(0, 2))
        gbeta = gY.sum(axis=(0, 2))
        gxhat = gY * G
        if training:
            s1 = gxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            gx = (gxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None]
        else:
            gx = gxhat * inv_std[None, :, None]
        return _unbatch(gx, batched), ggamma, gbeta

    return record("batchnorm1d", (x, gamma, beta), Tensor(_unbatch(out, batched)), backward_fn)


def spatial_dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Zero whole channels with probability ``p`` and rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"spatial_dropout: rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("spatial_dropout: training mode needs an rng")
    X, batched = _as_batch(x, "spatial_dropout")
    keep = (rng.random(X.shape[:2]) >= p).astype(X.dtype) / (1.0 - p)
    mask = keep[:, :, None]
    out = X * mask

    def backward_fn(gy):
        gY = gy if batched else gy[None]
        return (_unbatch(gY * mask, batched),)

    return record("spatial_dropout", (x,), Tensor(_unbatch(out, batched)), backward_fn)


def weighted_softmax_cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """``-w[target] * log softmax(logits)[target]``, averaged over a batch.

    ``logits`` is ``[n_class]`` with an int ``target`` or ``[n, n_class]``
    with ``n`` targets. ``weights`` holds one non-negative scalar per class.
    """
    Z = logits.data
    single = Z.ndim == 1
    if single:
        Z = Z[None]
    if Z.ndim != 2:
        raise ValueError(f"cross entropy: logits must be rank 1 or 2, got {logits.shape}")
    n, k = Z.shape
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (n,):
        raise ValueError(f"cross entropy: expected {n} targets, got {t.shape}")
    if np.any(t < 0) or np.any(t >= k):
        raise ValueError(f"cross entropy: target out of range [0, {k})")
    w = np.ones(k, dtype=Z.dtype) if weights is None else np.asarray(weights, dtype=Z.dtype)
    if w.shape != (k,):
        raise ValueError(f"cross entropy: need {k} class weights, got {w.shape}")
    if np.any(w < 0):
        raise ValueError("cross entropy: class weights must be >= 0")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_prob = shifted - log_norm
    wt = w[t]
    losses = -wt * log_prob[np.arange(n), t]
    loss = check_finite(np.asarray(losses.mean(), dtype=Z.dtype), "cross entropy")

    def backward_fn(gy):
        prob = np.exp(log_prob)
        prob[np.arange(n), t] -= 1.0
        gz = prob * (wt / n)[:, None] * gy
        return (gz[0] if single else gz,)

    return record("cross_entropy", (logits,), Tensor(loss), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    """Split along the channel axis into consecutive chunks of ``sizes``."""
    c = x.shape[-2]
    if sum(sizes) != c:
        raise ValueError(f"split_channels: sizes {list(sizes)} do not sum to {c}")
    if len(sizes) == 1:
        return [x]
    bounds = np.cumsum([0, *sizes])
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        parts.append(_channel_slice(x, int(lo), int(hi)))
    return parts


def _channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    out = x.data[..., lo:hi, :].copy()

    def backward_fn(gy):
        gx = np.zeros_like(x.data)
        gx[..., lo:hi, :] = gy
        return (gx,)

    return record("channel_slice", (x,), Tensor(out), backward_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def backward_fn(gy):
        return tuple(gy[..., lo:hi, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat_channels", tuple(parts), Tensor(out), backward_fn)
