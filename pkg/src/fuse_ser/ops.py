"""Layer primitives for the CNN14 family, each with an analytic backward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, make_result


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_rank(t: Tensor, rank: int, name: str, layout: str) -> None:
    if t.ndim != rank:
        raise DimensionError(
            f"{name} must have rank {rank} ({layout}), got shape {t.shape}", axis="rank"
        )


def _pad(a: np.ndarray, p_t: int, p_f: int) -> np.ndarray:
    if not (p_t or p_f):
        return a
    return np.pad(a, ((0, 0), (0, 0), (p_t, p_t), (p_f, p_f)))


def _im2col(xp: np.ndarray, k_t: int, k_f: int, s_t: int, s_f: int, t_out: int, f_out: int) -> np.ndarray:
    """Patch matrix with rows (C, kT, kF) and columns (N, T', F')."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k_t, k_f, n, t_out, f_out), dtype=xp.dtype)
    for i in range(k_t):
        for j in range(k_f):
            cols[:, i, j] = xp[:, :, i:i + s_t * t_out:s_t, j:j + s_f * f_out:s_f].transpose(1, 0, 2, 3)
    return cols.reshape(c * k_t * k_f, n * t_out * f_out)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation on ``[N, C, T, F]`` inputs."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank(x, 4, "input", "N,C,T,F")
    _check_rank(weight, 4, "weight", "C_out,C_in,kT,kF")
    s_t, s_f = _pair(stride)
    p_t, p_f = _pair(padding)
    if min(s_t, s_f) < 1 or min(p_t, p_f) < 0:
        raise ValueError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c_in, t_in, f_in = x.shape
    c_out, w_cin, k_t, k_f = weight.shape
    if w_cin != c_in:
        raise DimensionError(
            f"input has {c_in} channels but weight expects {w_cin}", axis="C_in"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"bias shape {bias.shape} != ({c_out},)", axis="C_out")
    if t_in + 2 * p_t < k_t:
        raise DimensionError(f"kernel height {k_t} exceeds padded input {t_in + 2 * p_t}", axis="T")
    if f_in + 2 * p_f < k_f:
        raise DimensionError(f"kernel width {k_f} exceeds padded input {f_in + 2 * p_f}", axis="F")

    t_out = (t_in + 2 * p_t - k_t) // s_t + 1
    f_out = (f_in + 2 * p_f - k_f) // s_f + 1
    xp = _pad(x.data, p_t, p_f)
    cols = _im2col(xp, k_t, k_f, s_t, s_f, t_out, f_out)
    w2 = weight.data.reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, t_out, f_out).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            tp, fp = t_in + 2 * p_t, f_in + 2 * p_f
            if s_t == 1 and s_f == 1:
                # full correlation of g with the flipped, channel-transposed kernel
                gp = _pad(g, k_t - 1, k_f - 1)
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
                dxp = (flipped @ _im2col(gp, k_t, k_f, 1, 1, tp, fp)).reshape(c_in, n, tp, fp)
                dxp = dxp.transpose(1, 0, 2, 3)
            else:
                dcols = (w2.T @ g2).reshape(c_in, k_t, k_f, n, t_out, f_out)
                dxp = np.zeros((n, c_in, tp, fp), dtype=g.dtype)
                for i in range(k_t):
                    for j in range(k_f):
                        dxp[:, :, i:i + s_t * t_out:s_t, j:j + s_f * f_out:s_f] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(dxp[:, :, p_t:p_t + t_in, p_f:p_f + f_in])
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


@dataclass
class BatchNormState:
    """Running per-channel statistics of a batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    num_batches_tracked: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


class UninitializedStatisticsError(RuntimeError):
    pass


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch normalisation over (N, T, F).

    In train mode the batch statistics are used and ``state`` is updated in
    place; in eval mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank(x, 4, "input", "N,C,T,F")
    n, c, t, f = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or state.running_mean.shape != (c,):
        raise DimensionError(f"batch-norm parameters do not match {c} channels", axis="C")
    eps = state.eps
    g_b = gamma.data[None, :, None, None]

    if train:
        m = n * t * f
        if m < 2:
            raise DimensionError(
                f"train-mode batch norm needs at least 2 values per channel, got {m}", axis="N"
            )
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        mom = state.momentum
        unbiased = var.reshape(c) * (m / (m - 1))
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu.reshape(c)
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
        state.num_batches_tracked += 1
    else:
        if state.num_batches_tracked == 0:
            raise UninitializedStatisticsError(
                "uninitialized statistics: batch norm evaluated before any training batch"
            )
        mu = state.running_mean.astype(x.dtype)[None, :, None, None]
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + eps))[None, :, None, None]
        xhat = (x.data - mu) * inv_std
    out = xhat * g_b + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * g_b
        if train:
            m = n * t * f
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, x.dtype.type(0))  # NaN propagates

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def maxpool2d(x: Tensor, window=(2, 2)) -> Tensor:
    """Non-overlapping max pooling; a trailing odd remainder is discarded.

    Backward routes each window's gradient to its first maximum in row-major
    order, i.e. the lowest linear input index.
    """
    x = as_tensor(x)
    _check_rank(x, 4, "input", "N,C,T,F")
    k_t, k_f = _pair(window)
    n, c, t, f = x.shape
    if t < k_t:
        raise DimensionError(f"pool window {k_t} larger than time extent {t}", axis="T")
    if f < k_f:
        raise DimensionError(f"pool window {k_f} larger than frequency extent {f}", axis="F")
    t_out, f_out = t // k_t, f // k_f
    cropped = x.data[:, :, : t_out * k_t, : f_out * k_f]
    blocks = cropped.reshape(n, c, t_out, k_t, f_out, k_f).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, t_out, f_out, k_t * k_f)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, t_out, f_out, k_t * k_f), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, t_out, f_out, k_t, k_f).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : t_out * k_t, : f_out * k_f] = gb.reshape(n, c, t_out * k_t, f_out * k_f)
        return (gx,)

    return make_result(out, (x,), backward, "maxpool2d")


def global_pool(x: Tensor) -> Tensor:
    """Mean plus max over (T, F), per channel: ``[N, C, T, F] -> [N, C]``."""
    x = as_tensor(x)
    _check_rank(x, 4, "input", "N,C,T,F")
    n, c, t, f = x.shape
    flat = x.data.reshape(n, c, t * f)
    idx = flat.argmax(axis=-1)
    out = flat.mean(axis=-1) + np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.broadcast_to((g / (t * f))[..., None], (n, c, t * f)).copy()
        np.add.at(gx, (np.arange(n)[:, None], np.arange(c)[None, :], idx), g)
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), backward, "global_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    _check_rank(x, 2, "input", "N,D_in")
    _check_rank(weight, 2, "weight", "D_out,D_in")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"input width {x.shape[1]} != weight input width {weight.shape[1]}", axis="D_in"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} != ({weight.shape[0]},)", axis="D_out")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def broadcast_add_channels(maps: Tensor, vec: Tensor) -> Tensor:
    """Add ``vec[n, c]`` to every (t, f) position of ``maps[n, c]``."""
    maps, vec = as_tensor(maps), as_tensor(vec)
    _check_rank(maps, 4, "maps", "N,C,T,F")
    _check_rank(vec, 2, "vec", "N,C")
    if maps.shape[1] != vec.shape[1]:
        raise DimensionError(f"maps have {maps.shape[1]} channels, vec has {vec.shape[1]}", axis="C")
    if maps.shape[0] != vec.shape[0]:
        raise DimensionError(f"batch sizes differ: {maps.shape[0]} vs {vec.shape[0]}", axis="N")
    out = maps.data + vec.data[:, :, None, None]

    def backward(g):
        return g, g.sum(axis=(2, 3))

    return make_result(out, (maps, vec), backward, "broadcast_add_channels")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, train: bool) -> Tensor:
    x = as_tensor(x)
    if not train or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return make_result(x.data * keep, (x,), backward, "dropout")
