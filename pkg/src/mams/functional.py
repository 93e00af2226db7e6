"""Neural-network ops on :class:`~mams.tensor.Tensor` with analytic backward rules."""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import DimensionError, UsageError
from .tensor import Tensor, add

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw].

    Implemented as im2col (a strided window view) followed by one tensordot.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: padded input {h}x{w} (pad {padding}) smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = _kernel_matrix(weight.data)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = gb = None
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = _conv_input_grad(g, weight.data, x.shape, stride, padding)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def _im2col(arr: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions (n, i, j); columns are (di, dj, channel)."""
    n, c, h, w = arr.shape
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c))
    xp[:, padding:padding + h, padding:padding + w, :] = arr.transpose(0, 2, 3, 1)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    if kh == 1 and kw == 1:
        return np.ascontiguousarray(xp[:, :hs:stride, :ws:stride, :]).reshape(n * ho * wo, c)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hs:stride, j:j + ws:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _kernel_matrix(wdata: np.ndarray) -> np.ndarray:
    # [Cout, Cin, kh, kw] -> [Cout, kh*kw*Cin], matching the im2col column order
    return wdata.transpose(0, 2, 3, 1).reshape(wdata.shape[0], -1)


def _conv_input_grad(g: np.ndarray, wdata: np.ndarray, xshape, stride: int, padding: int) -> np.ndarray:
    n, cin, h, w = xshape
    cout, _, kh, kw = wdata.shape
    ho, wo = g.shape[2:]
    if stride == 1:
        # full correlation of the output gradient with the flipped, transposed kernel
        wflip = _kernel_matrix(wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        hp, wp = h + 2 * padding, w + 2 * padding
        gcols = _im2col(g, kh, kw, 1, kh - 1, hp, wp)
        gxp = (gcols @ wflip.T).reshape(n, hp, wp, cin).transpose(0, 3, 1, 2)
    else:
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gcols = (gmat @ _kernel_matrix(wdata)).reshape(n, ho, wo, kh, kw, cin)
        gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, cin))
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, i, j, :]
        gxp = gxp.transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(gxp)


class BatchNormState:
    """Running mean/variance buffers of one batch-norm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        other = BatchNormState(len(self.running_mean))
        other.running_mean[...] = self.running_mean
        other.running_var[...] = self.running_var
        return other


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: Optional[BatchNormState],
    mode: str = TRAIN,
    eps: float = 1e-5,
    momentum_bn: float = 0.1,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization for [N,C,H,W] or [N,F] inputs.

    In train mode the batch statistics (biased variance) normalize the input and,
    when ``update_stats``, the running buffers move toward them by ``momentum_bn``
    using the unbiased variance. Eval mode reads the running buffers.
    """
    _check_mode(mode)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects [N,C,H,W] or [N,F], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    count = x.data.size // c

    if mode == TRAIN:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        if state is not None and update_stats:
            unbiased = var * count / (count - 1) if count > 1 else var
            state.running_mean *= 1.0 - momentum_bn
            state.running_mean += momentum_bn * mean
            state.running_var *= 1.0 - momentum_bn
            state.running_var += momentum_bn * unbiased
    else:
        if state is None:
            raise UsageError("batch_norm in eval mode needs running statistics")
        mean, var = state.running_mean, state.running_var
        centered = x.data - mean.reshape(bshape)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if mode == TRAIN:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std.reshape(bshape)
        return gx, gg, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),), "silu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor._from_op(
        out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "gap"
    )


def dropout(x: Tensor, rate: float, mode: str = TRAIN, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs an explicit random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


__all__ = [
    "TRAIN",
    "add",
    "EVAL",
    "BatchNormState",
    "batch_norm",
    "conv2d",
    "conv_output_size",
    "dropout",
    "global_avg_pool",
    "linear",
    "relu",
    "sigmoid",
    "silu",
    "stop_gradient",
]
