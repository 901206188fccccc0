"""Differentiable 2D kernels and the Adam optimizer.

Everything here is a pure function: forward ops take arrays and return new
arrays, backward ops take the same primal arguments plus the upstream
gradient and return exact gradients of the forward map.  Single images only
(channels-first ``[C, H, W]``); there is no batch axis.  Ops preserve the
dtype of their inputs so the training path can run in float32 while
numerical checks run in float64.

Convolution is cross-correlation (no kernel flip), the universal
deep-learning convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, NumericError

__all__ = [
    "conv2d",
    "conv2d_backward",
    "activation",
    "activation_backward",
    "pool2d",
    "pool2d_backward",
    "avgpool_same",
    "avgpool_same_backward",
    "concat_channels",
    "concat_channels_backward",
    "AdamState",
    "adam_step",
]


def _check_conv_args(x: np.ndarray, kernels: np.ndarray, padding: str) -> int:
    if x.ndim != 3:
        raise ContractViolation(f"conv2d input must be [C,H,W], got shape {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ContractViolation(
            f"kernels must be [C_out,C_in,k,k], got shape {kernels.shape}"
        )
    k = kernels.shape[2]
    if k % 2 != 1:
        raise ContractViolation(f"kernel size must be odd, got {k}")
    if kernels.shape[1] != x.shape[0]:
        raise ContractViolation(
            f"input has {x.shape[0]} channels but kernels expect {kernels.shape[1]}"
        )
    if padding not in ("same", "valid"):
        raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")
    if padding == "valid" and (x.shape[1] < k or x.shape[2] < k):
        raise ContractViolation(
            f"valid padding needs spatial extents >= {k}, got {x.shape[1:]}"
        )
    return k


def _pad_same(x: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, padding: str = "same"
) -> np.ndarray:
    """Cross-correlate ``x [C_in,H,W]`` with ``kernels [C_out,C_in,k,k]`` plus bias.

    With ``padding='same'`` the output keeps the input's spatial extents
    (zero padding of (k-1)/2); with ``'valid'`` they shrink to H-k+1, W-k+1.
    """
    k = _check_conv_args(x, kernels, padding)
    if bias.shape != (kernels.shape[0],):
        raise ContractViolation(
            f"bias must have shape ({kernels.shape[0]},), got {bias.shape}"
        )
    xp = _pad_same(x, k) if padding == "same" else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [C_in, H', W', k, k]
    out = np.tensordot(kernels, win, axes=([1, 2, 3], [0, 3, 4]))
    out += bias[:, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    upstream: np.ndarray,
    padding: str = "same",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of :func:`conv2d` w.r.t. input, kernels and bias."""
    k = _check_conv_args(x, kernels, padding)
    c_out = kernels.shape[0]
    oh = x.shape[1] if padding == "same" else x.shape[1] - k + 1
    ow = x.shape[2] if padding == "same" else x.shape[2] - k + 1
    if upstream.shape != (c_out, oh, ow):
        raise ContractViolation(
            f"upstream gradient must have shape {(c_out, oh, ow)}, got {upstream.shape}"
        )

    xp = _pad_same(x, k) if padding == "same" else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    # d/dK[o,i,ki,kj] = sum_hw upstream[o,h,w] * win[i,h,w,ki,kj]
    grad_kernels = np.tensordot(upstream, win, axes=([1, 2], [1, 2]))
    grad_bias = upstream.sum(axis=(1, 2))

    # Scatter upstream back through each kernel tap.
    grad_pad = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            grad_pad[:, ki : ki + oh, kj : kj + ow] += np.tensordot(
                kernels[:, :, ki, kj], upstream, axes=([0], [0])
            )
    p = (k - 1) // 2 if padding == "same" else 0
    grad_input = grad_pad[:, p : p + x.shape[1], p : p + x.shape[2]]
    return (
        np.ascontiguousarray(grad_input, dtype=x.dtype),
        grad_kernels.astype(kernels.dtype, copy=False),
        grad_bias.astype(kernels.dtype, copy=False),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise ``relu`` or ``sigmoid``."""
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ContractViolation(f"unknown activation kind {kind!r}")


def activation_backward(x: np.ndarray, kind: str, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != x.shape:
        raise ContractViolation(
            f"upstream shape {upstream.shape} != input shape {x.shape}"
        )
    if kind == "relu":
        return np.where(x > 0, upstream, 0).astype(x.dtype, copy=False)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return (upstream * s * (1.0 - s)).astype(x.dtype, copy=False)
    raise ContractViolation(f"unknown activation kind {kind!r}")


def _check_pool_args(x: np.ndarray, kind: str, k: int) -> tuple[int, int]:
    if x.ndim != 3:
        raise ContractViolation(f"pool2d input must be [C,H,W], got shape {x.shape}")
    if kind not in ("avg", "max"):
        raise ContractViolation(f"pool kind must be 'avg' or 'max', got {kind!r}")
    if k < 1:
        raise ContractViolation(f"pool size must be >= 1, got {k}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ContractViolation(
            f"pool window {k} exceeds spatial extents {x.shape[1:]}"
        )
    return x.shape[1] // k, x.shape[2] // k


def pool2d(x: np.ndarray, kind: str, k: int) -> np.ndarray:
    """Non-overlapping k-by-k pooling with stride k; partial edge windows drop."""
    oh, ow = _check_pool_args(x, kind, k)
    c = x.shape[0]
    xv = x[:, : oh * k, : ow * k].reshape(c, oh, k, ow, k)
    if kind == "max":
        return xv.max(axis=(2, 4))
    return xv.mean(axis=(2, 4), dtype=x.dtype)


def pool2d_backward(x: np.ndarray, kind: str, k: int, upstream: np.ndarray) -> np.ndarray:
    """Gradient of :func:`pool2d`.

    Max routing sends the upstream to the first (row-major) maximum of each
    window; avg distributes upstream/k^2 uniformly.  Dropped edge rows and
    columns get zero gradient.
    """
    oh, ow = _check_pool_args(x, kind, k)
    if upstream.shape != (x.shape[0], oh, ow):
        raise ContractViolation(
            f"upstream must have shape {(x.shape[0], oh, ow)}, got {upstream.shape}"
        )
    c = x.shape[0]
    grad = np.zeros_like(x)
    gview = grad[:, : oh * k, : ow * k].reshape(c, oh, k, ow, k)
    if kind == "avg":
        gview += (upstream / (k * k))[:, :, None, :, None].astype(x.dtype)
        return grad
    # First-occurrence argmax over each k*k window, in row-major order.
    xv = x[:, : oh * k, : ow * k].reshape(c, oh, k, ow, k)
    flat = xv.transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, k * k)
    idx = flat.argmax(axis=3)
    ki, kj = np.divmod(idx, k)
    ci, hi, wi = np.indices(idx.shape)
    gview[ci, hi, ki, wi, kj] = upstream
    return grad


def avgpool_same(x: np.ndarray, k: int) -> np.ndarray:
    """Averaging over k-by-k windows with stride 1 and zero 'same' padding.

    Zeros from padding count toward the mean, so this is exactly
    cross-correlation with a uniform kernel.  Used by the pooling branch of
    the inception block.
    """
    if x.ndim != 3:
        raise ContractViolation(f"input must be [C,H,W], got shape {x.shape}")
    if k < 1 or k % 2 != 1:
        raise ContractViolation(f"window size must be odd and >= 1, got {k}")
    xp = _pad_same(x, k)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return (win.sum(axis=(3, 4)) / (k * k)).astype(x.dtype, copy=False)


def avgpool_same_backward(x: np.ndarray, k: int, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != x.shape:
        raise ContractViolation(
            f"upstream shape {upstream.shape} != input shape {x.shape}"
        )
    # The map is self-adjoint: the gradient is the same uniform smoothing.
    return avgpool_same(upstream, k)


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Concatenate ``[C_i,H,W]`` tensors along the channel axis, in order."""
    if not inputs:
        raise ContractViolation("concat_channels needs at least one input")
    spatial = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        if t.ndim != 3 or t.shape[1:] != spatial:
            raise ContractViolation(
                f"input {i} has spatial extents {t.shape[1:]}, expected {spatial}"
            )
    return np.concatenate(inputs, axis=0)


def concat_channels_backward(
    upstream: np.ndarray, channel_counts: list[int]
) -> list[np.ndarray]:
    """Slice the upstream gradient back into per-input pieces."""
    if upstream.shape[0] != sum(channel_counts):
        raise ContractViolation(
            f"upstream has {upstream.shape[0]} channels, inputs supplied "
            f"{sum(channel_counts)}"
        )
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(upstream, splits, axis=0)]


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def moments_for(self, name: str, param: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.first_moment:
            self.first_moment[name] = np.zeros_like(param)
            self.second_moment[name] = np.zeros_like(param)
        m, v = self.first_moment[name], self.second_moment[name]
        if m.shape != param.shape:
            raise ContractViolation(
                f"moment shape {m.shape} does not match parameter {name} {param.shape}"
            )
        return m, v


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update over named parameters, in place.

    Raises NumericError on any non-finite gradient; a silent NaN here would
    poison every later checkpoint.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m, v = state.moments_for(name, p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
            p.dtype
        )
