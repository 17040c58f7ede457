"""Differentiable operators over `Tensor`, recorded on the active `Tape`.

All convolutions use same-with-zeros padding and odd kernel sizes, so spatial
and sequence lengths are preserved. Every operator validates its input shapes
up front, computes the forward result, and (when a tape is active and any
input requires gradients) records a closure that maps the upstream gradient
to gradients of the operator's inputs.

Operators accept either a `Tensor` or a `Parameter` in any tensor slot;
parameters are registered on the active tape so `Tape.backward` can deposit
their gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tape, Tensor

__all__ = [
    "conv1d",
    "conv2d",
    "BatchNormState",
    "batchnorm2d",
    "activation",
    "relu",
    "tanh",
    "silu",
    "linear",
    "reverse_axis",
    "mean_reduce",
    "concat",
    "stack_rows",
    "add",
    "mul",
    "reshape",
    "transpose",
    "sum_all",
    "softmax_cross_entropy",
]

ACTIVATION_KINDS = ("relu", "tanh", "silu")


def _unwrap(x: Tensor | Parameter) -> tuple[Tensor, np.ndarray]:
    """Resolve a Tensor/Parameter argument; register parameters on the tape."""
    if isinstance(x, Parameter):
        tape = Tape.active()
        if tape is not None:
            tape.register(x)
        return x.value, x.value.data
    return x, x.data


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _out(arr: np.ndarray, *inputs: Tensor) -> tuple[Tensor, bool]:
    """Wrap a forward result; returns (tensor, record?)."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(arr, requires_grad=req)
    return out, req and Tape.active() is not None


def _record(out: Tensor, rule) -> None:
    Tape.active().record(out, rule)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# convolutions


def conv1d(x: Tensor | Parameter, kernels: Tensor | Parameter, bias: Tensor | Parameter) -> Tensor:
    """1-D cross-correlation along the length axis, same-with-zeros padding.

    x: [C_in, L] or batched [N, C_in, L]; kernels: [C_out, C_in, K] with K
    odd; bias: [C_out]. Output matches the input form.
    """
    xt, xd = _unwrap(x)
    kt, kd = _unwrap(kernels)
    bt, bd = _unwrap(bias)
    if xd.ndim not in (2, 3):
        raise ValueError(f"conv1d input must be [C_in, L] or [N, C_in, L], got shape {xd.shape}")
    if kd.ndim != 3:
        raise ValueError(f"conv1d kernels must be [C_out, C_in, K], got shape {kd.shape}")
    c_out, c_in, k = kd.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d kernel size must be odd, got {k}")
    batched = xd.ndim == 3
    xb = xd if batched else xd[None]
    if xb.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: input has {xb.shape[1]}, kernels expect {c_in}")
    if bd.shape != (c_out,):
        raise ValueError(f"conv1d bias must be [C_out]={c_out}, got shape {bd.shape}")
    n, _, length = xb.shape
    r = k // 2
    xp = np.zeros((n, c_in, length + 2 * r), dtype=xd.dtype)
    xp[:, :, r : r + length] = xb
    # [N, C_in*K, L]: all K shifted windows, flattened for one matmul
    x2 = np.stack([xp[:, :, i : i + length] for i in range(k)], axis=2).reshape(n, c_in * k, length)
    w2 = kd.reshape(c_out, c_in * k)
    out_arr = np.matmul(w2, x2) + bd[:, None]
    if not batched:
        out_arr = out_arr[0]

    out, rec = _out(out_arr, xt, kt, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            g3 = g if batched else g[None]
            if kt.requires_grad:
                _acc(kt, np.matmul(g3, x2.transpose(0, 2, 1)).sum(axis=0).reshape(c_out, c_in, k))
            if bt.requires_grad:
                _acc(bt, g3.sum(axis=(0, 2)))
            if xt.requires_grad:
                gxs = np.matmul(w2.T, g3).reshape(n, c_in, k, length)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    gxp[:, :, i : i + length] += gxs[:, :, i, :]
                gx = gxp[:, :, r : r + length]
                _acc(xt, gx if batched else gx[0])

        _record(out, rule)
    return out


def conv2d(x: Tensor | Parameter, kernels: Tensor | Parameter, bias: Tensor | Parameter) -> Tensor:
    """2-D cross-correlation with same-with-zeros padding.

    x: [C_in, H, W] or batched [N, C_in, H, W]; kernels: [C_out, C_in, K, K]
    with K odd; bias: [C_out]. Output matches the input form.
    """
    xt, xd = _unwrap(x)
    kt, kd = _unwrap(kernels)
    bt, bd = _unwrap(bias)
    if xd.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be [C_in, H, W] or [N, C_in, H, W], got shape {xd.shape}")
    if kd.ndim != 4 or kd.shape[2] != kd.shape[3]:
        raise ValueError(f"conv2d kernels must be [C_out, C_in, K, K], got shape {kd.shape}")
    c_out, c_in, k, _ = kd.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    batched = xd.ndim == 4
    xb = xd if batched else xd[None]
    if xb.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {xb.shape[1]}, kernels expect {c_in}")
    if bd.shape != (c_out,):
        raise ValueError(f"conv2d bias must be [C_out]={c_out}, got shape {bd.shape}")
    n, _, h, w = xb.shape
    r = k // 2
    xp = np.zeros((n, c_in, h + 2 * r, w + 2 * r), dtype=xd.dtype)
    xp[:, :, r : r + h, r : r + w] = xb
    # [N, C_in*K*K, H*W]: all K*K shifted windows, flattened for one matmul
    x2 = np.stack(
        [xp[:, :, i : i + h, j : j + w] for i in range(k) for j in range(k)], axis=2
    ).reshape(n, c_in * k * k, h * w)
    w2 = kd.reshape(c_out, c_in * k * k)
    out_arr = np.matmul(w2, x2).reshape(n, c_out, h, w) + bd[:, None, None]
    if not batched:
        out_arr = out_arr[0]

    out, rec = _out(out_arr, xt, kt, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            g3 = (g if batched else g[None]).reshape(n, c_out, h * w)
            if kt.requires_grad:
                _acc(kt, np.matmul(g3, x2.transpose(0, 2, 1)).sum(axis=0).reshape(c_out, c_in, k, k))
            if bt.requires_grad:
                _acc(bt, g3.sum(axis=(0, 2)))
            if xt.requires_grad:
                gxs = np.matmul(w2.T, g3).reshape(n, c_in, k, k, h, w)
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + h, j : j + w] += gxs[:, :, i, j]
                gx = gxp[:, :, r : r + h, r : r + w]
                _acc(xt, gx if batched else gx[0])

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics of one batchnorm layer (not differentiated).

    Training mode updates the running mean/variance by exponential moving
    average with the configured momentum; inference mode reads them.
    Variances are biased (1/M) estimates throughout.
    """

    __slots__ = ("running_mean", "running_var", "eps", "momentum")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum


def batchnorm2d(
    x: Tensor | Parameter,
    gamma: Tensor | Parameter,
    beta: Tensor | Parameter,
    state: BatchNormState,
    training: bool,
) -> Tensor:
    """Per-channel batch normalization over [N, C, H, W].

    Training mode normalizes with batch statistics (and updates the running
    stats); inference mode normalizes with the stored running stats.
    """
    xt, xd = _unwrap(x)
    gt, gd = _unwrap(gamma)
    bt, bd = _unwrap(beta)
    if xd.ndim != 4:
        raise ValueError(f"batchnorm2d input must be [N, C, H, W], got shape {xd.shape}")
    n, c, h, w = xd.shape
    if gd.shape != (c,) or bd.shape != (c,):
        raise ValueError(f"batchnorm2d gamma/beta must be [C]={c}, got {gd.shape}/{bd.shape}")
    m = n * h * w
    if training:
        if m < 2:
            raise ValueError("batchnorm2d train mode needs at least 2 elements per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(
            state.running_var.dtype
        )
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out_arr = gd[:, None, None] * xhat + bd[:, None, None]

    out, rec = _out(out_arr, xt, gt, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            if gt.requires_grad:
                _acc(gt, (g * xhat).sum(axis=(0, 2, 3)))
            if bt.requires_grad:
                _acc(bt, g.sum(axis=(0, 2, 3)))
            if xt.requires_grad:
                gight = g * gd[:, None, None]
                if training:
                    sum_g = gight.sum(axis=(0, 2, 3), keepdims=True)
                    sum_gx = (gight * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (inv_std[:, None, None] / m) * (m * gight - sum_g - xhat * sum_gx)
                else:
                    dx = gight * inv_std[:, None, None]
                _acc(xt, dx)

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# elementwise activations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: Tensor | Parameter) -> Tensor:
    xt, xd = _unwrap(x)
    out, rec = _out(np.maximum(xd, 0), xt)
    if rec:
        mask = xd > 0

        def rule(g: np.ndarray) -> None:
            _acc(xt, g * mask)

        _record(out, rule)
    return out


def tanh(x: Tensor | Parameter) -> Tensor:
    xt, xd = _unwrap(x)
    t = np.tanh(xd)
    out, rec = _out(t, xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, g * (1.0 - t * t))

        _record(out, rule)
    return out


def silu(x: Tensor | Parameter) -> Tensor:
    xt, xd = _unwrap(x)
    s = _sigmoid(xd)
    out, rec = _out(xd * s, xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, g * (s * (1.0 + xd * (1.0 - s))))

        _record(out, rule)
    return out


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "silu": silu}


def activation(x: Tensor | Parameter, kind: str) -> Tensor:
    """Elementwise non-linearity; `kind` is one of relu|tanh|silu."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATION_KINDS}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# linear / structural ops


def linear(
    x: Tensor | Parameter,
    weight: Tensor | Parameter,
    bias: Tensor | Parameter | None = None,
) -> Tensor:
    """Affine map on the trailing dimension: [..., D_in] -> [..., D_out]."""
    xt, xd = _unwrap(x)
    wt, wd = _unwrap(weight)
    if wd.ndim != 2:
        raise ValueError(f"linear weight must be [D_out, D_in], got shape {wd.shape}")
    d_out, d_in = wd.shape
    if xd.shape[-1] != d_in:
        raise ValueError(f"linear dimension mismatch: input trailing dim {xd.shape[-1]}, weight expects {d_in}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, d_in)
    out_arr = x2 @ wd.T
    if bias is not None:
        bt, bd = _unwrap(bias)
        if bd.shape != (d_out,):
            raise ValueError(f"linear bias must be [D_out]={d_out}, got shape {bd.shape}")
        out_arr = out_arr + bd
    else:
        bt = None
    out, rec = _out(out_arr.reshape(lead + (d_out,)), *(t for t in (xt, wt, bt) if t is not None))
    if rec:

        def rule(g: np.ndarray) -> None:
            g2 = g.reshape(-1, d_out)
            if wt.requires_grad:
                _acc(wt, g2.T @ x2)
            if bt is not None and bt.requires_grad:
                _acc(bt, g2.sum(axis=0))
            if xt.requires_grad:
                _acc(xt, (g2 @ wd).reshape(xd.shape))

        _record(out, rule)
    return out


def reverse_axis(x: Tensor | Parameter, axis: int) -> Tensor:
    """Reverse element order along one axis."""
    xt, xd = _unwrap(x)
    if not 0 <= axis < xd.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{xd.ndim} tensor")
    out, rec = _out(np.flip(xd, axis=axis).copy(), xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, np.flip(g, axis=axis))

        _record(out, rule)
    return out


def mean_reduce(x: Tensor | Parameter, axis: int) -> Tensor:
    """Arithmetic mean along one axis (the axis is removed)."""
    xt, xd = _unwrap(x)
    if not 0 <= axis < xd.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{xd.ndim} tensor")
    n = xd.shape[axis]
    if n < 1:
        raise ValueError("mean_reduce over zero-length axis")
    out, rec = _out(xd.mean(axis=axis), xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, np.broadcast_to(np.expand_dims(g / n, axis), xd.shape))

        _record(out, rule)
    return out


def concat(a: Tensor | Parameter, b: Tensor | Parameter, axis: int) -> Tensor:
    """Join two tensors along `axis`; all other dims must match."""
    at, ad = _unwrap(a)
    bt, bd = _unwrap(b)
    if ad.ndim != bd.ndim:
        raise ValueError(f"concat rank mismatch: {ad.shape} vs {bd.shape}")
    if not 0 <= axis < ad.ndim:
        raise ValueError(f"axis {axis} out of range for rank-{ad.ndim} tensor")
    for ax in range(ad.ndim):
        if ax != axis and ad.shape[ax] != bd.shape[ax]:
            raise ValueError(f"concat shape mismatch on axis {ax}: {ad.shape} vs {bd.shape}")
    na = ad.shape[axis]
    out, rec = _out(np.concatenate([ad, bd], axis=axis), at, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            ga, gb = np.split(g, [na], axis=axis)
            _acc(at, ga)
            _acc(bt, gb)

        _record(out, rule)
    return out


def stack_rows(tensors: list[Tensor | Parameter]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    if not tensors:
        raise ValueError("stack_rows of an empty list")
    pairs = [_unwrap(t) for t in tensors]
    shape0 = pairs[0][1].shape
    for _, d in pairs[1:]:
        if d.shape != shape0:
            raise ValueError(f"stack_rows shape mismatch: {d.shape} vs {shape0}")
    out, rec = _out(np.stack([d for _, d in pairs], axis=0), *(t for t, _ in pairs))
    if rec:

        def rule(g: np.ndarray) -> None:
            for i, (t, _) in enumerate(pairs):
                _acc(t, g[i])

        _record(out, rule)
    return out


def add(a: Tensor | Parameter, b: Tensor | Parameter) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    at, ad = _unwrap(a)
    bt, bd = _unwrap(b)
    out, rec = _out(ad + bd, at, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(at, _unbroadcast(g, ad.shape))
            _acc(bt, _unbroadcast(g, bd.shape))

        _record(out, rule)
    return out


def mul(a: Tensor | Parameter, b: Tensor | Parameter) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    at, ad = _unwrap(a)
    bt, bd = _unwrap(b)
    out, rec = _out(ad * bd, at, bt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(at, _unbroadcast(g * bd, ad.shape))
            _acc(bt, _unbroadcast(g * ad, bd.shape))

        _record(out, rule)
    return out


def reshape(x: Tensor | Parameter, shape: tuple[int, ...]) -> Tensor:
    xt, xd = _unwrap(x)
    out, rec = _out(xd.reshape(shape), xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, g.reshape(xd.shape))

        _record(out, rule)
    return out


def transpose(x: Tensor | Parameter, axes: tuple[int, ...]) -> Tensor:
    xt, xd = _unwrap(x)
    if sorted(axes) != list(range(xd.ndim)):
        raise ValueError(f"transpose axes {axes} invalid for rank-{xd.ndim} tensor")
    inv = np.argsort(axes)
    out, rec = _out(np.ascontiguousarray(xd.transpose(axes)), xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, g.transpose(inv))

        _record(out, rule)
    return out


def sum_all(x: Tensor | Parameter) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    xt, xd = _unwrap(x)
    out, rec = _out(np.asarray(xd.sum(), dtype=xd.dtype), xt)
    if rec:

        def rule(g: np.ndarray) -> None:
            _acc(xt, np.broadcast_to(g, xd.shape))

        _record(out, rule)
    return out


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor | Parameter, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class, over a batch.

    logits: [N, C]; labels: integer array [N] with values in [0, C).
    Max-subtraction keeps the log-sum-exp stable.
    """
    lt, ld = _unwrap(logits)
    if ld.ndim != 2:
        raise ValueError(f"logits must be [N, C], got shape {ld.shape}")
    n, c = ld.shape
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError(f"labels must be [N]={n}, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError(f"labels out of range [0, {c})")
    lab = lab.astype(np.int64)
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), lab].mean()

    out, rec = _out(np.asarray(loss, dtype=ld.dtype), lt)
    if rec:

        def rule(g: np.ndarray) -> None:
            p = np.exp(logp)
            p[np.arange(n), lab] -= 1.0
            _acc(lt, (float(g) / n) * p)

        _record(out, rule)
    return out
