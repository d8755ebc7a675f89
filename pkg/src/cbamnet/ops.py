"""Forward primitives and their gradients.

All convolutional ops use the batch x height x width x channels layout.
Padding follows the usual CNN convention: "same" keeps ceil(H/stride) output
rows with symmetric zero padding, putting the extra element on the
bottom/right when the total is odd; "valid" takes only fully covered windows.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, accumulate_grad, make_node


def _same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (out_extent, pad_before, pad_after) for same padding."""
    out = -(-extent // stride)  # ceil division
    total = max((out - 1) * stride + kernel - extent, 0)
    before = total // 2
    return out, before, total - before


def _require_4d(t: Tensor, what: str) -> tuple[int, int, int, int]:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-d (batch, height, width, channels), got shape {t.shape}")
    return t.data.shape


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-d cross-correlation of an image batch with a kernel stack.

    x: (B, H, W, Cin); kernel: (Kh, Kw, Cin, Cout); bias: (Cout,) or None.
    """
    b, h, w, cin = _require_4d(x, "conv2d input")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d (Kh, Kw, Cin, Cout), got shape {kernel.shape}")
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input axis 3 has {cin} channels, kernel axis 2 has {kcin}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")

    if padding == "same":
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"conv2d valid padding needs input >= kernel, got {h}x{w} vs {kh}x{kw}")
        ho, pt, pb = (h - kh) // stride + 1, 0, 0
        wo, pl, pr = (w - kw) // stride + 1, 0, 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    kd = kernel.data
    out = np.zeros((b, ho, wo, cout))
    # One GEMM per kernel position keeps peak memory at one (B,Ho,Wo,C) slab.
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, di:di + (ho - 1) * stride + 1:stride,
                    dj:dj + (wo - 1) * stride + 1:stride, :]
            out += xs @ kd[di, dj]
    if bias is not None:
        out += bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def _backward(g):
        # Flattening to one big GEMM per kernel position beats many small ones.
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        if kernel.requires_grad:
            dk = np.zeros_like(kd)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                rs = slice(di, di + (ho - 1) * stride + 1, stride)
                cs = slice(dj, dj + (wo - 1) * stride + 1, stride)
                if kernel.requires_grad:
                    xs2 = xp[:, rs, cs, :].reshape(-1, cin)
                    dk[di, dj] = xs2.T @ g2
                if x.requires_grad:
                    dxp[:, rs, cs, :] += (g2 @ kd[di, dj].T).reshape(b, ho, wo, cin)
        if kernel.requires_grad:
            accumulate_grad(kernel, dk)
        if x.requires_grad:
            accumulate_grad(x, dxp[:, pt:pt + h, pl:pl + w, :] if (pt or pb or pl or pr) else dxp)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 1, 2)))

    return make_node(out, inputs, _backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: out[b, u] = sum_d x[b, d] w[d, u] (+ bias[u])."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"affine expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine inner dimensions disagree: input has {x.data.shape[1]}, weight has {weight.data.shape[0]}")
    if bias is not None and bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"affine bias must have shape ({weight.data.shape[1]},), got {bias.data.shape}")

    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        if x.requires_grad:
            accumulate_grad(x, g @ weight.data.T)
        if weight.requires_grad:
            accumulate_grad(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))

    return make_node(out, inputs, _backward)


class BatchNormState:
    """Per-channel running statistics, updated only in train mode."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        s = BatchNormState(len(self.running_mean))
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalize over all non-channel axes (channels last), then scale/shift.

    Train mode normalizes by batch statistics (population variance) and
    updates the running stats as running <- momentum*running + (1-momentum)*batch.
    Infer mode normalizes by the running stats and leaves them untouched.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm gamma/beta must have shape ({c},)")
    axes = tuple(range(x.data.ndim - 1))

    if mode == "train":
        if x.data.shape[0] < 2:
            raise ShapeError("batch_norm train mode requires batch size >= 2 (variance is degenerate)")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mean
        state.running_var = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data
    n = x.data.size // c

    def _backward(g):
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=axes))
        if x.requires_grad:
            if mode == "train":
                dx = g * gamma.data
                mean_dxhat = dx.mean(axis=axes)
                proj = (dx * xhat).sum(axis=axes) / n
                dx -= mean_dxhat
                dx -= xhat * proj
                dx *= inv_std
                accumulate_grad(x, dx)
            else:
                accumulate_grad(x, g * (gamma.data * inv_std))

    return make_node(out, (x, gamma, beta), _backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid."""
    if kind == "relu":
        out = np.maximum(x.data, 0.0)

        def _backward(g):
            accumulate_grad(x, g * (x.data > 0.0))

    elif kind == "sigmoid":
        out = np.empty_like(x.data)
        pos = x.data >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
        ex = np.exp(x.data[~pos])
        out[~pos] = ex / (1.0 + ex)

        def _backward(g):
            accumulate_grad(x, g * out * (1.0 - out))

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return make_node(out, (x,), _backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability; rows sum to 1."""
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise ShapeError(f"softmax expects (B, K) with K >= 2, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        accumulate_grad(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return make_node(out, (x,), _backward)


def pool(x: Tensor, mode: str) -> Tensor:
    """Global or channel-wise reductions of an image batch.

    global_avg/global_max reduce H,W -> (B,1,1,C); channel_avg/channel_max
    reduce C -> (B,H,W,1).
    """
    b, h, w, c = _require_4d(x, "pool input")
    if mode == "global_avg":
        out = x.data.mean(axis=(1, 2), keepdims=True)

        def _backward(g):
            accumulate_grad(x, np.broadcast_to(g / (h * w), x.data.shape))

    elif mode == "global_max":
        flat = x.data.reshape(b, h * w, c)
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(b, 1, 1, c)

        def _backward(g):
            dflat = np.zeros((b, h * w, c))
            np.put_along_axis(dflat, idx[:, None, :], g.reshape(b, 1, c), axis=1)
            accumulate_grad(x, dflat.reshape(b, h, w, c))

    elif mode == "channel_avg":
        out = x.data.mean(axis=3, keepdims=True)

        def _backward(g):
            accumulate_grad(x, np.broadcast_to(g / c, x.data.shape))

    elif mode == "channel_max":
        idx = x.data.argmax(axis=3)
        out = np.take_along_axis(x.data, idx[..., None], axis=3)

        def _backward(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx[..., None], g, axis=3)
            accumulate_grad(x, dx)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return make_node(out, (x,), _backward)


def avg_pool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Windowed average pooling (valid coverage only); used by transitions."""
    b, h, w, c = _require_4d(x, "avg_pool2d input")
    if h < size or w < size:
        raise ShapeError(f"avg_pool2d window {size} exceeds input {h}x{w}")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    out = np.zeros((b, ho, wo, c))
    for di in range(size):
        for dj in range(size):
            out += x.data[:, di:di + (ho - 1) * stride + 1:stride,
                          dj:dj + (wo - 1) * stride + 1:stride, :]
    out /= size * size

    def _backward(g):
        dx = np.zeros_like(x.data)
        gs = g / (size * size)
        for di in range(size):
            for dj in range(size):
                dx[:, di:di + (ho - 1) * stride + 1:stride,
                   dj:dj + (wo - 1) * stride + 1:stride, :] += gs
        accumulate_grad(x, dx)

    return make_node(out, (x,), _backward)


def max_pool2d(x: Tensor, size: int = 3, stride: int = 2, padding: str = "same") -> Tensor:
    """Windowed max pooling; same padding uses -inf fill so pads never win."""
    b, h, w, c = _require_4d(x, "max_pool2d input")
    if padding == "same":
        ho, pt, pb = _same_padding(h, size, stride)
        wo, pl, pr = _same_padding(w, size, stride)
    elif padding == "valid":
        if h < size or w < size:
            raise ShapeError(f"max_pool2d window {size} exceeds input {h}x{w}")
        ho, pt, pb = (h - size) // stride + 1, 0, 0
        wo, pl, pr = (w - size) // stride + 1, 0, 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=-np.inf) \
        if (pt or pb or pl or pr) else x.data
    out = np.full((b, ho, wo, c), -np.inf)
    for di in range(size):
        for dj in range(size):
            np.maximum(out, xp[:, di:di + (ho - 1) * stride + 1:stride,
                               dj:dj + (wo - 1) * stride + 1:stride, :], out=out)

    def _backward(g):
        # Ties route the gradient to the first window position in scan order.
        dxp = np.zeros_like(xp)
        taken = np.zeros(out.shape, dtype=bool)
        for di in range(size):
            for dj in range(size):
                rs = slice(di, di + (ho - 1) * stride + 1, stride)
                cs = slice(dj, dj + (wo - 1) * stride + 1, stride)
                hit = (xp[:, rs, cs, :] == out) & ~taken
                dxp[:, rs, cs, :] += g * hit
                taken |= hit
        accumulate_grad(x, dxp[:, pt:pt + h, pl:pl + w, :])

    return make_node(out, (x,), _backward)


def concat_channels(inputs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; blocks keep argument order."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    lead = inputs[0].data.shape[:-1]
    for t in inputs[1:]:
        if t.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels non-channel extents differ: {lead} vs {t.data.shape[:-1]}")
    out = np.concatenate([t.data for t in inputs], axis=-1)
    widths = [t.data.shape[-1] for t in inputs]

    def _backward(g):
        start = 0
        for t, width in zip(inputs, widths):
            if t.requires_grad:
                accumulate_grad(t, g[..., start:start + width])
            start += width

    return make_node(out, tuple(inputs), _backward)


def broadcast_mul(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply by a (B,1,1,C) channel gate or a (B,H,W,1) spatial gate."""
    b, h, w, c = _require_4d(x, "broadcast_mul input")
    gs = gate.data.shape
    if gs == (b, 1, 1, c):
        sum_axes = (1, 2)
    elif gs == (b, h, w, 1):
        sum_axes = (3,)
    else:
        raise ShapeError(
            f"gate shape {gs} is neither ({b},1,1,{c}) nor ({b},{h},{w},1) for input {x.shape}")
    out = x.data * gate.data

    def _backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * gate.data)
        if gate.requires_grad:
            accumulate_grad(gate, (g * x.data).sum(axis=sum_axes, keepdims=True))

    return make_node(out, (x, gate), _backward)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: kept elements are scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng stream")
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out = x.data * mask

    def _backward(g):
        accumulate_grad(x, g * mask)

    return make_node(out, (x,), _backward)


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray, class_weights: np.ndarray) -> Tensor:
    """Class-weighted categorical cross-entropy over a batch, mean reduction.

    loss = (1/B) * sum_i w[y_i] * (-log p[i, y_i]), with probabilities clipped
    to [1e-12, 1] before the log.
    """
    if probs.data.ndim != 2:
        raise ShapeError(f"weighted_cross_entropy expects (B, K) probabilities, got {probs.shape}")
    b, k = probs.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        bad = labels[(labels < 0) | (labels >= k)]
        raise ValueError(f"label out of range [0, {k}): {bad[0]}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeError(f"class_weights must have shape ({k},), got {weights.shape}")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")

    rows = np.arange(b)
    picked = probs.data[rows, labels]
    clipped = np.clip(picked, 1e-12, 1.0)
    w = weights[labels]
    out = np.asarray((w * -np.log(clipped)).mean())

    def _backward(g):
        dp = np.zeros_like(probs.data)
        inside = (picked >= 1e-12) & (picked <= 1.0)
        dp[rows, labels] = np.where(inside, -w / (b * clipped), 0.0)
        accumulate_grad(probs, g * dp)

    return make_node(out, (probs,), _backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def _backward(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return make_node(out, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def _backward(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return make_node(out, (a, b), _backward)


def total_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum())

    def _backward(g):
        accumulate_grad(x, np.broadcast_to(g, x.data.shape))

    return make_node(out, (x,), _backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def _backward(g):
        accumulate_grad(x, g.reshape(x.data.shape))

    return make_node(out, (x,), _backward)
