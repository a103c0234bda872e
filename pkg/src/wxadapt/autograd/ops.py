"""Differentiable tensor operations.

Every function takes and returns ``Tensor`` objects, computes the forward
result with numpy (or the compiled 3x3 kernels), and registers a backward
closure on the active tape. Shapes follow the NCHW convention for feature
maps and OIKK for convolution weights.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import Tensor, as_tensor, record_op


def _check_same_dtype(name, *tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"{name}: mixed dtypes {dt} and {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation) of NCHW input with OIKK weights.

    Output spatial size is floor((H + 2p - K)/s) + 1. Gradients are defined
    for the input, the weights, and the bias.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got shape {tuple(x.shape)}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be OIKK, got shape {tuple(w.shape)}")
    N, C, H, W = x.shape
    O, CI, KH, KW = w.shape
    if CI != C:
        raise ValueError(
            f"conv2d: input has {C} channels but weight expects {CI}"
        )
    if KH != KW:
        raise ValueError("conv2d: only square kernels are supported")
    if H + 2 * padding < KH or W + 2 * padding < KW:
        raise ValueError(
            f"conv2d: spatial dims {H}x{W} with padding {padding} smaller than "
            f"kernel {KH}"
        )
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(
                f"conv2d: bias shape {tuple(b.shape)} does not match {O} output "
                "channels"
            )
        _check_same_dtype("conv2d", x, w, b)
    else:
        _check_same_dtype("conv2d", x, w)

    if KH == 3 and stride == 1 and padding == 1:
        return _conv3x3_s1p1(x, w, b)
    return _conv2d_general(x, w, b, stride, padding)


def _pad1(a):
    N, C, H, W = a.shape
    out = np.zeros((N, C, H + 2, W + 2), dtype=a.dtype)
    out[:, :, 1:-1, 1:-1] = a
    return out


def _conv3x3_s1p1(x, w, b):
    N, C, H, W = x.shape
    O = w.shape[0]
    dt = x.data.dtype
    bias = b.data if b is not None else np.zeros(O, dtype=dt)
    xp = _pad1(x.data)
    out = np.empty((N, O, H, W), dtype=dt)
    kernels.conv3x3_forward(xp, w.data, bias, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            gp = _pad1(g)
            gx = np.empty_like(x.data)
            kernels.conv3x3_grad_x(gp, w.data, gx)
        if w.requires_grad or (b is not None and b.requires_grad):
            gw = np.zeros_like(w.data)
            gb = np.zeros(O, dtype=dt)
            kernels.conv3x3_grad_w(g, xp, gw, gb)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op("conv2d", out, inputs, backward)


def _conv2d_general(x, w, b, stride, padding):
    N, C, H, W = x.shape
    O, _, K, _ = w.shape
    dt = x.data.dtype
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        N * OH * OW, C * K * K
    )
    w2d = w.data.reshape(O, C * K * K)
    out2d = cols @ w2d.T
    if b is not None:
        out2d += b.data
    out = out2d.reshape(N, OH, OW, O).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(N * OH * OW, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(0)
        if x.requires_grad:
            gcols = gmat @ w2d
            gwin = gcols.reshape(N, OH, OW, C, K, K)
            gxp = np.zeros(
                (N, C, H + 2 * padding, W + 2 * padding), dtype=dt
            )
            for ki in range(K):
                for kj in range(K):
                    gxp[
                        :, :, ki : ki + stride * OH : stride, kj : kj + stride * OW : stride
                    ] += gwin[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op("conv2d", np.ascontiguousarray(out), inputs, backward)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x, kind="max", window=2, stride=None):
    """Max or average pooling. Max backward routes gradient to the first
    (row-major) argmax of each window; avg distributes uniformly."""
    x = as_tensor(x)
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown kind '{kind}'")
    if x.ndim != 4:
        raise ValueError(f"pool2d: input must be NCHW, got shape {tuple(x.shape)}")
    if stride is None:
        stride = window
    N, C, H, W = x.shape
    if window == stride:
        if H % stride != 0:
            raise ValueError(
                f"pool2d: height {H} not divisible by stride {stride}"
            )
        if W % stride != 0:
            raise ValueError(
                f"pool2d: width {W} not divisible by stride {stride}"
            )
    if window == 2 and stride == 2:
        return _pool2x2(x, kind)
    return _pool_general(x, kind, window, stride)


def _pool2x2(x, kind):
    d = x.data
    N, C, H, W = d.shape
    if kind == "max":
        out = np.empty((N, C, H // 2, W // 2), dtype=d.dtype)
        arg = np.empty((N, C, H // 2, W // 2), dtype=np.uint8)
        kernels.maxpool2x2_forward(d, out, arg)

        def backward(g):
            gx = np.zeros_like(d)
            kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg, gx)
            return (gx,)

    else:
        out = (
            d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2]
            + d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2]
        ) * d.dtype.type(0.25)

        def backward(g):
            gx = np.zeros_like(d)
            q = g * d.dtype.type(0.25)
            for view in (
                gx[:, :, 0::2, 0::2],
                gx[:, :, 0::2, 1::2],
                gx[:, :, 1::2, 0::2],
                gx[:, :, 1::2, 1::2],
            ):
                view += q
            return (gx,)

    return record_op(f"pool2d_{kind}", out, (x,), backward)


def _pool_general(x, kind, window, stride):
    d = x.data
    N, C, H, W = d.shape
    win = sliding_window_view(d, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    OH, OW = win.shape[2], win.shape[3]
    flat = win.reshape(N, C, OH, OW, window * window)
    if kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.ascontiguousarray(flat.max(axis=-1))
    else:
        out = flat.mean(axis=-1, dtype=d.dtype)

    def backward(g):
        gx = np.zeros_like(d)
        ns, cs, iis, js = np.meshgrid(
            np.arange(N), np.arange(C), np.arange(OH), np.arange(OW), indexing="ij"
        )
        if kind == "max":
            ki, kj = np.divmod(arg, window)
            np.add.at(gx, (ns, cs, iis * stride + ki, js * stride + kj), g)
        else:
            q = g / d.dtype.type(window * window)
            for ki in range(window):
                for kj in range(window):
                    np.add.at(gx, (ns, cs, iis * stride + ki, js * stride + kj), q)
        return (gx,)

    return record_op(f"pool2d_{kind}", out, (x,), backward)


# ---------------------------------------------------------------------------
# activations and reshaping


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(g):
        return (np.where(mask, g, 0),)

    return record_op("relu", out, (x,), backward)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1 - out * out),)

    return record_op("tanh", out, (x,), backward)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"activation: unknown kind '{kind}'")


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return record_op("reshape", out, (x,), backward)


def gather(x, idx):
    """Pick entries of the flattened input; output has the index array's
    shape. Backward scatter-adds into the picked positions."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.size):
        raise IndexError("gather: index out of range")
    out = x.data.reshape(-1)[idx]

    def backward(g):
        gx = np.zeros(x.size, dtype=x.data.dtype)
        np.add.at(gx, idx.reshape(-1), g.reshape(-1))
        return (gx.reshape(x.shape),)

    return record_op("gather", out, (x,), backward)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    out = a.data + b.data

    def backward(g):
        return (g, g)

    return record_op("add", out, (a, b), backward)


def scale(x, s):
    x = as_tensor(x)
    s = x.data.dtype.type(s)
    out = x.data * s

    def backward(g):
        return (g * s,)

    return record_op("scale", out, (x,), backward)


def affine(x, mul, shift):
    """Elementwise mul * x + shift with scalar constants."""
    x = as_tensor(x)
    mul = x.data.dtype.type(mul)
    shift = x.data.dtype.type(shift)
    out = x.data * mul + shift

    def backward(g):
        return (g * mul,)

    return record_op("affine", out, (x,), backward)


def sum_all(x):
    x = as_tensor(x)
    out = x.data.sum(dtype=x.data.dtype).reshape(())

    def backward(g):
        return (np.full(x.shape, g, dtype=x.data.dtype),)

    return record_op("sum", out, (x,), backward)


def grad_reverse(x, coeff=1.0):
    """Identity forward; backward multiplies the incoming gradient by -coeff.

    coeff 0 is allowed and blocks the gradient entirely (used to decouple the
    adversarial branch from the feature extractor).
    """
    x = as_tensor(x)
    if coeff < 0:
        raise ValueError(f"grad_reverse: coeff must be >= 0, got {coeff}")
    c = x.data.dtype.type(coeff)
    out = x.data.copy()

    def backward(g):
        return (-c * g,)

    return record_op("grad_reverse", out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training=True,
    momentum=0.1,
    eps=1e-5,
):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    arrays in place; eval mode uses the running statistics. Differentiable
    w.r.t. input, gamma and beta.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: input must be NCHW, got {tuple(x.shape)}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError("batchnorm2d: gamma/beta must have one entry per channel")
    dt = x.data.dtype
    eps = dt.type(eps)

    if training:
        m = N * H * W
        if m < 2:
            raise ValueError(
                "batchnorm2d: train mode needs at least 2 values per channel "
                f"(got batch*H*W = {m}); use a larger batch or spatial size"
            )
        mean = x.data.mean(axis=(0, 2, 3), dtype=dt)
        var = x.data.var(axis=(0, 2, 3), dtype=dt)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(dt, copy=False)
        var = running_var.astype(dt, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3), dtype=dt) if beta.requires_grad else None
        ggamma = (
            (g * xhat).sum(axis=(0, 2, 3), dtype=dt) if gamma.requires_grad else None
        )
        gx = None
        if x.requires_grad:
            gy = g * gamma.data[None, :, None, None]
            if training:
                m = dt.type(N * H * W)
                sum_gy = gy.sum(axis=(0, 2, 3), dtype=dt)
                sum_gy_xhat = (gy * xhat).sum(axis=(0, 2, 3), dtype=dt)
                gx = (
                    inv[None, :, None, None]
                    / m
                    * (m * gy - sum_gy[None, :, None, None] - xhat * sum_gy_xhat[None, :, None, None])
                )
            else:
                gx = gy * inv[None, :, None, None]
        return (gx, ggamma, gbeta)

    return record_op("batchnorm2d", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# losses


def mse_map_loss(pred, target):
    """Mean squared error over every entry (batch, channels, spatial)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"mse_map_loss: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    dt = pred.data.dtype
    diff = pred.data - target.data
    out = np.mean(diff * diff, dtype=dt).reshape(())

    def backward(g):
        coeff = g * dt.type(2.0 / diff.size)
        gp = coeff * diff if pred.requires_grad else None
        gt = -coeff * diff if target.requires_grad else None
        return (gp, gt)

    return record_op("mse_map_loss", out, (pred, target), backward)


def l1_penalty(x):
    """Per-sample L1 norm (sum of |entries| over non-batch axes), averaged
    over the batch. A 1-D input counts as a single sample."""
    x = as_tensor(x)
    dt = x.data.dtype
    if x.ndim <= 1:
        n = 1
    else:
        n = x.shape[0]
    out = (np.abs(x.data).sum(dtype=dt) / dt.type(n)).reshape(())

    def backward(g):
        return (g * np.sign(x.data) / dt.type(n),)

    return record_op("l1_penalty", out, (x,), backward)


def cross_entropy(logits, labels):
    """Softmax cross-entropy over rows of an (N, C) logit matrix, averaged
    over N."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be (N, C), got {tuple(logits.shape)}")
    N, C = logits.shape
    if labels.shape != (N,):
        raise ValueError("cross_entropy: labels must be one per row")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: label out of range [0, {C})")
    dt = logits.data.dtype
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, dtype=dt))
    nll = logsumexp - z[np.arange(N), labels]
    out = nll.mean(dtype=dt).reshape(())

    def backward(g):
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(N), labels] -= 1
        return (g * p / dt.type(N),)

    return record_op("cross_entropy", out, (logits,), backward)


def smooth_l1(pred, target, beta=1.0):
    """Smooth L1 (Huber-style) with quadratic zone |d| < beta, averaged over
    all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"smooth_l1: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    if beta <= 0:
        raise ValueError(f"smooth_l1: beta must be > 0, got {beta}")
    dt = pred.data.dtype
    beta = dt.type(beta)
    d = pred.data - target.data
    ad = np.abs(d)
    loss = np.where(ad < beta, dt.type(0.5) * d * d / beta, ad - dt.type(0.5) * beta)
    out = loss.mean(dtype=dt).reshape(())

    def backward(g):
        gd = np.where(ad < beta, d / beta, np.sign(d)) * (g / dt.type(d.size))
        gp = gd if pred.requires_grad else None
        gt = -gd if target.requires_grad else None
        return (gp, gt)

    return record_op("smooth_l1", out, (pred, target), backward)


def bce_with_logits(logits, targets):
    """Numerically stable sigmoid + binary cross-entropy, averaged over all
    elements."""
    logits, targets = as_tensor(logits), as_tensor(targets)
    if logits.shape != targets.shape:
        raise ValueError(
            f"bce_with_logits: shape mismatch {tuple(logits.shape)} vs "
            f"{tuple(targets.shape)}"
        )
    dt = logits.data.dtype
    z = logits.data
    t = targets.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = loss.mean(dtype=dt).reshape(())

    def backward(g):
        sig = stable_sigmoid(z)
        return ((sig - t) * (g / dt.type(z.size)), None)

    return record_op("bce_with_logits", out, (logits, targets), backward)


def stable_sigmoid(z):
    """Overflow-free logistic on a raw ndarray."""
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = stable_sigmoid(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return record_op("sigmoid", out, (x,), backward)
