"""Differentiable operations used by the network, plus a finite-difference checker."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, no_grad


def _check_same_dtype(*ts: Tensor):
    dts = {t.dtype for t in ts if t is not None}
    if len(dts) > 1:
        raise TypeError(f"dtype mismatch: {sorted(str(d) for d in dts)}")


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        for name, x, y in zip("NCHW" if a.ndim == 4 else range(a.ndim), a.shape, b.shape):
            if x != y:
                raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} in dimension {name}", dim=str(name))
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}", dim="rank")


def _conv_geometry(x: Tensor, w: Tensor, stride: int, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"input must be N,C,H,W; got {x.shape}", dim="rank")
    if w.ndim != 4:
        raise ShapeError(f"weight must be Cout,Cin,kh,kw; got {w.shape}", dim="rank")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    return x.shape, w.shape


# -- convolution --------------------------------------------------------------


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    (n, cin, h, w), (cout, wcin, kh, kw) = _conv_geometry(x, weight, stride, padding)
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}", dim="C")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}", dim="H")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {w + 2 * padding}", dim="W")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)", dim="Cout")
    _check_same_dtype(x, weight, bias)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    k = _kernels.active()
    xp = _pad(x.data, padding)
    cols = k.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)  # (cin*kh*kw, n*ho*wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = wmat.T @ gmat
            dxp = k.col2im(dcols, n, cin, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "conv2d", inputs, back)


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``weight`` has the conv2d layout (C_in_of_this_op, C_out_of_this_op, kh, kw),
    i.e. it is the kernel of the convolution being transposed. Output extent is
    ``(H - 1) * stride - 2 * padding + kh + output_padding``.
    """
    (n, cin, h, w), (wcin, cout, kh, kw) = _conv_geometry(x, weight, stride, padding)
    if wcin != cin:
        raise ShapeError(f"transposed_conv2d: input has {cin} channels, weight expects {wcin}", dim="C")
    if not 0 <= output_padding < stride:
        raise ValueError("output_padding must lie in [0, stride)")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({cout},)", dim="Cout")
    _check_same_dtype(x, weight, bias)
    hout = (h - 1) * stride - 2 * padding + kh + output_padding
    wout = (w - 1) * stride - 2 * padding + kw + output_padding
    if hout < 1 or wout < 1:
        raise ShapeError(f"transposed_conv2d: empty output {hout}x{wout}", dim="H" if hout < 1 else "W")
    k = _kernels.active()
    hp, wp = hout + 2 * padding, wout + 2 * padding
    wmat = weight.data.reshape(cin, -1)  # (cin, cout*kh*kw)
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)  # (cin, n*h*w)
    cols = wmat.T @ xmat
    outp = k.col2im(cols, n, cout, hp, wp, kh, kw, stride, h, w)
    out = np.ascontiguousarray(outp[:, :, padding : padding + hout, padding : padding + wout])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gx = gw = gb = None
        gp = np.ascontiguousarray(_pad(g, padding))
        gcols = k.im2col(gp, kh, kw, stride, h, w)  # (cout*kh*kw, n*h*w)
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (xmat @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "transposed_conv2d", inputs, back)


# -- pooling ------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2):
    """2x2/stride-2 max pooling. Returns (output, argmax) with argmax in 0..3 per window.

    Ties resolve to the first element of the window in row-major order.
    """
    if kernel != 2 or stride != 2:
        raise ValueError("only kernel=2, stride=2 pooling is supported")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be N,C,H,W; got {x.shape}", dim="rank")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        dim = "H" if h % 2 else "W"
        raise ShapeError(f"maxpool2d: odd extent {h}x{w}; pre-pad the input to even size", dim=dim)
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), "maxpool2d", (x,), back), arg


# -- elementwise --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.dtype))
    return Tensor._from_op(out, "relu", (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    _check_same_dtype(a, b)
    return Tensor._from_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def _check_scalar(w: Tensor, op: str):
    if w.ndim != 0:
        raise ShapeError(f"{op}: weight must be rank-0, got shape {w.shape}", dim="rank")


def scale_add(a: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """a + w * b with a learnable rank-0 ``w``."""
    _same_shape(a, b, "scale_add")
    _check_scalar(w, "scale_add")
    _check_same_dtype(a, w, b)
    wv = w.data
    out = a.data + wv * b.data

    def back(g):
        gw = np.asarray((g * b.data).sum(), dtype=w.dtype) if w.requires_grad else None
        gb = g * wv if b.requires_grad else None
        return g, gw, gb

    return Tensor._from_op(out, "scale_add", (a, w, b), back)


def mul(w: Tensor, b: Tensor) -> Tensor:
    """Rank-0 ``w`` times tensor ``b``."""
    _check_scalar(w, "mul")
    _check_same_dtype(w, b)
    wv = w.data

    def back(g):
        gw = np.asarray((g * b.data).sum(), dtype=w.dtype) if w.requires_grad else None
        gb = g * wv if b.requires_grad else None
        return gw, gb

    return Tensor._from_op(wv * b.data, "mul", (w, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    cc = a.dtype.type(c)
    return Tensor._from_op(a.data * cc, "scale", (a,), lambda g: (g * cc,))


def concat(ts: Sequence[Tensor], axis: int = 1) -> Tensor:
    _check_same_dtype(*ts)
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, "concat", tuple(ts), back)


def total(x: Tensor) -> Tensor:
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# -- loss -------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel cross-entropy of (N, 2, H, W) logits against a {0, 1} mask (N, H, W)."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be N,2,H,W; got {logits.shape}", dim="C")
    n, _, h, w = logits.shape
    if t.shape != (n, h, w):
        names = ("N", "H", "W")
        bad = next((names[i] for i in range(min(3, t.ndim)) if t.shape[i] != (n, h, w)[i]), "rank")
        raise ShapeError(f"target shape {t.shape} does not match logits {logits.shape}", dim=bad)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("target values must be 0 or 1")
    ti = t.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, ti[:, None], axis=1)[:, 0]
    count = n * h * w
    loss = np.asarray((lse - picked).sum() / count, dtype=logits.dtype)

    def back(g):
        p = softmax(logits.data, axis=1)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, ti[:, None], 1.0, axis=1)
        return ((p - onehot) * (g / count),)

    return Tensor._from_op(loss, "softmax_cross_entropy", (logits,), back)


# -- verification -----------------------------------------------------------


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float | Sequence[float] = 1e-6,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Worst relative error |a - n| / max(1e-8, |a| + |n|) between backprop and central differences.

    ``fn`` recomputes the scalar loss from the current values of ``params``.
    For each parameter up to ``samples_per_param`` coordinates are sampled.
    ``epsilon`` may be a sequence of step sizes; each coordinate then keeps the
    best agreement over the steps. A wrong analytic gradient disagrees at every
    step, while a step that straddles a ReLU/max kink or drowns in round-off
    only spoils that one step.
    """
    steps = (epsilon,) if np.isscalar(epsilon) else tuple(epsilon)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
        p.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            size = flat.size
            idx = np.arange(size) if size <= samples_per_param else rng.choice(size, samples_per_param, replace=False)
            for i in idx:
                a = ga.reshape(-1)[i]
                orig = flat[i]
                best = np.inf
                for eps in steps:
                    flat[i] = orig + eps
                    fp = fn().item()
                    flat[i] = orig - eps
                    fm = fn().item()
                    flat[i] = orig
                    num = (fp - fm) / (2 * eps)
                    best = min(best, abs(a - num) / max(1e-8, abs(a) + abs(num)))
                worst = max(worst, best)
    for p in params:
        p.zero_grad()
    return worst
