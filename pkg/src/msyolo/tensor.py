"""Dense N-d tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient. Every operation
that involves a gradient-requiring input records a closure on a dynamic tape;
``Tensor.backward()`` topologically sorts the tape and accumulates
``dLoss/dLeaf`` into each leaf's ``.grad``.

Layer primitives (convolution, batch normalization, ReLU6, max pooling,
nearest upsampling, channel concatenation) operate on the canonical 4-D
layout (batch N, channels C, height H, width W), row-major.

The default element type is float32; float64 is available for tests that
need tighter tolerances.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InvalidStateError, UsageError

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy-backed array node in a dynamic reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    # force `ndarray <op> Tensor` to dispatch to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            # keep explicit float precision; promote everything else to default
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Accumulates into ``.grad`` of every tensor reachable on the tape;
        repeated calls after ``zero_grad`` reproduce identical gradients.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def astensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast axes so grad matches the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(out_data, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap a forward result; attach the backward closure when tracking."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
    if track:
        out._prev = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    out_data = a.data + b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    out_data = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = 1.0 / a.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(-grad * out_data * out_data, a.data.shape))

    return _make(out_data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    a = astensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = np.exp(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = np.log(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = np.sqrt(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def arctan(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = np.arctan(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad / (1.0 + a.data * a.data))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = _sigmoid_np(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed overflow-safe; gradient is sigmoid(x)."""
    a = astensor(a)
    out_data = _softplus_np(a.data)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad * _sigmoid_np(a.data))

    return _make(out_data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the full gradient to the first operand."""
    a = astensor(a)
    b = astensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    out_data = np.maximum(a.data, b.data)

    def backward(grad):
        take_a = a.data >= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * ~take_a, b.data.shape))

    return _make(out_data, (a, b), backward)


def minimum(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    out_data = np.minimum(a.data, b.data)

    def backward(grad):
        take_a = a.data <= b.data
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * take_a, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * ~take_a, b.data.shape))

    return _make(out_data, (a, b), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; subgradient 1 strictly inside, 0 outside."""
    a = astensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(grad):
        if a.requires_grad:
            inside = (a.data > lo) & (a.data < hi)
            a._accumulate(grad * inside)

    return _make(out_data, (a,), backward)


def relu6(a: Tensor) -> Tensor:
    """min(max(x, 0), 6); the activation used after every conv+batchnorm."""
    return clip(a, 0.0, 6.0)


# -- reductions and shape ops --------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if not a.requires_grad:
            return
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(np.asarray(out_data, dtype=a.dtype), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def backward(grad):
        if a.requires_grad:
            a._accumulate(grad.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing; backward scatter-adds (repeats accumulate)."""
    a = astensor(a)
    out_data = a.data[idx]

    def backward(grad):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, grad)
            a._accumulate(g)

    return _make(np.ascontiguousarray(out_data), (a,), backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(grad):
        pieces = np.split(grad, len(tensors), axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(np.squeeze(g, axis=axis))

    return _make(out_data, tuple(tensors), backward)


# -- losses ---------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, overflow-safe.

    ``loss = softplus(z) - t*z``; gradient w.r.t. z is ``sigmoid(z) - t``.
    Targets are constants (no gradient flows into them).
    """
    logits = astensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    out_data = _softplus_np(z) - t * z

    def backward(grad):
        if logits.requires_grad:
            logits._accumulate(grad * (_sigmoid_np(z) - t))

    return _make(out_data, (logits,), backward)


# -- layer primitives ------------------------------------------------------


def _conv_out_extent(extent: int, k: int, stride: int, padding: int, name: str) -> int:
    out = (extent + 2 * padding - k) // stride + 1
    if out < 1:
        raise ConfigurationError(
            f"conv output {name} extent {out} < 1 (input {extent}, kernel {k}, "
            f"stride {stride}, padding {padding})"
        )
    return out


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input.

    ``weight`` has shape (Cout, Cin/groups, k, k); depthwise convolution is
    the special case groups == Cin == Cout. Output spatial extent is
    ``floor((H + 2*padding - k) / stride) + 1``.
    """
    x = astensor(x)
    weight = astensor(weight)
    if x.data.ndim != 4:
        raise ConfigurationError(f"conv2d input must be 4-D (N,C,H,W), got ndim {x.data.ndim}")
    n, cin, h, w = x.data.shape
    cout, cin_g, kh, kw = weight.data.shape
    if kh != kw:
        raise ConfigurationError(f"conv2d kernel must be square, got {kh}x{kw}")
    k = kh
    if cin % groups != 0:
        raise ConfigurationError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ConfigurationError(f"output channels {cout} not divisible by groups {groups}")
    if cin_g != cin // groups:
        raise ConfigurationError(
            f"weight channel dim {cin_g} != input channels {cin} / groups {groups}"
        )
    if bias is not None and bias.data.shape != (cout,):
        raise ConfigurationError(f"bias shape {bias.data.shape} != ({cout},)")
    hout = _conv_out_extent(h, k, stride, padding, "height")
    wout = _conv_out_extent(w, k, stride, padding, "width")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride)                              # (N, Cin, Ho, Wo, k, k) view
    wing = win.reshape(n, groups, cin_g, hout, wout, k, k)
    wg = weight.data.reshape(groups, cout // groups, cin_g, k, k)
    out = np.einsum("ngchwkl,gockl->ngohw", wing, wg, optimize=True)
    out = out.reshape(n, cout, hout, wout)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(grad):
        gr = grad.reshape(n, groups, cout // groups, hout, wout)
        if weight.requires_grad:
            dw = np.einsum("ngchwkl,ngohw->gockl", wing, gr, optimize=True)
            weight._accumulate(dw.reshape(cout, cin_g, k, k))
        if bias is not None and bias.requires_grad:
            bias._accumulate(grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    t = np.einsum("ngohw,goc->ngchw", gr, wg[:, :, :, ki, kj], optimize=True)
                    dxp[:, :, ki:ki + stride * hout:stride, kj:kj + stride * wout:stride] += \
                        t.reshape(n, cin, hout, wout)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            x._accumulate(dx)

    return _make(out.astype(x.dtype, copy=False), parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               eps: float = 1e-3, momentum: float = 0.03, training: bool = False) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place by ``run = (1-momentum)*run + momentum*batch``;
    inference mode uses the running buffers as constants.
    """
    x = astensor(x)
    c = x.data.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ConfigurationError(f"batch_norm {name} shape {arr.shape} != ({c},)")
    if eps <= 0:
        raise ConfigurationError(f"batch_norm eps must be positive, got {eps}")
    if np.any(running_var < 0):
        raise InvalidStateError("batch_norm running variance has negative entries")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(grad):
        if gamma.requires_grad:
            gamma._accumulate((grad * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(grad.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        g = gamma.data[None, :, None, None]
        if training:
            # gradient through the batch statistics themselves
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            dxhat = grad * g
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
        else:
            dx = grad * g * inv_std[None, :, None, None]
        x._accumulate(dx.astype(x.dtype, copy=False))

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def max_pool2d(x: Tensor, k: int, *, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling with -inf padding; backward routes to the argmax element."""
    x = astensor(x)
    n, c, h, w = x.data.shape
    hout = _conv_out_extent(h, k, stride, padding, "height")
    wout = _conv_out_extent(w, k, stride, padding, "width")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = _windows(xp, k, stride)
    flat = win.reshape(n, c, hout, wout, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(grad):
        if not x.requires_grad:
            return
        ki, kj = np.divmod(arg, k)
        ni, ci, oi, oj = np.indices((n, c, hout, wout), sparse=True)
        hi = oi * stride + ki - padding
        wi = oj * stride + kj - padding
        g = np.zeros_like(x.data)
        np.add.at(g, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), hi, wi), grad)
        x._accumulate(g)

    return _make(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums each block."""
    x = astensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"upsample input must be 4-D, got ndim {x.data.ndim}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(grad):
        if x.requires_grad:
            n, c, h2, w2 = grad.shape
            g = grad.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
            x._accumulate(g)

    return _make(out, (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along channels; backward splits the gradient."""
    tensors = [astensor(t) for t in tensors]
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if s[0] != base[0] or s[2:] != base[2:]:
            raise ConfigurationError(
                f"concat_channels spatial/batch mismatch: {base} vs {s}"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def backward(grad):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(grad[:, lo:hi])

    return _make(out, tuple(tensors), backward)
