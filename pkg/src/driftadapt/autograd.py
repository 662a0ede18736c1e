"""A small reverse-mode autodiff engine over dense numpy arrays.

It supports exactly the operations the segmentation network and its
streaming-adaptation losses need: 2-d convolution, batch normalization
with externally supplied statistics, ReLU, nearest-neighbor upsampling,
channel softmax, per-pixel entropy, and two scalar losses.

Values are float32 by default; heavy accumulations (conv, reductions,
channel moments) run in float64 and are rounded back to the value
dtype, which keeps results reproducible bit-for-bit across runs.  The
whole engine can also run in float64 end to end, which is what the
gradient-checking tests do (central differences at h=1e-4 are below
float32 resolution).

Each operation records its inputs and a backward closure on the output
tensor.  ``backward`` replays the recorded nodes in reverse topological
order, accumulates into the ``.grad`` of leaves that require gradients,
and clears the recorded graph so it cannot be replayed twice.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """Dense n-d array with an optional gradient slot.

    ``requires_grad`` marks leaves that accumulate into ``.grad``;
    interior nodes are tracked automatically while a graph is alive.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _tracked(t: Tensor) -> bool:
    """True if gradients should flow to `t` (leaf that wants them, or interior node)."""
    return t.requires_grad or t._backward is not None or bool(t._parents)


def _acc(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    The loss must be a scalar.  Leaves with ``requires_grad=False`` are left
    untouched.  The recorded graph is cleared afterwards, so a second call on
    the same graph is a no-op.
    """
    if loss.data.size != 1:
        raise NumericError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()

    for node in order:
        node._parents = ()
        node._backward = None
        if not node.requires_grad:
            node.grad = None


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    if _tracked(a) or _tracked(b):
        def _bw():
            g = out.grad
            for t in (a, b):
                if _tracked(t):
                    _acc(t, g if t.data.shape == g.shape else _unbroadcast(g, t.data.shape))
        out._parents = (a, b)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    if _tracked(a) or _tracked(b):
        def _bw():
            g = out.grad
            if _tracked(a):
                ga = g * b.data
                _acc(a, ga if a.data.shape == ga.shape else _unbroadcast(ga, a.data.shape))
            if _tracked(b):
                gb = g * a.data
                _acc(b, gb if b.data.shape == gb.shape else _unbroadcast(gb, b.data.shape))
        out._parents = (a, b)
        out._backward = _bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(np.array(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype))

    if _tracked(a):
        def _bw():
            _acc(a, np.broadcast_to(out.grad, a.data.shape))
        out._parents = (a,)
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(a.data, 0))

    if _tracked(a):
        mask = a.data > 0
        def _bw():
            _acc(a, out.grad * mask)
        out._parents = (a,)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlate NCHW input with OIKhKw weights (zero padding).

    Output spatial size is floor((H + 2*padding - Kh)/stride) + 1.
    """
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} has {c} channels, "
                         f"weight {weight.data.shape} expects {ci}")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} does not match {o} output channels")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    # accumulate in the working dtype: BLAS float32 for the normal path,
    # float64 end to end when the caller runs the engine in float64
    dt = x.data.dtype
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data.astype(dt, copy=False)

    acc = np.zeros((n, o, ho, wo), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            # (n,c,ho,wo) x (o,c)  ->  (n,ho,wo,o)
            acc += np.tensordot(xs, wd[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    if bias is not None:
        acc += bias.data.astype(dt, copy=False)[None, :, None, None]
    out = Tensor(acc)

    if _tracked(x) or _tracked(weight) or (bias is not None and _tracked(bias)):
        def _bw():
            g = out.grad.astype(dt, copy=False)
            if bias is not None and _tracked(bias):
                _acc(bias, g.sum(axis=(0, 2, 3), dtype=np.float64))
            if _tracked(weight):
                dw = np.empty_like(wd)
                for i in range(kh):
                    for j in range(kw):
                        xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                        # (n,o,ho,wo) x (n,c,ho,wo) -> (o,c)
                        dw[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                _acc(weight, dw)
            if _tracked(x):
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        # (n,o,ho,wo) x (o,c) -> (n,ho,wo,c)
                        contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            contrib.transpose(0, 3, 1, 2)
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w]
                _acc(x, dxp)
        out._parents = tuple(t for t in (x, weight, bias) if t is not None)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Normalization


def batchnorm2d(x: Tensor, mean: np.ndarray, sigma: np.ndarray, scale: Tensor,
                shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize NCHW features with the supplied per-channel (mean, sigma).

    The statistics are plain arrays chosen by the caller (source, batch, or
    interpolated); gradients flow to the input and the affine parameters,
    never to the statistics.
    """
    c = x.data.shape[1]
    mean = np.asarray(mean)
    sigma = np.asarray(sigma)
    if mean.shape != (c,) or sigma.shape != (c,):
        raise ShapeError(f"batchnorm2d stats shaped {mean.shape}/{sigma.shape} "
                         f"do not match {c} channels")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"batchnorm2d affine shaped {scale.data.shape}/{shift.data.shape} "
                         f"do not match {c} channels")
    if np.any(sigma <= 0):
        raise NumericError("batchnorm2d requires strictly positive sigmas")

    inv = 1.0 / np.sqrt(sigma.astype(np.float64) ** 2 + eps)
    inv = inv.astype(x.data.dtype)
    xhat = (x.data - mean.astype(x.data.dtype)[None, :, None, None]) * inv[None, :, None, None]
    out = Tensor(scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None])

    if _tracked(x) or _tracked(scale) or _tracked(shift):
        def _bw():
            g = out.grad
            if _tracked(shift):
                _acc(shift, g.sum(axis=(0, 2, 3), dtype=np.float64))
            if _tracked(scale):
                _acc(scale, np.sum(g * xhat, axis=(0, 2, 3), dtype=np.float64))
            if _tracked(x):
                _acc(x, g * (scale.data * inv)[None, :, None, None])
        out._parents = (x, scale, shift)
        out._backward = _bw
    return out


def channel_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std of NCHW features, accumulated in float64."""
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise NumericError("channel moments need at least 2 positions per channel")
    flat = x.astype(np.float64).transpose(1, 0, 2, 3).reshape(c, -1)
    mu = flat.mean(axis=1)
    var = flat.var(axis=1)
    return mu, np.sqrt(var)


# ---------------------------------------------------------------------------
# Upsampling


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        out = Tensor(x.data.copy())
    else:
        out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))

    if _tracked(x):
        n, c, h, w = x.data.shape
        def _bw():
            if factor == 1:
                _acc(x, out.grad)
            else:
                g = out.grad.reshape(n, c, h, factor, w, factor)
                _acc(x, g.sum(axis=(3, 5), dtype=np.float64))
        out._parents = (x,)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Softmax, entropy, losses


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-pixel softmax over the class axis of NKHW logits (max-stabilized)."""
    if logits.data.shape[1] < 2:
        raise ShapeError("softmax needs at least 2 classes on axis 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    if _tracked(logits):
        def _bw():
            g = out.grad
            dot = np.sum(g * p, axis=1, keepdims=True, dtype=np.float64).astype(p.dtype)
            _acc(logits, p * (g - dot))
        out._parents = (logits,)
        out._backward = _bw
    return out


def entropy_map(probs: Tensor) -> Tensor:
    """Per-pixel Shannon entropy, -sum_k p ln p with 0 ln 0 = 0, in nats.

    Output shape is N x 1 x H x W; values are clamped to [0, ln K] so the
    uniform distribution maps exactly to the maximum.
    """
    p = probs.data
    k = p.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = -np.sum(plogp, axis=1, keepdims=True, dtype=np.float64)
    cap = np.log(float(k))
    h = np.minimum(h, cap).astype(p.dtype)
    # rounding during the cast must not push values past ln K
    capd = p.dtype.type(cap)
    if float(capd) > cap:
        capd = np.nextafter(capd, p.dtype.type(0))
    h = np.minimum(h, capd)
    out = Tensor(h)

    if _tracked(probs):
        def _bw():
            g = out.grad
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(p > 0, -(np.log(p) + 1.0), 0.0).astype(p.dtype)
            _acc(probs, g * d)
        out._parents = (probs,)
        out._backward = _bw
    return out


def masked_mean_entropy_loss(logits: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean prediction entropy over mask=1 pixels of NKHW logits.

    ``mask`` is a constant 0/1 array shaped N x 1 x H x W (or None for all
    pixels).  An all-zero mask yields a constant 0 with no recorded graph,
    so the subsequent optimizer step is a true no-op.
    """
    n, k, h, w = logits.data.shape
    if mask is None:
        mask = np.ones((n, 1, h, w), dtype=logits.data.dtype)
    else:
        mask = np.asarray(mask, dtype=logits.data.dtype)
        if mask.shape != (n, 1, h, w):
            raise ShapeError(f"mask shape {mask.shape} does not match pixels {(n, 1, h, w)}")

    count = float(mask.sum(dtype=np.float64))
    if count == 0.0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    hmap = np.minimum(-np.sum(plogp, axis=1, keepdims=True, dtype=np.float64), np.log(k))
    loss_val = np.sum(hmap * mask.astype(np.float64), dtype=np.float64) / count
    out = Tensor(np.array(loss_val, dtype=logits.data.dtype))

    if _tracked(logits):
        hmap_c = hmap.astype(p.dtype)
        def _bw():
            g = float(out.grad)
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(p > 0, np.log(p), 0.0)
            # dH/dlogit_k = -p_k (ln p_k + H) per pixel
            dl = -p * (logp + hmap_c) * (mask / count)
            _acc(logits, dl * g)
        out._parents = (logits,)
        out._backward = _bw
    return out


def cross_entropy_loss(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Mean over pixels of -sum_k q_k ln p_k against constant target distributions."""
    q = np.asarray(target_probs, dtype=logits.data.dtype)
    if q.shape != logits.data.shape:
        raise ShapeError(f"target shape {q.shape} does not match logits {logits.data.shape}")
    n, k, h, w = logits.data.shape
    m = n * h * w

    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True)) + zmax
    logp = logits.data - lse
    loss_val = -np.sum(q.astype(np.float64) * logp.astype(np.float64), dtype=np.float64) / m
    out = Tensor(np.array(loss_val, dtype=logits.data.dtype))

    if _tracked(logits):
        p = np.exp(logp)
        qsum = q.sum(axis=1, keepdims=True)
        def _bw():
            g = float(out.grad)
            _acc(logits, (p * qsum - q) * (g / m))
        out._parents = (logits,)
        out._backward = _bw
    return out
