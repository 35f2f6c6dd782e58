"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; ops build the
graph lazily and ``backward`` walks it in reverse topological order.  The
op set is deliberately small: exactly what a convolutional extractor, an
attention matcher and their losses need.  Storage is float32 (float64 is
accepted for numerical checking); explicit reductions accumulate in float64
before casting back.  Broadcasting is limited to scalar-with-tensor and the
per-channel bias in ``bias_add``; everything else requires exact shape
agreement, which keeps gradients trivially correct.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """An ndarray node in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # asarray keeps 0-d shapes; ascontiguousarray would promote to (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is None or node.grad is None:
                continue
            for p, g in zip(node._parents, node._bwd(node.grad)):
                if g is None or not p.requires_grad:
                    continue
                if g.dtype != p.data.dtype:
                    g = g.astype(p.data.dtype)
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g


def _make(data, parents, bwd):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(g, shape):
    # only scalar-with-tensor broadcasting exists, so either shapes match
    # or the parent is a scalar that collects the full sum
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def _check_shapes(a, b, opname):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not match "
            "(only scalar broadcasting is supported)")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "add")
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)
    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "sub")
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)
    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_shapes(a, b, "mul")
    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bwd)


def neg(a):
    return mul(a, -1.0)


def square(a):
    a = _as_tensor(a)
    def bwd(g):
        return (g * (2.0 * a.data),)
    return _make(a.data * a.data, (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    def bwd(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    def bwd(g):
        return (np.ascontiguousarray(g.T),)
    return _make(a.data.T, (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    def bwd(g):
        return (g.reshape(a.data.shape),)
    return _make(a.data.reshape(shape), (a,), bwd)


def relu(a):
    a = _as_tensor(a)
    keep = a.data > 0
    def bwd(g):
        return (g * keep,)
    return _make(np.where(keep, a.data, 0), (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)
    def bwd(g):
        return (g * y * (1.0 - y),)
    return _make(y, (a,), bwd)


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)
    def bwd(g):
        return (g * y,)
    return _make(y, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    def bwd(g):
        return (g / a.data,)
    return _make(np.log(a.data), (a,), bwd)


def abs_(a):
    a = _as_tensor(a)
    s = np.sign(a.data)
    def bwd(g):
        return (g * s,)
    return _make(np.abs(a.data), (a,), bwd)


def clamp_min(a, floor):
    """Elementwise maximum with a constant; gradient is zero where clamped."""
    a = _as_tensor(a)
    keep = a.data >= floor
    def bwd(g):
        return (g * keep,)
    return _make(np.maximum(a.data, floor), (a,), bwd)


def softmax(a, axis):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)
    return _make(y, (a,), bwd)


def sum_all(a):
    a = _as_tensor(a)
    val = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    def bwd(g):
        return (np.full(a.data.shape, g.reshape(()), dtype=a.data.dtype),)
    return _make(val, (a,), bwd)


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    val = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    def bwd(g):
        return (np.full(a.data.shape, g.reshape(()) / n, dtype=a.data.dtype),)
    return _make(val, (a,), bwd)


def masked_mean(a, mask):
    """Mean of the entries where mask is nonzero; mask is a constant array."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=a.data.dtype)
    if m.shape != a.data.shape:
        raise ValueError(f"masked_mean: mask shape {m.shape} != data shape {a.data.shape}")
    count = float(m.sum(dtype=np.float64))
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    val = np.asarray((a.data * m).sum(dtype=np.float64) / count, dtype=a.data.dtype)
    def bwd(g):
        return (m * (g.reshape(()) / count),)
    return _make(val, (a,), bwd)


def l2_normalize(a, axis):
    """Unit-normalize along an axis; norms below 1e-12 are clamped."""
    a = _as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    ns = np.maximum(n, 1e-12)
    y = a.data / ns
    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / ns,)
    return _make(y, (a,), bwd)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    def bwd(g):
        out = np.zeros(a.data.shape, dtype=g.dtype)
        out[idx] = g
        return (out,)
    return _make(np.ascontiguousarray(a.data[idx]), (a,), bwd)


def take_rows(a, idx):
    """Gather rows of a 2-D tensor; duplicate indices accumulate in backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    def bwd(g):
        out = np.zeros(a.data.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.data[idx], (a,), bwd)


def take_pairs(a, ij):
    """Gather entries a[i, j] for rows (i, j) of ij; returns a 1-D tensor."""
    a = _as_tensor(a)
    ij = np.asarray(ij, dtype=np.int64).reshape(-1, 2)
    ii, jj = ij[:, 0], ij[:, 1]
    def bwd(g):
        out = np.zeros(a.data.shape, dtype=g.dtype)
        np.add.at(out, (ii, jj), g)
        return (out,)
    return _make(a.data[ii, jj], (a,), bwd)


def bias_add(x, b):
    """Add a per-channel bias: (N,C,H,W)+(C,) or (M,D)+(D,)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1:
        raise ValueError("bias must be 1-D")
    if x.data.ndim == 4:
        if x.data.shape[1] != b.data.shape[0]:
            raise ValueError("bias length must match the channel axis")
        y = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)
    elif x.data.ndim == 2:
        if x.data.shape[1] != b.data.shape[0]:
            raise ValueError("bias length must match the last axis")
        y = x.data + b.data[None, :]
        axes = (0,)
    else:
        raise ValueError("bias_add expects a 2-D or 4-D tensor")
    def bwd(g):
        return g, np.asarray(g.sum(axis=axes, dtype=np.float64), dtype=b.data.dtype)
    return _make(y, (x, b), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    def bwd(g):
        dxhat = g * gamma.data
        gi = dxhat * inv
        gx = gi - gi.mean(axis=-1, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True) * inv
        red = tuple(range(x.data.ndim - 1))
        ggamma = np.asarray((g * xhat).sum(axis=red, dtype=np.float64), dtype=gamma.data.dtype)
        gbeta = np.asarray(g.sum(axis=red, dtype=np.float64), dtype=beta.data.dtype)
        return gx, ggamma, gbeta
    return _make(y, (x, gamma, beta), bwd)


# convolution plumbing: one im2col/col2im pair drives conv2d forward and
# both of its gradients, and the transposed conv is the same three maps
# with the input/output roles exchanged

def _im2col(x, kh, kw, s, p):
    n, c, h, w = x.shape
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("kernel does not fit the padded input")
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s]
    return cols, oh, ow


def _conv_fwd(x, w, s, p):
    n = x.shape[0]
    f = w.shape[0]
    cols, oh, ow = _im2col(x, w.shape[2], w.shape[3], s, p)
    cols2 = cols.reshape(n, -1, oh * ow)
    out = np.matmul(w.reshape(f, -1)[None], cols2)
    return out.reshape(n, f, oh, ow)


def _conv_dx(gy, w, s, p, h, w_in):
    n, f, oh, ow = gy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    cols2 = np.matmul(w.reshape(f, -1).T[None], gy.reshape(n, f, oh * ow))
    cols = cols2.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * p, w_in + 2 * p), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += cols[:, :, i, j]
    if p:
        return np.ascontiguousarray(xp[:, :, p:p + h, p:p + w_in])
    return xp


def _conv_dw(x, gy, kh, kw, s, p):
    n, f = gy.shape[0], gy.shape[1]
    cols, oh, ow = _im2col(x, kh, kw, s, p)
    cols2 = cols.reshape(n, -1, oh * ow)
    gw2 = np.matmul(gy.reshape(n, f, oh * ow), cols2.transpose(0, 2, 1)).sum(axis=0)
    return gw2.reshape(f, x.shape[1], kh, kw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution, x (N,C,H,W) with w (F,C,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError("conv2d: channel mismatch")
    h, w_in = x.data.shape[2], x.data.shape[3]
    kh, kw = w.data.shape[2], w.data.shape[3]
    y = _conv_fwd(x.data, w.data, stride, padding)
    def bwd(g):
        gx = _conv_dx(g, w.data, stride, padding, h, w_in) if x.requires_grad else None
        gw = _conv_dw(x.data, g, kh, kw, stride, padding) if w.requires_grad else None
        return gx, gw
    out = _make(y, (x, w), bwd)
    return out if b is None else bias_add(out, b)


def conv_transpose2d(x, w, b=None, stride=1, padding=0):
    """Transposed convolution, x (N,C,H,W) with w (C,F,kh,kw).

    Output spatial size is (H-1)*stride + kh - 2*padding.  This is exactly
    the adjoint of conv2d, so the three convolution maps are reused with
    swapped roles.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and weight")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError("conv_transpose2d: channel mismatch")
    kh, kw = w.data.shape[2], w.data.shape[3]
    h_out = (x.data.shape[2] - 1) * stride + kh - 2 * padding
    w_out = (x.data.shape[3] - 1) * stride + kw - 2 * padding
    if h_out <= 0 or w_out <= 0:
        raise ValueError("transposed kernel does not produce a positive output size")
    y = _conv_dx(x.data, w.data, stride, padding, h_out, w_out)
    def bwd(g):
        gx = _conv_fwd(g, w.data, stride, padding) if x.requires_grad else None
        gw = _conv_dw(g, x.data, kh, kw, stride, padding) if w.requires_grad else None
        return gx, gw
    out = _make(y, (x, w), bwd)
    return out if b is None else bias_add(out, b)


def max_pool2d(x, k):
    """Non-overlapping k x k max pooling; H and W must divide by k.

    Ties inside a window route the gradient to the first element in
    row-major order, which keeps backward deterministic.
    """
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"pooling window {k} must divide spatial dims ({h}, {w})")
    oh, ow = h // k, w // k
    xr = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, oh, ow, k * k)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    def bwd(g):
        gr = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gr, idx[..., None], g[..., None], axis=-1)
        gx = gr.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)
    return _make(np.ascontiguousarray(y), (x,), bwd)


def bilinear_sample(m, pts):
    """Sample a (C,H,W) map at K float (x, y) positions, giving (K, C).

    Coordinates are clamped to the valid rectangle, so querying exactly on
    the border is safe.  The positions are constants; gradients flow to the
    map only.
    """
    m = _as_tensor(m)
    c, h, w = m.data.shape
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    px = np.clip(pts[:, 0], 0.0, w - 1.0)
    py = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(m.data.dtype)
    fy = (py - y0).astype(m.data.dtype)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    y = (m.data[:, y0, x0] * w00 + m.data[:, y0, x1] * w01
         + m.data[:, y1, x0] * w10 + m.data[:, y1, x1] * w11).T
    def bwd(g):
        gm = np.zeros(m.data.shape, dtype=g.dtype)
        gt = g.T
        np.add.at(gm, (slice(None), y0, x0), gt * w00)
        np.add.at(gm, (slice(None), y0, x1), gt * w01)
        np.add.at(gm, (slice(None), y1, x0), gt * w10)
        np.add.at(gm, (slice(None), y1, x1), gt * w11)
        return (gm,)
    return _make(np.ascontiguousarray(y), (m,), bwd)


def gradcheck(fn, inputs, eps=1e-3, rtol=1e-3, atol=1e-6):
    """Verify analytic gradients of fn against central finite differences.

    fn takes the given Tensors and returns a Tensor of any shape; the check
    contracts it to a scalar with a fixed random projection so asymmetric
    gradient bugs cannot cancel.  Inputs are promoted to float64 leaves.
    Each element must satisfy |analytic - numeric| <= rtol * max(|a|, |n|)
    + atol; the first violation raises AssertionError with its location.
    fn must be pure: it is re-evaluated many times.
    """
    leaves = []
    for t in inputs:
        data = np.asarray(t.data if isinstance(t, Tensor) else t,
                          dtype=np.float64)
        leaves.append(Tensor(data.copy(), requires_grad=True))
    out = fn(*leaves)
    w = np.random.default_rng(12345).normal(size=out.data.shape)
    loss = sum_all(mul(out, Tensor(w)))
    loss.backward()
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy()
                for l in leaves]

    def eval_loss():
        consts = [Tensor(l.data) for l in leaves]
        return float((fn(*consts).data * w).sum(dtype=np.float64))

    for k, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_loss()
            flat[i] = orig - eps
            lo = eval_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            tol = rtol * max(abs(a), abs(numeric)) + atol
            if abs(a - numeric) > tol:
                raise AssertionError(
                    f"gradient mismatch at input {k} element {i}: "
                    f"analytic {a:.8g}, numeric {numeric:.8g}")
    return True
