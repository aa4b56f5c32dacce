"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable value in the model is a :class:`Tensor`. Operations
record their parents and a backward rule; :func:`backward` replays them in
reverse topological order. ``stop_gradient`` cuts an edge.
"""

import contextlib
import math

import numpy as np

from . import kernels
from .errors import DimensionError, UsageError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = None
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
    def is_leaf(self):
        return self._parents is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._backward = backward_fn
    return out


def stop_gradient(x):
    """Return a tensor sharing ``x``'s values with no path back to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# tape and backward


class ComputationTape:
    """Nodes reachable from ``root`` in forward execution (topological) order."""

    def __init__(self, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents or ():
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = ComputationTape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (unbroadcast(g / b.data, a.shape),
                              unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    return _result(a.data ** e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        z = np.zeros_like(a.data)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(out, (a,), bw)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat needs at least one tensor")
    ax = _norm_axis(axis, ts[0].ndim)[0]
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {ax}: shape {t.shape} does not match {ts[0].shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.shape[-1]} (axis -1) vs {b.shape[-2]} (axis -2)")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis; ``weight`` is ``[out, in]``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input feature axis has {x.shape[-1]} entries, weight expects {weight.shape[1]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = out + bias
    return reshape(out, (weight.shape[0],)) if squeeze else out


# ---------------------------------------------------------------------------
# softmax family


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    Masked entries are excluded from the normalisation rather than set to a
    large negative logit, so no non-finite value is ever materialised.
    """
    x = as_tensor(x)
    if x.ndim == 0:
        raise DimensionError("softmax needs at least one axis")
    ax = _norm_axis(axis, x.ndim)[0]
    if x.shape[ax] == 0:
        raise DimensionError(f"softmax over empty axis {ax}")
    if mask is None:
        z = x.data - x.data.max(axis=ax, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=ax).all():
            raise DimensionError("softmax mask leaves an empty slice")
        m = np.where(mask, x.data, -np.inf).max(axis=ax, keepdims=True)
        e = np.zeros_like(x.data)
        np.exp(x.data - m, out=e, where=mask)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _result(out, (x,), lambda g: (g - sm * g.sum(axis=ax, keepdims=True),))


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Grouped 2-d cross-correlation of ``[B,C,H,W]`` with ``[Co, C/groups, kh, kw]``."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-d [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-d [Co,Ci,kh,kw], got {weight.shape}")
    b, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    if groups < 1 or c % groups:
        raise DimensionError(f"input channel axis (1) has {c} entries, not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"kernel input-channel axis (1) is {cg}, expected {c // groups}")
    if co % groups:
        raise DimensionError(f"kernel output-channel axis (0) is {co}, not divisible by groups={groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp:
        raise DimensionError(f"kernel height {kh} exceeds padded input height {hp} (axis 2)")
    if kw > wp:
        raise DimensionError(f"kernel width {kw} exceeds padded input width {wp} (axis 3)")
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, sh, sw)
    ho, wo = cols.shape[4], cols.shape[5]
    k = cg * kh * kw
    cols_g = cols.reshape(b, groups, k, ho * wo)
    w_g = weight.data.reshape(groups, co // groups, k)
    out = np.matmul(w_g, cols_g).reshape(b, co, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gg = g.reshape(b, groups, co // groups, ho * wo)
        gw = np.matmul(gg, cols_g.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w_g.transpose(0, 2, 1), gg).reshape(b, c, kh, kw, ho, wo)
            gxp = kernels.col2im(np.ascontiguousarray(gcols), hp, wp, sh, sw)
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, bw)


def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """1-d convolution of ``[B,C,L]`` with ``[Co, C/groups, k]`` via :func:`conv2d`."""
    x = as_tensor(x)
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d needs [B,C,L] input and [Co,Ci,k] kernel, got {x.shape}, {weight.shape}")
    out = conv2d(reshape(x, x.shape + (1,)), reshape(weight, weight.shape + (1,)),
                 bias, (stride, 1), (padding, 0), groups)
    return reshape(out, out.shape[:3])


def pool_global(x, mode="avg"):
    """Global spatial pooling ``[B,C,H,W] -> [B,C]``.

    ``max`` routes the gradient to the first maximal element in row-major order.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"pool_global input must be 4-d [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if mode == "avg":
        return mean(x, axis=(2, 3))
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    flat = x.data.reshape(b, c, h * w)
    idx = flat.argmax(axis=2)[..., None]
    out = np.take_along_axis(flat, idx, axis=2)[..., 0]

    def bw(g):
        z = np.zeros((b, c, h * w))
        np.put_along_axis(z, idx, g[..., None], axis=2)
        return (z.reshape(x.shape),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# normalisation


def _normalize_fwd(xd, axes, eps):
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv, mu, var


def _normalize_bw(gxhat, xhat, inv, axes):
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def layer_norm(x, gamma=None, beta=None, eps=1e-9):
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    if gamma is not None and gamma.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm scale has shape {gamma.shape}, last axis is {x.shape[-1]}")
    xhat, inv, _, _ = _normalize_fwd(x.data, (-1,), eps)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        res = [_normalize_bw(gxhat, xhat, inv, (-1,))]
        if gamma is not None:
            res.append((g * xhat).sum(axis=lead))
        if beta is not None:
            res.append(g.sum(axis=lead))
        return tuple(res)

    return _result(out, parents, bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch normalisation over axis 1 of a 2-d or 4-d input.

    In training mode batch statistics are used and, unless ``update_stats``
    is false, ``running_mean`` / ``running_var`` (numpy arrays) are updated
    in place.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm needs a 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm channel axis (1) has {c} entries, scale has {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if training:
        xhat, inv, mu, var = _normalize_fwd(x.data, axes, eps)
        n = x.data.size // c
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * (n / max(n - 1, 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gxhat = g * gamma.data.reshape(bshape)
        gx = _normalize_bw(gxhat, xhat, inv, axes) if training else gxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# verification hooks


def numeric_grad(fn, inputs, step=1e-4):
    """Central finite differences of scalar ``fn(*inputs)`` w.r.t. each input."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*inputs).data)
            flat[i] = orig - step
            fm = float(fn(*inputs).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, inputs, step=1e-4):
    """Largest relative error between tape and finite-difference gradients.

    ``fn`` maps the ``inputs`` tensors to a scalar tensor. Every input is
    treated as a leaf; its ``.grad`` is reset before the tape pass.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn(*inputs))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numeric_grad(fn, inputs, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
