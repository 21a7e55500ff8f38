"""Dense tensors with a closed set of differentiable operations.

Every op records its operands and a gradient rule; :meth:`Tensor.backward`
walks the recorded graph in reverse topological order and accumulates
gradients into every reachable tensor that requires them.  There is no
general broadcasting: each op documents the exact shapes it accepts.
"""
from __future__ import annotations

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the recorded compute graph."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._done = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    # -- sugar -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    # -- reverse mode ------------------------------------------------------
    def backward(self, retain_graph=False):
        """Populate ``grad`` of every tracked tensor this scalar depends on."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._done:
            raise GraphError("backward already ran on this graph; call reset() before running it again")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: own a private copy so later in-place edits cannot alias
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        self._done = True
        if not retain_graph:
            for node in order:
                node._parents = ()
                node._backward = None

    def reset(self):
        """Allow another backward pass over a graph kept with ``retain_graph``."""
        if self._backward is None and self._parents == ():
            raise GraphError("graph was released after backward; rebuild the forward pass")
        for node in _topological_order(self):
            if node.requires_grad:
                node.grad = None
        self._done = False


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data, parents, rule):
    tracked = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=tracked, dtype=data.dtype)
    if tracked:
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# gradient rules kept at module level so a fault can be injected in tests
# ---------------------------------------------------------------------------


def _relu_grad(g, mask):
    return g * mask


def _sigmoid_grad(g, s):
    return g * s * (1.0 - s)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x, c):
    c = float(c)
    return _result(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))
    return _result(out, (x,), lambda g: (_relu_grad(g, mask),))


def sigmoid(x):
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _result(s, (x,), lambda g: (_sigmoid_grad(g, s),))


# ---------------------------------------------------------------------------
# reductions and reshapes
# ---------------------------------------------------------------------------


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(x):
    shape, n = x.shape, x.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)
    return _result(out, (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def reshape(x, shape):
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat(tensors, axis):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def column(x, j):
    """``x[:, j]`` of a 2-D tensor, as a 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"column: expected a 2-D tensor, got {x.shape}")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, j] = g
        return (full,)

    return _result(x.data[:, j].copy(), (x,), rule)


def head_flatten(x, k):
    """[N, A*k, H, W] -> [N, H*W*A, k], row-major cells then anchors per cell."""
    n, ak, h, w = x.shape
    if ak % k:
        raise ShapeError(f"head_flatten: {ak} channels not divisible by {k}")
    out = x.data.transpose(0, 2, 3, 1).reshape(n, h * w * (ak // k), k)

    def rule(g):
        return (np.ascontiguousarray(g.reshape(n, h, w, ak).transpose(0, 3, 1, 2)),)

    return _result(np.ascontiguousarray(out), (x,), rule)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation over NCHW maps with a square odd OIHW kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight {weight.shape} expects {cin}"
        )
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    ho = _kernels.conv_out_size(x.shape[2], kh, stride, padding)
    wo = _kernels.conv_out_size(x.shape[3], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kh} kernel with padding {padding} does not fit {x.shape[2:]} input")
    xd, wd = x.data, weight.data
    out, cols = _kernels.conv2d_forward(xd, wd, None if bias is None else bias.data, stride, padding)

    def rule(g):
        gx, gw, gb = _kernels.conv2d_backward(g, xd, wd, cols, stride, padding, need_input=x.requires_grad)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule)


def linear(x, weight, bias=None):
    """[N, C] @ [O, C]^T + [O] -> [N, O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule)


def upsample_nearest2x(x):
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    area = h * w

    def rule(g):
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).copy(),)

    return _result(out, (x,), rule)


def softmax(v):
    """Softmax over the last axis, shifted by the max for overflow safety."""
    d = v.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (v,), rule)


def scale_per_sample(x, s):
    """Multiply sample ``i`` of ``x`` [N, ...] by the scalar ``s[i]``."""
    if s.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"scale_per_sample: weights {s.shape} do not match batch of {x.shape}")
    view = (slice(None),) + (None,) * (x.ndim - 1)
    xd, sd = x.data, s.data
    axes = tuple(range(1, x.ndim))
    return _result(xd * sd[view], (x, s), lambda g: (g * sd[view], (g * xd).sum(axis=axes)))


# ---------------------------------------------------------------------------
# fused detection losses
# ---------------------------------------------------------------------------

IGNORE = -2
NEGATIVE = -1


def focal_loss(logits, labels, alpha=0.25, gamma=2.0, normalizer=1.0):
    """Sigmoid focal loss summed over non-ignored anchors, divided by ``normalizer``.

    ``logits`` is [..., K]; ``labels`` has the leading shape and holds a class
    id for positives, ``NEGATIVE`` for background and ``IGNORE`` to skip.
    """
    x = logits.data
    labels = np.asarray(labels)
    if labels.shape != x.shape[:-1]:
        raise ShapeError(f"focal_loss: labels {labels.shape} do not match logits {x.shape}")
    target = np.zeros(x.shape, dtype=bool)
    pos = labels >= 0
    if pos.any():
        target[pos, labels[pos]] = True
    valid = np.broadcast_to((labels != IGNORE)[..., None], x.shape)
    sign = np.where(target, 1.0, -1.0)
    z = sign * x
    # log(sigmoid(z)) = -softplus(-z), evaluated stably
    log_pt = -(np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z))))
    pt = np.exp(log_pt)
    alpha_t = np.where(target, alpha, 1.0 - alpha)
    mod = (1.0 - pt) ** gamma
    per = np.where(valid, -alpha_t * mod * log_pt, 0.0)
    total = per.sum() / normalizer
    dtype = x.dtype

    def rule(g):
        dz = alpha_t * mod * (gamma * pt * log_pt - (1.0 - pt))
        dx = np.where(valid, sign * dz, 0.0) * (g / normalizer)
        return (dx.astype(dtype),)

    return _result(np.asarray(total, dtype=dtype), (logits,), rule)


def smooth_l1(pred, target, mask, beta=1.0 / 9.0, normalizer=1.0):
    """Smooth-L1 over rows of ``pred`` [..., 4] selected by boolean ``mask``."""
    p = pred.data
    target = np.asarray(target, dtype=p.dtype)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != p.shape or mask.shape != p.shape[:-1]:
        raise ShapeError(f"smooth_l1: pred {p.shape}, target {target.shape}, mask {mask.shape}")
    sel = mask[..., None]
    diff = np.where(sel, p - target, 0.0)
    ad = np.abs(diff)
    small = ad < beta
    per = np.where(small, 0.5 * diff * diff / beta, ad - 0.5 * beta)
    total = np.where(sel, per, 0.0).sum() / normalizer

    def rule(g):
        d = np.where(small, diff / beta, np.sign(diff))
        return ((np.where(sel, d, 0.0) * (g / normalizer)).astype(p.dtype),)

    return _result(np.asarray(total, dtype=p.dtype), (pred,), rule)
