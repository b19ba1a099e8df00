"""Tape-based reverse-mode autodiff on float64 numpy arrays.

Every operation builds a node in an implicit tape (the graph of parent
references held by each Tensor).  ``backward`` walks the tape in reverse
topological order.  A lightweight forward-mode ``Dual`` type rides on top of
the same primitives so that directional derivatives of a recorded function
(e.g. a decoder Jacobian-vector product) are themselves tape nodes and can be
differentiated again.
"""

from __future__ import annotations

import threading

import numpy as np

# When True, every primitive checks its output for NaN/Inf and raises.
DEBUG_CHECKS = False

# When set, primitives produce constant tensors with no parents (no tape).
# Thread-local so per-joint training threads cannot disturb each other.
_grad_mode = threading.local()


def _no_grad_active():
    return getattr(_grad_mode, "off", False)


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        self._prev = _no_grad_active()
        _grad_mode.off = True
        return self

    def __exit__(self, *exc):
        _grad_mode.off = self._prev
        return False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    # operators delegate to module-level ops so Dual can share the overloads
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, c):
        return power(self, c)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Dual:
    """Forward-mode value: primal and tangent are both tape tensors."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        if primal.data.shape != tangent.data.shape:
            raise ShapeError(
                f"dual primal/tangent shape mismatch {primal.data.shape} "
                f"vs {tangent.data.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.data.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, c):
        return power(self, c)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _is_dual(x):
    return isinstance(x, Dual)


def _make(data, parents, vjp, kind):
    """Create a tape node. ``vjp`` maps the output cotangent to a tuple of
    parent cotangents (None for parents that need no gradient)."""
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {kind}")
    out = Tensor(data)
    if _no_grad_active():
        return out
    track = any(p.requires_grad or p._parents for p in parents)
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
        out.requires_grad = True
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    if _is_dual(a) or _is_dual(b):
        pa, ta = (a.primal, a.tangent) if _is_dual(a) else (_as_tensor(a), None)
        pb, tb = (b.primal, b.tangent) if _is_dual(b) else (_as_tensor(b), None)
        if ta is None:
            t = tb
        elif tb is None:
            t = ta
        else:
            t = add(ta, tb)
        p = add(pa, pb)
        return Dual(p, _match_tangent(t, p))
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )
    return out


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    if _is_dual(a) or _is_dual(b):
        pa, ta = (a.primal, a.tangent) if _is_dual(a) else (_as_tensor(a), None)
        pb, tb = (b.primal, b.tangent) if _is_dual(b) else (_as_tensor(b), None)
        terms = []
        if ta is not None:
            terms.append(mul(ta, pb))
        if tb is not None:
            terms.append(mul(pa, tb))
        t = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        p = mul(pa, pb)
        return Dual(p, _match_tangent(t, p))
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def div(a, b):
    return mul(a, power(b, -1.0))


def power(x, c):
    """Elementwise x**c for a constant exponent c."""
    c = float(c)
    if _is_dual(x):
        p = power(x.primal, c)
        t = mul(mul(power(x.primal, c - 1.0), x.tangent), c)
        return Dual(p, _match_tangent(t, p))
    x = _as_tensor(x)
    return _make(
        x.data**c,
        (x,),
        lambda g: (g * c * x.data ** (c - 1.0),),
        "power",
    )


def sqrt(x):
    return power(x, 0.5)


def relu(x):
    if _is_dual(x):
        mask = Tensor((x.primal.data > 0).astype(np.float64))
        return Dual(relu(x.primal), mul(x.tangent, mask))
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(
        np.where(mask, x.data, 0.0),
        (x,),
        lambda g: (g * mask,),
        "relu",
    )


def absolute(x):
    if _is_dual(x):
        sign = Tensor(np.sign(x.primal.data))
        return Dual(absolute(x.primal), mul(x.tangent, sign))
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x):
    if _is_dual(x):
        p = exp(x.primal)
        return Dual(p, mul(x.tangent, p))
    x = _as_tensor(x)
    v = np.exp(x.data)
    return _make(v, (x,), lambda g: (g * v,), "exp")


def log(x):
    if _is_dual(x):
        return Dual(log(x.primal), div(x.tangent, x.primal))
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def _match_tangent(t, p):
    """Broadcast a tangent tensor up to the primal's shape if needed."""
    if t.data.shape == p.data.shape:
        return t
    return mul(t, Tensor(np.ones(p.data.shape)))


# ---------------------------------------------------------------------------
# shape / reduction primitives


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if _is_dual(x):
        return Dual(reshape(x.primal, shape), reshape(x.tangent, shape))
    x = _as_tensor(x)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}")
    old = x.data.shape
    return _make(
        x.data.reshape(shape),
        (x,),
        lambda g: (g.reshape(old),),
        "reshape",
    )


def flatten(x):
    shp = x.shape
    rest = int(np.prod(shp[1:])) if len(shp) > 1 else 1
    return reshape(x, (shp[0], rest))


def reduce_sum(x, axis=None, keepdims=False):
    if _is_dual(x):
        return Dual(
            reduce_sum(x.primal, axis, keepdims),
            reduce_sum(x.tangent, axis, keepdims),
        )
    x = _as_tensor(x)
    shape = x.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def reduce_mean(x, axis=None, keepdims=False):
    if _is_dual(x):
        return Dual(
            reduce_mean(x.primal, axis, keepdims),
            reduce_mean(x.tangent, axis, keepdims),
        )
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


def concat(tensors, axis=0):
    if any(_is_dual(t) for t in tensors):
        prim = concat([t.primal if _is_dual(t) else t for t in tensors], axis)
        tangs = []
        for t in tensors:
            if _is_dual(t):
                tangs.append(t.tangent)
            else:
                tangs.append(Tensor(np.zeros(t.data.shape)))
        return Dual(prim, concat(tangs, axis))
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        vjp,
        "concat",
    )


def matmul(a, b):
    if _is_dual(a) or _is_dual(b):
        pa, ta = (a.primal, a.tangent) if _is_dual(a) else (_as_tensor(a), None)
        pb, tb = (b.primal, b.tangent) if _is_dual(b) else (_as_tensor(b), None)
        terms = []
        if ta is not None:
            terms.append(matmul(ta, pb))
        if tb is not None:
            terms.append(matmul(pa, tb))
        t = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        return Dual(matmul(pa, pb), t)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


# ---------------------------------------------------------------------------
# convolution machinery (NHWC layout, kernels kh x kw x Cin x Cout)


def _conv_pads(in_hw, k, stride, padding):
    if padding == "VALID":
        return (0, 0, 0, 0)
    # SAME: output ceil(in/stride); odd total padding goes bottom/right
    oh = -(-in_hw[0] // stride)
    ow = -(-in_hw[1] // stride)
    ph = max((oh - 1) * stride + k - in_hw[0], 0)
    pw = max((ow - 1) * stride + k - in_hw[1], 0)
    return (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)


def _im2col(x, kh, kw, stride, pads):
    pt, pb, pl, pr = pads
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    n, hh, ww, c = xp.shape
    oh = (hh - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (n, oh, ow, kh, kw, c),
        (s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n * oh * ow, kh * kw * c), (n, oh, ow)


def _conv_forward(x, k, stride, pads):
    kh, kw, ci, co = k.shape
    cols, (n, oh, ow) = _im2col(x, kh, kw, stride, pads)
    return (cols @ k.reshape(kh * kw * ci, co)).reshape(n, oh, ow, co)


def _conv_dx(dy, k, stride, pads, x_shape):
    """Input-gradient of _conv_forward; also the transposed-conv forward."""
    kh, kw, ci, co = k.shape
    n, oh, ow, _ = dy.shape
    pt, pb, pl, pr = pads
    hp = x_shape[1] + pt + pb
    wp = x_shape[2] + pl + pr
    dcols = dy.reshape(n * oh * ow, co) @ k.reshape(kh * kw * ci, co).T
    dcols = dcols.reshape(n, oh, ow, kh, kw, ci)
    dxp = np.zeros((n, hp, wp, ci))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                dcols[:, :, :, i, j, :]
            )
    return dxp[:, pt : hp - pb, pl : wp - pr, :]


def _conv_dk(x, dy, stride, pads, k_shape):
    kh, kw, ci, co = k_shape
    cols, (n, oh, ow) = _im2col(x, kh, kw, stride, pads)
    return (cols.T @ dy.reshape(n * oh * ow, co)).reshape(kh, kw, ci, co)


def conv2d(x, k, stride=1, padding="SAME"):
    """2-D correlation, NHWC input, (kh, kw, Cin, Cout) kernel."""
    if _is_dual(x):
        kk = k.primal if _is_dual(k) else k
        return Dual(conv2d(x.primal, kk, stride, padding),
                    conv2d(x.tangent, kk, stride, padding))
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.data.shape[3] != k.data.shape[2]:
        raise ShapeError(f"conv2d: input {x.data.shape}, kernel {k.data.shape}")
    pads = _conv_pads(x.data.shape[1:3], k.data.shape[0], stride, padding)
    x_shape, k_shape = x.data.shape, k.data.shape

    def vjp(g):
        return (
            _conv_dx(g, k.data, stride, pads, x_shape),
            _conv_dk(x.data, g, stride, pads, k_shape),
        )

    return _make(_conv_forward(x.data, k.data, stride, pads), (x, k), vjp, "conv2d")


def conv_transpose2d(x, k, stride=2, out_hw=None):
    """Transposed conv: the exact adjoint of conv2d(stride, SAME).

    Input (N, h, w, Cin), kernel (kh, kw, Cout, Cin), output
    (N, stride*h, stride*w, Cout) by default.
    """
    if _is_dual(x):
        kk = k.primal if _is_dual(k) else k
        return Dual(conv_transpose2d(x.primal, kk, stride, out_hw),
                    conv_transpose2d(x.tangent, kk, stride, out_hw))
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.data.shape[3] != k.data.shape[3]:
        raise ShapeError(
            f"conv_transpose2d: input {x.data.shape}, kernel {k.data.shape}"
        )
    n, h, w, cin = x.data.shape
    kh, kw, cout, _ = k.data.shape
    if out_hw is None:
        out_hw = (stride * h, stride * w)
    pads = _conv_pads(out_hw, kh, stride, "SAME")
    out_shape = (n, out_hw[0], out_hw[1], cout)
    k_shape = k.data.shape

    def vjp(g):
        return (
            _conv_forward(g, k.data, stride, pads),
            _conv_dk(g, x.data, stride, pads, k_shape),
        )

    return _make(_conv_dx(x.data, k.data, stride, pads, out_shape), (x, k), vjp,
                 "conv_transpose2d")


# ---------------------------------------------------------------------------
# losses


def mse(a, b):
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def bce_with_logits(logit, label):
    """Elementwise binary cross-entropy on pre-sigmoid logits (stable form)."""
    if _is_dual(logit):
        raise TypeError("bce_with_logits is not supported in forward mode")
    logit = _as_tensor(logit)
    label = _as_tensor(label)
    x, y = logit.data, np.broadcast_to(label.data, logit.data.shape)
    val = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    return _make(val, (logit,), lambda g: (g * (sig - y),), "bce_with_logits")


def squared_l2(x):
    return reduce_sum(mul(x, x))


# ---------------------------------------------------------------------------
# backward pass and gradient utilities


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def input_gradient(fn, x_data):
    """Gradient of the scalar-valued recorded function ``fn`` at ``x_data``."""
    x = Tensor(np.asarray(x_data, dtype=np.float64), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError("input_gradient needs a scalar-valued function")
    backward(out)
    return np.zeros_like(x.data) if x.grad is None else x.grad


def decoder_vjp(decoder, z_hat, v):
    """Rows of J_g(z)^T v for a batched decoder g, as a differentiable node.

    ``z_hat`` is a (B, d) tape tensor, ``v`` a constant array shaped like the
    decoder output.  Returns a (B, d) tensor whose column k is the per-sample
    inner product <dg/dz_k, v>, computed with d forward-mode passes so the
    result supports a further backward pass through the decoder parameters.
    """
    if z_hat.data.ndim != 2:
        raise ShapeError(f"decoder_vjp expects (B, d) latents, got {z_hat.data.shape}")
    b, d = z_hat.data.shape
    v = np.asarray(v, dtype=np.float64)
    cols = []
    for k in range(d):
        tang = np.zeros((b, d))
        tang[:, k] = 1.0
        out = decoder(Dual(z_hat, Tensor(tang)))
        if not _is_dual(out):
            raise ShapeError("decoder did not propagate the tangent")
        if out.primal.data.shape[0] != b:
            raise ShapeError("decoder output batch dimension mismatch")
        if out.primal.data.shape != v.shape:
            raise ShapeError(
                f"decoder output {out.primal.data.shape} vs v {v.shape}"
            )
        prod = mul(out.tangent, Tensor(v))
        axes = tuple(range(1, out.primal.data.ndim))
        cols.append(reshape(reduce_sum(prod, axis=axes), (b, 1)))
    return concat(cols, axis=1)


def grad_check(fn, point, step=1e-6, tolerance=1e-6):
    """Central-difference check of a scalar function's gradient.

    Returns (max_rel_err, worst_flat_index, passed).
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = input_gradient(fn, point)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(Tensor(point)).data)
            flat[i] = orig - step
            lo = float(fn(Tensor(point)).data)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    err = float(rel.reshape(-1)[worst])
    return err, worst, err < tolerance


# ---------------------------------------------------------------------------
# composite layers shared by the network builder (usable on Tensor or Dual)


def dense(x, w, b):
    return add(matmul(x, w), b)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """GroupNorm over an NHWC tensor; gamma/beta are per-channel (C,)."""
    shp = x.shape
    n, h, w_, c = shp
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    g = reshape(x, (n, h, w_, groups, c // groups))
    mean = reduce_mean(g, axis=(1, 2, 4), keepdims=True)
    centered = sub(g, mean)
    var = reduce_mean(mul(centered, centered), axis=(1, 2, 4), keepdims=True)
    normed = mul(centered, power(add(var, eps), -0.5))
    out = reshape(normed, shp)
    return add(mul(out, gamma), beta)
