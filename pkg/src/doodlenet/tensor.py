"""Minimal NumPy tensor with reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.

Only the operator set needed by the segmentation network is provided. Binary
elementwise ops broadcast over axes of extent 1 (same rank only).
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float array with an optional gradient.

    ``data`` is float32 unless a float64 ndarray (or ``dtype=np.float64``) is
    given; the 64-bit mode exists for gradient checking.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype.type in _FLOAT_TYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        if arr.dtype.type not in _FLOAT_TYPES:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return hadamard(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Without an explicit ``grad`` the tensor must be a scalar. Leaf gradients
        add to whatever is already stored, so two calls without a reset sum.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if not np.all(np.isfinite(g)):
                        label = node.name or repr(node)
                        raise FloatingPointError(f"non-finite gradient reaching {label}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim != b.ndim:
        raise ValueError(f"rank mismatch for broadcast: {a.shape} vs {b.shape}")
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def hadamard(a, b) -> Tensor:
    """Elementwise product; axes of extent 1 broadcast."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return hadamard(tsum(x, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; input order is preserved in the output."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: off-axis extents differ {t.shape} vs {ref}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def max_along(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis`` (dropped). Gradient goes to the first maximiser."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (..., m, k) and (..., k, n) with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b),
                   lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW layout, kernels are not flipped."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd")
    if bias is not None and bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")
    s, p, d = stride, padding, dilation
    Ho = (H + 2 * p - d * (kh - 1) - 1) // s + 1
    Wo = (W + 2 * p - d * (kw - 1) - 1) // s + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d: non-positive output extent {Ho}x{Wo}")

    xt = x.data.transpose(1, 0, 2, 3)
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
    Hp, Wp = xt.shape[2], xt.shape[3]
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                               j * d: j * d + s * (Wo - 1) + 1: s]
    cols2 = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = weight.data.reshape(O, -1)
    out = (wmat @ cols2).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d: i * d + s * (Ho - 1) + 1: s,
                        j * d: j * d + s * (Wo - 1) + 1: s] += gcols[:, i, j]
            if p:
                gxp = gxp[:, :, p:Hp - p, p:Wp - p]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# normalisation and resampling
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    B, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible by {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(B, C, H, W).astype(x.dtype, copy=False)
    gd, bd = gamma.data[None, :, None, None], beta.data[None, :, None, None]
    out = xhat * gd + bd

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = (g * gd).reshape(B, groups, -1)
            xh = xhat.reshape(B, groups, -1)
            gx = inv * (dxh - dxh.mean(axis=2, keepdims=True)
                        - xh * (dxh * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(B, C, H, W).astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


@lru_cache(maxsize=256)
def _lerp_plan(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(mat, (np.arange(n_out), i1), w1)
    return i0, i1, w1, mat


def _lerp_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    i0, i1, w1, _ = _lerp_plan(a.shape[axis], n_out)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w1.astype(a.dtype).reshape(shape)
    return lo + w * (hi - lo)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centres and edge clamping.

    Forward uses the ``lo + w * (hi - lo)`` form so constant maps stay exact.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output extents must be >= 1")
    H, W = x.shape[-2:]
    if (H, W) == (out_h, out_w):
        return _result(x.data, (x,), lambda g: (g,))
    out = _lerp_axis(_lerp_axis(x.data, x.ndim - 2, out_h), x.ndim - 1, out_w)
    mh = _lerp_plan(H, out_h)[3].astype(x.dtype)
    mw = _lerp_plan(W, out_w)[3].astype(x.dtype)
    return _result(out, (x,), lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------------------
# probability-ish ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-8) -> Tensor:
    """Divide each vector along ``axis`` by ``sqrt(sum(x**2) + eps**2)``."""
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps * eps)
    y = x.data / n
    return _result(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[target]`` (classes on axis 1)."""
    targets = np.asarray(targets)
    B, K = logits.shape[:2]
    if targets.shape != (B,) + logits.shape[2:]:
        raise ValueError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ValueError(f"cross_entropy: target index outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    t = targets[:, None].astype(np.intp)
    picked = np.take_along_axis(logp, t, axis=1)
    m = targets.size
    loss = np.asarray(-picked.sum() / m, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
        return (grad * (g / m),)

    return _result(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5,
               seed: int = 0, floor: float = 1e-5, indices: dict | None = None) -> dict:
    """Compare analytic and central-difference gradients in float64.

    The scalar probe is ``sum(fn(*inputs) * R)`` with a fixed random ``R``.
    Perturbation size is ``step * max(1, |x|)``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. ``indices`` optionally restricts the
    check to given flat indices per input position.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrs, need_grad):
        nonlocal probe
        ts = [Tensor(a, requires_grad=need_grad) for a in arrs]
        out = fn(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return tsum(hadamard(out, Tensor(probe))), ts

    loss, ts = scalar(arrays, True)
    loss.backward()
    worst = 0.0
    per_input = []
    for pos, (arr, t) in enumerate(zip(arrays, ts)):
        analytic = t.grad if t.grad is not None else np.zeros_like(arr)
        flat_idx = range(arr.size) if indices is None or pos not in indices else indices[pos]
        err_here = 0.0
        for flat in flat_idx:
            idx = np.unravel_index(flat, arr.shape)
            orig = arr[idx]
            h = step * max(1.0, abs(orig))
            arr[idx] = orig + h
            fp = scalar(arrays, False)[0].item()
            arr[idx] = orig - h
            fm = scalar(arrays, False)[0].item()
            arr[idx] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[idx])
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            err_here = max(err_here, rel)
        per_input.append(err_here)
        worst = max(worst, err_here)
    return {"max_rel_error": worst, "per_input": per_input}
