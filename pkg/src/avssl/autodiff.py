"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` and, when any input requires a
gradient, records a closure that maps the output adjoint to input adjoints.
:func:`backward` walks the recorded graph in reverse topological order.

Non-finite values are treated as bugs: any op that would produce NaN or Inf
raises :class:`NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by a tensor containing zeros")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        if np.any(out == 0):
            raise NonFiniteError("sqrt gradient at zero")
        return (g * 0.5 / out,)

    return _result(out, (a,), backward, "sqrt")


_relu_trace: list | None = None


@contextmanager
def trace_relu():
    """Collect the activation mask of every relu evaluated inside the block."""
    global _relu_trace
    outer, _relu_trace = _relu_trace, []
    try:
        yield _relu_trace
    finally:
        _relu_trace = outer


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def stop_gradient(a) -> Tensor:
    """Value copy of ``a`` that is a constant for backpropagation."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward, "slice")


def flip(a, axis: int = 0) -> Tensor:
    """Reverse ``a`` along ``axis``."""
    a = as_tensor(a)
    return _result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(out, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        g2 = g
        if bd.ndim == 1:
            ga = np.multiply.outer(g2, bd)
            gb = np.tensordot(ad, g2, axes=(list(range(ad.ndim - 1)), list(range(g2.ndim))))
            return ga, gb
        if ad.ndim == 1:
            ga = g2 @ np.swapaxes(bd, -1, -2)
            gb = np.multiply.outer(ad, g2)
            return ga, _unbroadcast(gb, bd.shape)
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g2
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(out, (a, b), backward, "matmul")


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    if np.any(out == 0):
        raise ZeroDivisionError("L2 norm of a zero vector")

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * a.data / out,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, "l2norm")


def normalize(a, axis: int = -1) -> Tensor:
    return a / l2_norm(a, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# softmax family


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - _logsumexp(a.data, axis)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data - _logsumexp(a.data, axis))

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, K]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [N,K] logits and [N] labels, got {logits.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    n = logits.shape[0]
    logp = logits.data - _logsumexp(logits.data, 1)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _result(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# convolution


def conv(x, w, b=None, stride: int = 1, padding=0) -> Tensor:
    """N-d cross-correlation.

    x: [N, C, *spatial], w: [O, C, *kernel], b: [O]. Works for any number of
    spatial dims (2 for spectrograms, 3 for video). ``padding`` is one int or
    one per spatial axis. Implemented as one gather into columns plus a
    single tensordot.
    """
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv shape mismatch: x {x.shape}, w {w.shape}")
    kernel = w.shape[2:]
    pads = (padding,) * nd if isinstance(padding, int) else tuple(padding)
    if len(pads) != nd:
        raise ShapeError(f"padding {padding} does not match {nd} spatial dims")
    pad = [(0, 0), (0, 0)] + [(q, q) for q in pads]
    xp = np.pad(x.data, pad)
    out_sp = tuple((xp.shape[2 + d] - kernel[d]) // stride + 1 for d in range(nd))
    if any(n <= 0 for n in out_sp):
        raise ShapeError("conv input smaller than kernel")
    offsets = list(np.ndindex(*kernel))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
        )

    # cols: [N, C, K, *out]
    cols = np.stack([xp[window(off)] for off in offsets], axis=2)
    wk = w.data.reshape(w.shape[0], w.shape[1], len(offsets))
    out = np.tensordot(cols, wk, axes=([1, 2], [1, 2]))  # [N, *out, O]
    out = np.moveaxis(out, -1, 1)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape((1, -1) + (1,) * nd)
        parents.append(b)
    spatial_axes = tuple(range(2, 2 + nd))

    def backward(g):
        # g: [N, O, *out]
        gw = np.tensordot(g, cols, axes=([0, *spatial_axes], [0, *(a + 1 for a in spatial_axes)]))
        gw = gw.reshape(w.shape)
        gcols = np.tensordot(wk, g, axes=([0], [1]))  # [C, K, N, *out]
        gxp = np.zeros_like(xp)
        for k, off in enumerate(offsets):
            gxp[window(off)] += np.moveaxis(gcols[:, k], 0, 1)
        gx = gxp[(slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(pads, x.shape[2:]))]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, *spatial_axes)))
        return tuple(grads)

    return _result(out, parents, backward, f"conv{nd}d")


# ---------------------------------------------------------------------------
# batch norm


class BatchNormState:
    """Learned scale/shift plus running statistics for one batch-norm layer."""

    def __init__(self, num_features: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, state: BatchNormState, train: bool = True) -> Tensor:
    """Normalize per feature (axis 1) over the batch and any trailing axes.

    In train mode the running statistics are updated as
    ``running = momentum * running + (1 - momentum) * batch_stat``, using the
    unbiased batch variance for ``running_var``.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("batch_norm expects [N, F, ...] input")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    gamma, beta = state.gamma, state.beta
    count = x.data.size // x.shape[1]
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu.reshape(-1)
        state.running_var = m * state.running_var + (1 - m) * var.reshape(-1) * count / (count - 1)
    else:
        mu = state.running_mean.reshape(bshape)
        var = state.running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        if train:
            gsum = g.sum(axis=axes, keepdims=True)
            gxsum = (g * xhat).sum(axis=axes, keepdims=True)
            gx = (g_ * inv / count) * (count * g - gsum - xhat * gxsum)
        else:
            gx = g * g_ * inv
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# backward


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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves passed in ``leaves`` that the loss does not depend on receive an
    all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient flowing out of op '{node.op}'")
            key = id(parent)
            adjoints[key] = adjoints[key] + pg if key in adjoints else pg


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    grads: Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip_below_noise: bool = False,
    skip_kinks: bool = False,
    stats: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params`` (which are perturbed in place). ``grads`` overrides the analytic
    gradients, e.g. to test the checker itself. ``max_coords`` limits the check
    to a random subset of coordinates per parameter.

    With ``skip_below_noise`` a coordinate is skipped when both the analytic
    and the finite-difference derivative are below the roundoff resolution of
    central differences, ``64 * machine_eps * max(|f|, 1) / eps``. Such
    coordinates (e.g. a shift that a later batch norm cancels exactly) carry
    no checkable signal; a mismatch where either side is above the noise
    level is still reported.

    With ``skip_kinks`` a coordinate is skipped when some relu input changes
    sign between the ``+eps`` and ``-eps`` evaluations: the difference
    quotient then straddles a point where the objective is not
    differentiable and says nothing about the analytic gradient.

    ``stats``, when given, receives the counts ``checked``, ``skipped_noise``
    and ``skipped_kink``.
    """
    if grads is None:
        for p in params:
            p.zero_grad()
        backward(f(), leaves=params)
        grads = [p.grad.copy() for p in params]
    noise = 0.0
    if skip_below_noise:
        noise = 64 * np.finfo(np.float64).eps * max(abs(f().item()), 1.0) / eps
    counts = {"checked": 0, "skipped_noise": 0, "skipped_kink": 0}

    def evaluate():
        if not skip_kinks:
            return f().item(), None
        with trace_relu() as masks:
            value = f().item()
        return value, masks

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        gflat = np.asarray(g).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp, masks_p = evaluate()
            flat[i] = orig - eps
            fm, masks_m = evaluate()
            flat[i] = orig
            if skip_kinks and any(not np.array_equal(a, b) for a, b in zip(masks_p, masks_m)):
                counts["skipped_kink"] += 1
                continue
            fd = (fp - fm) / (2 * eps)
            a = gflat[i]
            if abs(a) < noise and abs(fd) < noise:
                counts["skipped_noise"] += 1
                continue
            counts["checked"] += 1
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    if stats is not None:
        stats.update(counts)
    return worst
