"""Minimal dense-tensor reverse-mode automatic differentiation.

Double precision throughout; GELU uses the exact Gaussian-CDF form so
finite-difference oracles match tightly.  A Tensor owns its value array and
an optional gradient slot; the tape is the implicit DAG of parent links,
traversed once in reverse topological order by ``backward``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse as _sparse
from scipy.special import erf as _erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


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


class Tensor:
    """A numpy array participating in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- graph traversal ---------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.value)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if id(node) in seen:
                continue
            if done:
                seen.add(id(node))
                topo.append(node)
            else:
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen and p.requires_grad:
                        stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return mul_scalar(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key):
        return slice_op(self, key)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise and linear primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value + b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    out._backward = bw
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value * b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    out._backward = bw
    return out


def mul_scalar(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.value * s, parents=(a,))
    out._backward = lambda g: a._accumulate(g * s)
    return out


def reciprocal(a):
    a = _as_tensor(a)
    out = Tensor(1.0 / a.value, parents=(a,))
    out._backward = lambda g: a._accumulate(-g / (a.value * a.value))
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.value @ b.value, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    out._backward = bw
    return out


def einsum(spec, *operands):
    """Differentiable einsum.

    Every index of a differentiable operand must also appear in another
    operand or in the output (true for all uses in this package).
    """
    tensors = [_as_tensor(op) for op in operands]
    values = [t.value for t in tensors]
    out = Tensor(np.einsum(spec, *values), parents=tuple(tensors))
    inputs, out_sub = spec.split("->")
    subs = inputs.split(",")

    def bw(g):
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                continue
            other_subs = [out_sub] + [s for j, s in enumerate(subs) if j != i]
            other_vals = [g] + [v for j, v in enumerate(values) if j != i]
            gspec = ",".join(other_subs) + "->" + subs[i]
            t._accumulate(np.einsum(gspec, *other_vals))

    out._backward = bw
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    out._backward = bw
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.value.reshape(shape), parents=(a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.value.shape))
    return out


def slice_op(a, key):
    a = _as_tensor(a)
    out = Tensor(a.value[key], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.value)
        full[key] = g
        a._accumulate(full)

    out._backward = bw
    return out


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.value.shape).copy())

    out._backward = bw
    return out


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul_scalar(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities --------------------------------------------------------


def gelu(a):
    a = _as_tensor(a)
    x = a.value
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, parents=(a,))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    out._backward = lambda g: a._accumulate(g * (cdf + x * pdf))
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    out = Tensor(s, parents=(a,))
    out._backward = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.value)
    out = Tensor(t, parents=(a,))
    out._backward = lambda g: a._accumulate(g * (1.0 - t * t))
    return out


def sin(a):
    a = _as_tensor(a)
    out = Tensor(np.sin(a.value), parents=(a,))
    out._backward = lambda g: a._accumulate(g * np.cos(a.value))
    return out


def sqrt(a):
    a = _as_tensor(a)
    r = np.sqrt(a.value)
    out = Tensor(r, parents=(a,))
    out._backward = lambda g: a._accumulate(g * 0.5 / r)
    return out


def exp(a):
    a = _as_tensor(a)
    e = np.exp(a.value)
    out = Tensor(e, parents=(a,))
    out._backward = lambda g: a._accumulate(g * e)
    return out


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, parents=(a,))

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        a._accumulate(s * (g - dot))

    out._backward = bw
    return out


# -- gather / scatter / segment ops ---------------------------------------


def gather_rows(a, indices):
    """Row selection a[indices]; backward scatter-adds into the source."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.value[indices], parents=(a,))

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, indices, g)
        a._accumulate(full)

    out._backward = bw
    return out


def sparse_matmul(mat, a):
    """Product of a constant scipy sparse matrix with a Tensor (rows x feat)."""
    a = _as_tensor(a)
    out = Tensor(mat @ a.value, parents=(a,))
    mat_t = mat.T.tocsr()
    out._backward = lambda g: a._accumulate(mat_t @ g)
    return out


def selection_matrix(indices, n_rows):
    """CSR matrix S with (S @ X)[e] = X[indices[e]]."""
    indices = np.asarray(indices, dtype=np.intp)
    e = len(indices)
    return _sparse.csr_matrix(
        (np.ones(e), (np.arange(e), indices)), shape=(e, n_rows)
    )


def segment_sum(a, segments, num_segments):
    a = _as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    val = np.zeros((num_segments,) + a.value.shape[1:])
    np.add.at(val, segments, a.value)
    out = Tensor(val, parents=(a,))
    out._backward = lambda g: a._accumulate(g[segments])
    return out


def segment_mean(a, segments, num_segments):
    counts = np.bincount(np.asarray(segments), minlength=num_segments).astype(float)
    counts = np.maximum(counts, 1.0)
    total = segment_sum(a, segments, num_segments)
    shape = (num_segments,) + (1,) * (total.ndim - 1)
    return mul(total, Tensor(1.0 / counts.reshape(shape)))


def segment_max(a, segments, num_segments):
    a = _as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    val = np.full((num_segments,) + a.value.shape[1:], -np.inf)
    np.maximum.at(val, segments, a.value)
    out = Tensor(val, parents=(a,))

    def bw(g):
        full = np.zeros_like(a.value)
        mask = a.value == val[segments]
        # Split gradient between exact ties to keep the op permutation-invariant.
        counts = np.zeros_like(val)
        np.add.at(counts, segments, mask.astype(float))
        full[mask] = (g[segments] / counts[segments])[mask]
        a._accumulate(full)

    out._backward = bw
    return out


# -- losses ----------------------------------------------------------------


def mse(pred, target):
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    diff = add(pred, mul_scalar(target, -1.0))
    return reduce_mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# MLPs


class MlpSpec:
    """Dense GELU network: widths[0] -> ... -> widths[-1].

    GELU is applied between layers but not after the last.  When
    ``residual`` is set and the input/output widths of a layer match, the
    layer adds its input back.
    """

    def __init__(self, widths, residual=False):
        widths = list(widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError("need >= 1 layer with positive widths")
        self.widths = widths
        self.residual = residual

    def n_layers(self):
        return len(self.widths) - 1

    def init_params(self, rng, prefix="mlp"):
        params = {}
        for i, (fin, fout) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            lim = 1.0 / math.sqrt(fin)
            params[f"{prefix}/w{i}"] = rng.uniform(-lim, lim, size=(fin, fout))
            params[f"{prefix}/b{i}"] = np.zeros(fout)
        return params


def mlp_forward(spec, params, x, prefix="mlp"):
    """Apply an MlpSpec given a flat {name: Tensor} parameter dict."""
    h = _as_tensor(x)
    n = spec.n_layers()
    for i in range(n):
        w = params[f"{prefix}/w{i}"]
        b = params[f"{prefix}/b{i}"]
        if w.value.shape[0] != h.value.shape[-1]:
            raise ValueError(
                f"layer {i}: input width {h.value.shape[-1]} != {w.value.shape[0]}"
            )
        z = add(matmul(h, w), b)
        if spec.residual and z.value.shape == h.value.shape:
            z = add(z, h)
        h = gelu(z) if i < n - 1 else z
    return h


# ---------------------------------------------------------------------------
# Optimizer and schedule


class OptimizerState:
    """AdamW moments keyed like the parameter dict."""

    def __init__(self, params, base_lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps


def adamw_step(state, params, grads, lr=None):
    """One decoupled-weight-decay Adam step; mutates params and state."""
    if lr is None:
        lr = state.base_lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    for k, p in params.items():
        g = grads[k]
        if g is None:
            g = np.zeros_like(p)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p)
    return params, state


def cosine_decay(step, total_steps, base_lr):
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
