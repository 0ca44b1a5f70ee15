"""Dense-tensor substrate with reverse-mode automatic differentiation.

Every operation the anticipation model needs is implemented here as a numpy
forward pass plus a backward closure. Gradients accumulate additively across
uses of the same tensor; zeroing is explicit (``zero_grad``). The whole module
runs in double precision by default so finite-difference verification
(`grad_check`) is meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericError, ShapeError

# When enabled, every op validates its output for NaN/Inf and raises
# NumericError naming the op. grad_check switches it on.
CHECK_FINITE = False

# Optional detach tape used by grad_check: values passing through detach()
# are captured on the reference evaluation and replayed verbatim during the
# finite-difference probes, so stop-gradient semantics are what gets checked.
_DETACH_TAPE = None


class _DetachTape:
    def __init__(self):
        self.mode = "record"
        self.values = []
        self.cursor = 0

    def replay_from_start(self):
        self.mode = "replay"
        self.cursor = 0

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _finite(name, data):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{name}'")
    return data


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Constant view of this tensor: same data, no gradient flow."""
        tape = _DETACH_TAPE
        if tape is not None:
            if tape.mode == "record":
                tape.values.append(self.data.copy())
            else:
                value = tape.values[tape.cursor]
                tape.cursor += 1
                return Tensor(value, requires_grad=False, dtype=value.dtype)
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar")
            grad = np.ones_like(self.data)
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _make(np.add(self.data, other.data), (self, other), "add")
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g, other.shape))
            out._backward = back
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,), "neg")
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _make(np.multiply(self.data, other.data), (self, other), "mul")
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.shape))
            out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / other)
        return self * _as_tensor(other) ** -1.0

    def __rtruediv__(self, other):
        return _as_tensor(other) * self ** -1.0

    def __pow__(self, p):
        out = _make(self.data ** p, (self,), "pow")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * p * self.data ** (p - 1))
        return out

    # -- shape manipulation --------------------------------------------------

    def reshape(self, *shape):
        out = _make(self.data.reshape(*shape), (self,), "reshape")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        out = _make(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            inv = np.argsort(axes)
            out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,), "getitem")
        if out.requires_grad:
            def back(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)
            out._backward = back
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def back(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape).copy())
            out._backward = back
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- nonlinearities -------------------------------------------------------

    def exp(self):
        out = _make(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self):
        out = _make(np.log(self.data), (self,), "log")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g / self.data)
        return out

    def abs(self):
        out = _make(np.abs(self.data), (self,), "abs")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * np.sign(self.data))
        return out

    def tanh(self):
        out = _make(np.tanh(self.data), (self,), "tanh")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (1.0 - out.data ** 2))
        return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, prev, name):
    out = Tensor(_finite(name, data))
    out.requires_grad = any(p.requires_grad for p in prev)
    if out.requires_grad:
        out._prev = tuple(prev)
    return out


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradients for both operands (batched leading dims ok)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} vs {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.shape))
        out._backward = back
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def back(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accum(piece)
        out._backward = back
    return out


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tensors, "stack")
    if out.requires_grad:
        def back(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accum(np.take(g, i, axis=axis))
        out._backward = back
    return out


# -- model nonlinearities -------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = np.where(x.data >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    out = _make(s, (x,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * out.data * (1.0 - out.data))
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = _make(x.data * cdf, (x,), "gelu")
    if out.requires_grad:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data ** 2)
        out._backward = lambda g: x._accum(g * (cdf + x.data * pdf))
    return out


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Shift-invariant softmax along `axis`."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), "softmax")
    if out.requires_grad:
        def back(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - dot))
        out._backward = back
    return out


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-probability of `target` under softmax(logits); 1-d logits."""
    logits = _as_tensor(logits)
    k = logits.data.shape[-1]
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-d logits, got {logits.shape}")
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    m = logits.data.max()
    lse = m + np.log(np.exp(logits.data - m).sum())
    out = _make(np.asarray(lse - logits.data[target]), (logits,), "cross_entropy")
    if out.requires_grad:
        p = np.exp(logits.data - lse)
        def back(g):
            gl = p * g
            gl[target] -= g
            logits._accum(gl)
        out._backward = back
    return out


def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """cos(a, b) = a.b / (|a||b| + eps); returns 0 for two zero vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    num = (a * b).sum()
    den = ((a * a).sum() ** 0.5) * ((b * b).sum() ** 0.5) + eps
    return num / den


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature extent {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * ((var + eps) ** -0.5) * gain + bias


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute elementwise difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_mean shape mismatch: {a.shape} vs {b.shape}")
    return (a - b).abs().mean()


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return ((a - b) ** 2).mean()


# -- verification harness ---------------------------------------------------------

def grad_check(f, params, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar f() against central differences.

    `f` is a zero-argument callable rebuilding its graph from `params` on each
    call. Returns the max over coordinates of
    |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).

    Detached values are recorded during the reference evaluation and replayed
    during the difference probes, so losses with stop-gradient branches are
    checked against the derivative they actually optimize.
    """
    global CHECK_FINITE, _DETACH_TAPE
    prev_flag, CHECK_FINITE = CHECK_FINITE, True
    prev_tape, _DETACH_TAPE = _DETACH_TAPE, _DetachTape()
    try:
        for p in params:
            p.zero_grad()
        f().backward()
        _DETACH_TAPE.replay_from_start()
        grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                 for p in params]
        worst = 0.0
        for p, g_ad in zip(params, grads):
            flat = p.data.reshape(-1)
            g_flat = g_ad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                _DETACH_TAPE.cursor = 0
                f_plus = float(f().data)
                flat[i] = orig - eps
                _DETACH_TAPE.cursor = 0
                f_minus = float(f().data)
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * eps)
                err = abs(g_flat[i] - g_fd) / max(1.0, abs(g_flat[i]), abs(g_fd))
                worst = max(worst, err)
        return worst
    finally:
        CHECK_FINITE = prev_flag
        _DETACH_TAPE = prev_tape


def zero_grads(params):
    for p in params:
        p.zero_grad()


def frozen_choice(values: np.ndarray) -> np.ndarray:
    """Record/replay a discrete choice (e.g. top-k indices) under grad_check's
    tape, holding it fixed during the finite-difference probes."""
    tape = _DETACH_TAPE
    values = np.asarray(values)
    if tape is not None:
        if tape.mode == "record":
            tape.values.append(values.copy())
        else:
            values = tape.values[tape.cursor]
            tape.cursor += 1
    return values
