"""Small neural-net building blocks on top of the autodiff tensors.

Blocks expose their learnables through ``parameters()`` -> dict mapping a
unique dotted name to a Tensor, so the trainer can own one flat registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def merge_params(*dicts) -> dict:
    out = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ConfigError(f"duplicate parameter name '{k}'")
            out[k] = v
    return out


class Linear:
    """Affine map in_dim -> out_dim; weight stored (in, out)."""

    def __init__(self, in_dim, out_dim, rng, std=0.02, bias=True):
        self.w = Tensor(rng.normal(0.0, std, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        flat = x.ndim == 1
        if flat:
            x = x.reshape(1, -1)
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y.reshape(-1) if flat else y

    def parameters(self):
        p = {"w": self.w}
        if self.b is not None:
            p["b"] = self.b
        return p


class LayerNorm:
    def __init__(self, dim):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class Mlp:
    """Two-layer GELU MLP, the standard transformer feed-forward."""

    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def parameters(self):
        return merge_params(prefixed("fc1", self.fc1.parameters()),
                            prefixed("fc2", self.fc2.parameters()))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, d) -> (heads, N, d/heads)."""
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def join_heads(x: Tensor) -> Tensor:
    """(heads, N, dh) -> (N, heads*dh)."""
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


class SelfAttention:
    """Multi-head self-attention over one token sequence, optionally causal."""

    def __init__(self, dim, heads, rng, causal=False):
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide dim ({dim})")
        self.heads = heads
        self.dim = dim
        self.causal = causal
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"attention expects (N, {self.dim}), got {x.shape}")
        n = x.shape[0]
        q = split_heads(self.wq(x), self.heads)
        k = split_heads(self.wk(x), self.heads)
        v = split_heads(self.wv(x), self.heads)
        scores = ad.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.dim))
        if self.causal:
            mask = np.triu(np.full((n, n), -1e30), k=1)
            scores = scores + Tensor(mask)
        attn = ad.softmax(scores, axis=-1)
        return self.wo(join_heads(ad.matmul(attn, v)))

    def parameters(self):
        return merge_params(prefixed("wq", self.wq.parameters()),
                            prefixed("wk", self.wk.parameters()),
                            prefixed("wv", self.wv.parameters()),
                            prefixed("wo", self.wo.parameters()))


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim, heads, rng, mlp_hidden=None, causal=False):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, causal=causal)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_hidden or 4 * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def parameters(self):
        return merge_params(prefixed("ln1", self.ln1.parameters()),
                            prefixed("attn", self.attn.parameters()),
                            prefixed("ln2", self.ln2.parameters()),
                            prefixed("mlp", self.mlp.parameters()))
