"""Temporal context aggregation: causal attention with accumulated keys/values.

Keys and values of frame t are augmented with a learnable-weighted sum of all
past frames' keys/values (token-aligned) before the per-frame attention, so
queries see spatiotemporal context without breaking causality.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def aggregate_kv(seq: Tensor, alpha: Tensor) -> Tensor:
    """Recurrent accumulation along axis 0: out_0 = seq_0,
    out_t = seq_t + alpha[t-1] * out_{t-1}.
    """
    t_len = seq.shape[0]
    if alpha.shape != (max(t_len - 1, 0),):
        raise ConfigError(
            f"alpha must have length T-1 = {t_len - 1}, got {alpha.shape}")
    acc = [seq[0]]
    for t in range(1, t_len):
        acc.append(seq[t] + alpha[t - 1] * acc[-1])
    return ad.stack(acc, axis=0)


class TcaBlock:
    """One pre-norm block: aggregated-KV attention plus an MLP sub-block."""

    def __init__(self, dim, heads, frames, rng, mlp_ratio=4):
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide dim ({dim})")
        self.dim = dim
        self.heads = heads
        self.frames = frames
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)
        # full history flow at init; training attenuates
        self.alpha = Tensor(np.ones(max(frames - 1, 0)), requires_grad=True)
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Mlp(dim, mlp_ratio * dim, rng)

    def _heads(self, x):
        t, n, _ = x.shape
        return x.reshape(t, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def attention(self, x: Tensor) -> Tensor:
        """x: (T, P+1, d) -> (T, P+1, d), frame t attending over accumulated
        keys/values of frames <= t."""
        t, n, d = x.shape
        q = self._heads(self.wq(x))
        k_hat = aggregate_kv(self._heads(self.wk(x)), self.alpha)
        v_hat = aggregate_kv(self._heads(self.wv(x)), self.alpha)
        scores = ad.matmul(q, k_hat.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v_hat)                      # (T, heads, N, dh)
        return self.wo(out.transpose(0, 2, 1, 3).reshape(t, n, d))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise ShapeError(f"TCA expects (T, P+1, {self.dim}), got {x.shape}")
        if x.shape[0] != self.frames:
            raise ConfigError(
                f"TCA block sized for T={self.frames}, got T={x.shape[0]}")
        x = x + self.attention(self.ln1(x))
        return x + self.mlp(self.ln2(x))

    def parameters(self):
        return nn.merge_params(
            nn.prefixed("wq", self.wq.parameters()),
            nn.prefixed("wk", self.wk.parameters()),
            nn.prefixed("wv", self.wv.parameters()),
            nn.prefixed("wo", self.wo.parameters()),
            {"alpha": self.alpha},
            nn.prefixed("ln1", self.ln1.parameters()),
            nn.prefixed("ln2", self.ln2.parameters()),
            nn.prefixed("mlp", self.mlp.parameters()))


class TcaStack:
    """n stacked TCA blocks; each block owns an independent alpha vector."""

    def __init__(self, dim, heads, frames, rng, n_blocks=2, mlp_ratio=4):
        self.blocks = [TcaBlock(dim, heads, frames, rng, mlp_ratio=mlp_ratio)
                       for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x

    def parameters(self):
        params = {}
        for i, block in enumerate(self.blocks):
            params = nn.merge_params(
                params, nn.prefixed(f"block{i}", block.parameters()))
        return params
