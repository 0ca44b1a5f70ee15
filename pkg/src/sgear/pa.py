"""Prototype attention: per-frame prototype selection, Toeplitz temporal order
encoding, cosine-gated fusion and the merge with the causal class-token stream.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def frame_relative_repr(cls_stream, protos) -> np.ndarray:
    """(T, K) cosine similarities of each frame's class token against the
    prototype rows. Selection is discrete, so this runs outside the tape."""
    x = cls_stream.data if isinstance(cls_stream, Tensor) else np.asarray(cls_stream)
    p = protos.data if isinstance(protos, Tensor) else np.asarray(protos)
    if x.shape[-1] != p.shape[-1]:
        raise ShapeError(f"feature dim {x.shape[-1]} does not match prototype "
                         f"dim {p.shape[-1]}")
    xn = np.linalg.norm(x, axis=-1, keepdims=True)
    pn = np.linalg.norm(p, axis=-1, keepdims=True)
    return (x @ p.T) / (xn * pn.T + 1e-8)


def select_prototypes(sims: np.ndarray, k: int):
    """Top-k prototype indices per frame, ties broken by lower index.

    Returns (per_frame lists, flat index array of length T*k in frame order).
    """
    t_len, num_protos = sims.shape
    if not 1 <= k <= num_protos:
        raise ConfigError(f"k={k} must be in [1, {num_protos}]")
    per_frame = []
    for t in range(t_len):
        order = np.argsort(-sims[t], kind="stable")   # stable: lower index wins ties
        per_frame.append([int(i) for i in order[:k]])
    flat = np.array([i for row in per_frame for i in row], dtype=np.intp)
    return per_frame, flat


def build_toeplitz(weights: Tensor, t_len: int, m: int) -> Tensor:
    """(T, m) Toeplitz matrix from T+m-1 weights: main diagonal w0,
    superdiagonals w1..w_{m-1}, subdiagonals w_m..w_{T+m-2}."""
    if weights.shape != (t_len + m - 1,):
        raise ConfigError(
            f"need {t_len + m - 1} Toeplitz weights for T={t_len}, m={m}; "
            f"got {weights.shape}")
    i = np.arange(t_len)[:, None]
    j = np.arange(m)[None, :]
    idx = np.where(j >= i, j - i, (m - 1) + (i - j))
    return weights[idx]


def pa_fuse(queries: Tensor, keys: Tensor, values: Tensor, delta: Tensor,
            beta: Tensor, scale: str = "d") -> Tensor:
    """Mix cosine-style attention with the temporal-order matrix:
    (sigmoid(beta) * softmax(QK^T / d) + (1 - sigmoid(beta)) * delta) V.

    `scale` selects the attention divisor: "d" (as specified) or "sqrt_d".
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query dim {queries.shape} vs key dim {keys.shape}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError("keys and values must have the same sequence length")
    d = queries.shape[-1]
    div = float(d) if scale == "d" else float(np.sqrt(d))
    if scale not in ("d", "sqrt_d"):
        raise ConfigError(f"unknown pa scale '{scale}'")
    scores = ad.matmul(queries, keys.T) * (1.0 / div)
    gate = ad.sigmoid(beta)
    mixed = gate * ad.softmax(scores, axis=-1) + (1.0 - gate) * delta
    return ad.matmul(mixed, values)


def merge(causal_cls: Tensor, fused: Tensor, lam: Tensor) -> Tensor:
    """sigmoid(lam)-weighted sum of the causal class stream and the PA output."""
    if causal_cls.shape != fused.shape:
        raise ShapeError(f"merge shape mismatch: {causal_cls.shape} vs {fused.shape}")
    gate = ad.sigmoid(lam)
    return gate * causal_cls + (1.0 - gate) * fused


class PaBlock:
    """Prototype attention over the raw class-token stream.

    Selection (top-k per frame) is hard and carries no gradient; gradients do
    flow into the selected prototypes' key/value projections.
    """

    def __init__(self, dim, frames, rng, k=1, scale="d"):
        self.dim = dim
        self.frames = frames
        self.k = k
        self.scale = scale
        self.m = frames * k
        self.wq = nn.Linear(dim, dim, rng)
        self.wk = nn.Linear(dim, dim, rng)
        self.wv = nn.Linear(dim, dim, rng)
        self.wo = nn.Linear(dim, dim, rng)
        # rows of delta start uniform so its value mix matches softmax's scale
        self.toe_weights = Tensor(np.full(frames + self.m - 1, 1.0 / self.m),
                                  requires_grad=True)
        self.beta = Tensor(np.asarray(0.0), requires_grad=True)
        self.lam = Tensor(np.asarray(0.0), requires_grad=True)

    def __call__(self, cls_stream: Tensor, protos: Tensor):
        """cls_stream: (T, d) raw class tokens; protos: (K, d).

        Returns (fused (T, d), per-frame selected index lists).
        """
        if cls_stream.shape != (self.frames, self.dim):
            raise ShapeError(
                f"PA expects ({self.frames}, {self.dim}), got {cls_stream.shape}")
        sims = frame_relative_repr(cls_stream, protos)
        per_frame, flat = select_prototypes(sims, self.k)
        flat = ad.frozen_choice(flat)     # held fixed under grad_check probes
        selected = protos[flat]                       # (m, d), frame order
        delta = build_toeplitz(self.toe_weights, self.frames, self.m)
        fused = pa_fuse(self.wq(cls_stream), self.wk(selected),
                        self.wv(selected), delta, self.beta, scale=self.scale)
        return self.wo(fused), per_frame

    def merge(self, causal_cls: Tensor, fused: Tensor) -> Tensor:
        return merge(causal_cls, fused, self.lam)

    def parameters(self):
        return nn.merge_params(
            nn.prefixed("wq", self.wq.parameters()),
            nn.prefixed("wk", self.wk.parameters()),
            nn.prefixed("wv", self.wv.parameters()),
            nn.prefixed("wo", self.wo.parameters()),
            {"toe_weights": self.toe_weights, "beta": self.beta, "lam": self.lam})
