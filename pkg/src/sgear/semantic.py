"""Prototype stores, the shared similarity space, the cosine-attention head,
the training losses (with their exact gradient-blocking semantics) and
prototype-geometry analysis.

Gradient-blocking contracts, enforced here and probed by tests:

* semantic loss: the embedding is detached, gradient reaches the visual
  prototypes only;
* regularization loss: the matched prototype is detached, gradient reaches
  the embedding only;
* future-feature loss: the target features are detached, gradient reaches
  the predictions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataio
from . import nn
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


# -- prototype stores ----------------------------------------------------------

@dataclass
class ProtoStore:
    kind: str                  # "visual" | "language"
    tensor: Tensor             # (K, d)
    class_names: list = None
    frozen: bool = False
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("visual", "language"):
            raise ConfigError(f"unknown prototype kind '{self.kind}'")
        if self.kind == "language":
            self.frozen = True
        self.tensor.requires_grad = self.kind == "visual" and not self.frozen

    @property
    def num_classes(self):
        return self.tensor.shape[0]

    @property
    def d(self):
        return self.tensor.shape[1]

    def freeze(self):
        self.frozen = True
        self.tensor.requires_grad = False

    def save(self, path):
        dataio.write_prototype_file(path, self.tensor.data)

    @classmethod
    def load(cls, path, kind, class_names=None, frozen=False):
        return cls(kind=kind, tensor=Tensor(read_protos(path)),
                   class_names=class_names, frozen=frozen)


def read_protos(path):
    return dataio.read_prototype_file(path).astype(np.float64)


def init_visual_prototypes(mode, num_classes, d, seed,
                           embeddings=None, labels=None, class_names=None):
    """Build the visual prototype store.

    * ``random`` -- N(0, 1/sqrt(d)) rows.
    * ``class-mean`` -- average of the supplied per-sample embeddings by class
      (raw encoder features).
    * ``recognition-mean`` -- same averaging, but the caller supplies
      embeddings extracted from the architecture pre-trained for per-clip
      recognition (see trainer.recognition_embeddings).

    Classes with zero samples in the mean modes fall back to random rows and
    are listed in the store's warnings.
    """
    rng = np.random.default_rng(seed)
    random_rows = rng.normal(0.0, 1.0 / math.sqrt(d), (num_classes, d))
    warnings = []
    if mode == "random":
        rows = random_rows
    elif mode in ("class-mean", "recognition-mean"):
        if embeddings is None or labels is None:
            raise ConfigError(f"mode '{mode}' needs embeddings and labels")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels)
        rows = random_rows.copy()
        for k in range(num_classes):
            mask = labels == k
            if mask.any():
                rows[k] = embeddings[mask].mean(axis=0)
            else:
                warnings.append(f"class {k}: no samples, random initialization")
    else:
        raise ConfigError(f"unknown prototype init mode '{mode}'")
    return ProtoStore(kind="visual", tensor=Tensor(rows, requires_grad=True),
                      class_names=class_names, warnings=warnings)


# -- relative representations ---------------------------------------------------

def choose_subset(num_classes, ratio, seed):
    """Fixed seeded prototype subset of size ceil(ratio*K), drawn once."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"subset ratio must be in (0, 1], got {ratio}")
    size = math.ceil(ratio * num_classes)
    if size == num_classes:
        return np.arange(num_classes)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_classes, size=size, replace=False))


def relative_repr(x: Tensor, protos: Tensor, subset=None) -> Tensor:
    """Cosine similarities of `x` against (a subset of) the prototype rows,
    differentiable through both arguments."""
    if x.shape != (protos.shape[1],):
        raise ShapeError(f"embedding shape {x.shape} does not match prototype "
                         f"dim {protos.shape[1]}")
    p = protos if subset is None else protos[np.asarray(subset, dtype=np.intp)]
    xn = ((x * x).sum()) ** 0.5
    pn = ((p * p).sum(axis=1)) ** 0.5
    num = ad.matmul(p, x.reshape(-1, 1)).reshape(-1)
    return num / (xn * pn + 1e-8)


class LanguageTargets:
    """Precomputed rows of the language-prototype self-similarity matrix.

    The language encoding of label y is the prototype itself, so the target
    relative representation is row y of cos(rho_l, rho_l).
    """

    def __init__(self, store: ProtoStore):
        p = store.tensor.data
        norms = np.linalg.norm(p, axis=1, keepdims=True)
        self.matrix = (p @ p.T) / (norms * norms.T + 1e-8)

    def row(self, y, subset=None) -> Tensor:
        if not 0 <= y < self.matrix.shape[0]:
            raise IndexError(f"class {y} out of range")
        row = self.matrix[y]
        if subset is not None:
            row = row[np.asarray(subset, dtype=np.intp)]
        return Tensor(row)


# -- classification head -----------------------------------------------------------

class CosineHead:
    """Mix the decoder embedding with a similarity-weighted prototype
    aggregate, then project to class logits."""

    def __init__(self, d, num_classes, rng):
        self.alpha = Tensor(np.asarray(0.0), requires_grad=True)
        self.w_cls = nn.Linear(d, num_classes, rng)

    def aggregate(self, z: Tensor, protos: Tensor, subset=None) -> Tensor:
        """softmax(r^z) . P over the subset; r^z keeps gradient to z here."""
        r = relative_repr(z, protos, subset=subset)
        p = protos if subset is None else protos[np.asarray(subset, dtype=np.intp)]
        weights = ad.softmax(r, axis=-1)
        return ad.matmul(weights.reshape(1, -1), p).reshape(-1)

    def cosine_attention(self, z: Tensor, protos: Tensor, subset=None) -> Tensor:
        gate = ad.sigmoid(self.alpha)
        return gate * z + (1.0 - gate) * self.aggregate(z, protos, subset=subset)

    def classify(self, z_hat: Tensor):
        logits = self.w_cls(z_hat)
        return logits, ad.softmax(logits, axis=-1)

    def parameters(self):
        return nn.merge_params({"alpha": self.alpha},
                               nn.prefixed("w_cls", self.w_cls.parameters()))


class LinearHead:
    """Plain linear classifier (the no-semantics baseline head)."""

    def __init__(self, d, num_classes, rng):
        self.w_cls = nn.Linear(d, num_classes, rng)

    def classify(self, z: Tensor):
        logits = self.w_cls(z)
        return logits, ad.softmax(logits, axis=-1)

    def parameters(self):
        return nn.prefixed("w_cls", self.w_cls.parameters())


# -- losses ----------------------------------------------------------------------

def loss_sem(z: Tensor, protos: Tensor, target_row: Tensor, subset=None) -> Tensor:
    """Mean |r^z - r^enc(y)| with z detached: gradient reaches protos only."""
    r_z = relative_repr(z.detach(), protos, subset=subset)
    if r_z.shape != target_row.shape:
        raise ShapeError(f"relative reprs disagree: {r_z.shape} vs "
                         f"{target_row.shape}")
    return ad.l1_mean(r_z, target_row.detach())


def loss_reg(z: Tensor, protos: Tensor, y: int) -> Tensor:
    """Mean squared pull of z toward its own (detached) class prototype."""
    if not 0 <= y < protos.shape[0]:
        raise IndexError(f"class {y} out of range")
    return ad.mse(z, protos[y].detach())


def loss_cls(logits: Tensor, y: int) -> Tensor:
    return ad.cross_entropy(logits, y)


def loss_feat(future: Tensor, merged: Tensor):
    """Sum over t of mse(z_t, detach(merged_{t+1})); 0 with a flag for T=1."""
    t_len = future.shape[0]
    if merged.shape != future.shape:
        raise ShapeError(f"future {future.shape} vs merged {merged.shape}")
    if t_len < 2:
        return Tensor(np.asarray(0.0)), True
    total = ad.mse(future[0], merged[1].detach())
    for t in range(1, t_len - 1):
        total = total + ad.mse(future[t], merged[t + 1].detach())
    return total, False


@dataclass(frozen=True)
class LossWeights:
    sem: float
    reg: float
    cls: float
    past: float
    feat: float

    def as_dict(self):
        return {"sem": self.sem, "reg": self.reg, "cls": self.cls,
                "past": self.past, "feat": self.feat}


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """Weighted sum of the five loss parts; every part must be present."""
    wd = weights.as_dict()
    missing = set(wd) - set(parts)
    if missing:
        raise ConfigError(f"missing loss parts: {sorted(missing)}")
    total = Tensor(np.asarray(0.0))
    for name, w in wd.items():
        total = total + w * parts[name]
    return total


# -- geometry analysis -----------------------------------------------------------

def similarity_matrix(store: ProtoStore) -> np.ndarray:
    p = store.tensor.data
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    return (p @ p.T) / (norms * norms.T + 1e-8)


def alignment_score(store_a: ProtoStore, store_b: ProtoStore) -> float:
    """Pearson correlation of the two stores' off-diagonal cosine entries."""
    if store_a.num_classes != store_b.num_classes:
        raise ShapeError(f"stores disagree on K: {store_a.num_classes} vs "
                         f"{store_b.num_classes}")
    k = store_a.num_classes
    mask = ~np.eye(k, dtype=bool)
    a = similarity_matrix(store_a)[mask]
    b = similarity_matrix(store_b)[mask]
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def nearest_actions(ref_class, store: ProtoStore, n=5):
    """The n most cosine-similar classes to `ref_class`, excluding itself."""
    sims = similarity_matrix(store)[ref_class].copy()
    sims[ref_class] = -np.inf
    order = np.argsort(-sims, kind="stable")[:n]
    names = store.class_names or [str(i) for i in range(store.num_classes)]
    return [(int(i), names[int(i)], float(sims[int(i)])) for i in order]
