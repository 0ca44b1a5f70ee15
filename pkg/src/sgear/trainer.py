"""Optimization loop: schedules, SGD-with-momentum and AdamW, dataset-named
hyperparameter presets, deterministic training, and versioned checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .autodiff import Tensor
from .errors import ConfigError, FormatError, NumericError
from .model import ModelConfig, SgearModel, Toggles, config_from_dict, config_to_dict
from .semantic import LossWeights, ProtoStore

CHECKPOINT_MAGIC = b"SGCK"


# -- schedule -----------------------------------------------------------------

def lr_at(step, base_lr, warmup_steps, total_steps):
    """Linear warmup 0 -> base_lr, then cosine decay to 0 at the final step."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    progress = min(progress, 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# -- optimizers ------------------------------------------------------------------

class Sgd:
    """SGD with momentum; weight decay is coupled (added to the gradient)."""

    def __init__(self, params: dict, momentum=0.9, weight_decay=0.0):
        self.params = dict(sorted(params.items()))
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def state_arrays(self):
        return {f"velocity.{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for k in self.velocity:
            self.velocity[k][...] = arrays[f"velocity.{k}"]


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict, betas=(0.9, 0.999), weight_decay=0.0,
                 eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        out = {"t": np.asarray(float(self.t))}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        for k in self.m:
            self.m[k][...] = arrays[f"m.{k}"]
            self.v[k][...] = arrays[f"v.{k}"]


def build_optimizer(name, params, config):
    if name == "sgd":
        return Sgd(params, momentum=config.momentum,
                   weight_decay=config.weight_decay)
    if name == "adamw":
        return AdamW(params, betas=config.betas,
                     weight_decay=config.weight_decay)
    raise ConfigError(f"unknown optimizer '{name}'")


# -- configuration -----------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 3
    epochs: int = 10
    warmup_epochs: int = 0
    loss_weights: LossWeights = field(
        default_factory=lambda: LossWeights(1.0, 1.0, 1.0, 1.0, 1.0))
    toggles: Toggles = field(default_factory=Toggles)
    grad_clip: float = None
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs")


_PRESETS = {
    # optimizer, lr, momentum, wd, batch, epochs, warmup, loss weights
    "ek100": ("sgd", 1e-4, 0.9, 1e-5, 3, 50, 20,
              LossWeights(4.0, 1.0, 1.0, 1.0, 1.0)),
    "ek55": ("sgd", 1e-4, 0.9, 1e-5, 3, 35, 10,
             LossWeights(2.0, 1.0, 1.0, 1.0, 1.0)),
    "eg": ("sgd", 4.75e-4, 0.9, 1e-5, 3, 10, 5,
           LossWeights(2.0, 1.0, 1.0, 0.1, 1.0)),
    "50s": ("adamw", 5e-6, 0.0, 1e-4, 2, 100, 20,
            LossWeights(1.0, 0.1, 1.0, 0.1, 1.0)),
    # small synthetic-task defaults
    "desk": ("adamw", 3e-3, 0.0, 0.0, 4, 30, 2,
             LossWeights(1.0, 0.5, 1.0, 1.0, 0.5)),
}


def make_preset(name) -> TrainConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset '{name}'; choose from "
                          f"{sorted(_PRESETS)}")
    opt, lr, momentum, wd, batch, epochs, warmup, weights = _PRESETS[name]
    return TrainConfig(optimizer=opt, lr=lr, momentum=momentum,
                       weight_decay=wd, batch_size=batch, epochs=epochs,
                       warmup_epochs=warmup, loss_weights=weights, preset=name)


# -- dataset loading --------------------------------------------------------------

def load_dataset(manifest_path):
    """Materialize all clips: list of (features, target, past_labels).

    past_labels[t] is the class of frame t when a label time falls on that
    frame (within half a frame period), else None.
    """
    manifest = dataio.read_manifest(manifest_path)
    t_len = manifest.frames_per_clip
    clips = []
    for rec in manifest.records:
        feats = dataio.load_clip_features(manifest_path, rec).astype(np.float64)
        times = dataio.sample_observation_window(
            rec.start_time, manifest.tau_o, manifest.tau_a, manifest.fps)
        past_labels = [None] * t_len
        for label_time, cls in rec.labels:
            for i, ft in enumerate(times):
                if abs(ft - label_time) <= 0.5 / manifest.fps:
                    past_labels[i] = cls
                    break
        clips.append((feats, rec.target_class, past_labels))
    return manifest, clips


# -- training loop ----------------------------------------------------------------

def train_step(batch, model: SgearModel, weights: LossWeights, optimizer, lr):
    """One optimization step over a batch of clips (mean of per-clip losses).

    Returns the per-part mean loss record as floats.
    """
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    scale = 1.0 / len(batch)
    record = {}
    total = None
    for feats, target, past_labels in batch:
        out = model.total_loss(feats, target, weights, past_labels=past_labels)
        for name, part in out["parts"].items():
            value = float(part.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite '{name}' loss part")
            record[name] = record.get(name, 0.0) + value * scale
        total = out["loss"] if total is None else total + out["loss"]
    total = total * scale
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise NumericError("non-finite total loss")
    total.backward()
    if optimizer is not None:
        _clip(params, model)
        optimizer.step(lr)
    record["total"] = loss_value
    return record


def _clip(params, model):
    clip = getattr(model, "_grad_clip", None)
    if not clip:
        return
    norm = np.sqrt(sum(float((p.grad ** 2).sum())
                       for p in params.values() if p.grad is not None))
    if norm > clip:
        s = clip / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= s


def fit(model: SgearModel, clips, config: TrainConfig, log_every=0):
    """Deterministic training over the in-memory clip list.

    Returns the history: one loss record per step.
    """
    weights = model.effective_weights(config.loss_weights)
    model._grad_clip = config.grad_clip
    optimizer = build_optimizer(config.optimizer, model.parameters(), config)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, int(np.ceil(len(clips) / config.batch_size)))
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    history = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(clips))
        for start in range(0, len(clips), config.batch_size):
            batch = [clips[i] for i in order[start:start + config.batch_size]]
            lr = lr_at(step, config.lr, warmup_steps, total_steps)
            record = train_step(batch, model, weights, optimizer, lr)
            record["lr"] = lr
            record["step"] = step
            history.append(record)
            if log_every and step % log_every == 0:
                parts = " ".join(f"{k}={v:.4f}" for k, v in record.items()
                                 if k not in ("step",))
                print(f"step {step}: {parts}")
            step += 1
    return history, optimizer


# -- recognition pre-training for prototype initialization ------------------------------

def recognition_embeddings(model_config: ModelConfig, clips, train_config,
                           language_store=None):
    """Train the architecture with prototype attention omitted for per-clip
    classification, then extract each clip's final decoder embedding."""
    cfg_dict = config_to_dict(model_config)
    cfg_dict["toggles"] = {"tca": model_config.toggles.tca, "pa": False,
                           "sem": False, "use_language_as_visual": False}
    recog_config = config_from_dict(cfg_dict)
    recog_model = SgearModel(recog_config, language_store=language_store)
    fit(recog_model, clips, train_config)
    embeddings, labels = [], []
    for feats, target, _ in clips:
        merged = recog_model.encode_merge(feats)
        future = recog_model.decoder.decode(merged)
        embeddings.append(future.data[-1])
        labels.append(target)
    return np.asarray(embeddings), np.asarray(labels)


# -- checkpoints ---------------------------------------------------------------------

def _array_entries(arrays):
    return [{"name": k, "shape": list(v.shape), "dtype": v.dtype.str}
            for k, v in arrays.items()]


def save_checkpoint(path, model: SgearModel, optimizer=None, step=0):
    """Versioned container: JSON header plus named little-endian blobs."""
    arrays = {}
    for name, p in sorted(model.parameters().items()):
        arrays[f"param.{name}"] = p.data
    if model.visual_store is not None:
        arrays["store.visual"] = model.visual_store.tensor.data
    if model.language_store is not None:
        arrays["store.language"] = model.language_store.tensor.data
    if optimizer is not None:
        for name, arr in sorted(optimizer.state_arrays().items()):
            arrays[f"opt.{name}"] = np.asarray(arr)
    arrays = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    header = {
        "version": 1,
        "step": step,
        "config": config_to_dict(model.config),
        "visual_frozen": (model.visual_store.frozen
                          if model.visual_store is not None else None),
        "arrays": _array_entries(arrays),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", 1, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(v.tobytes())


def load_checkpoint(path):
    """Rebuild the model (and raw optimizer arrays) from a checkpoint.

    Returns (model, opt_arrays, step).
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise FormatError(f"unsupported checkpoint version {version}",
                              offset=4)
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(
                entry["shape"])

    config = config_from_dict(header["config"])
    language_store = None
    if "store.language" in arrays:
        language_store = ProtoStore(
            kind="language", tensor=Tensor(arrays["store.language"].copy()))
    visual_store = None
    if "store.visual" in arrays:
        visual_store = ProtoStore(
            kind="visual", tensor=Tensor(arrays["store.visual"].copy(),
                                         requires_grad=True),
            frozen=bool(header["visual_frozen"]))
    model = SgearModel(config, visual_store=visual_store,
                       language_store=language_store)
    params = model.parameters()
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]].data[...] = arr
    opt_arrays = {k[len("opt."):]: v for k, v in arrays.items()
                  if k.startswith("opt.")}
    return model, opt_arrays, header["step"]
