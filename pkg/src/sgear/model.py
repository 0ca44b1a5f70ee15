"""Full anticipation model: encoder -> [temporal aggregation] -> [prototype
attention + merge] -> causal decoder -> classification head, with all five
training losses.

Ablation toggles route exactly as the study grid:

* baseline        -- linear head, no temporal aggregation, no prototypes;
* sem             -- prototype learning + cosine-attention head;
* tca             -- temporal context aggregation;
* pa              -- prototype attention (needs a prototype store);
* use_language_as_visual -- visual store replaced by the frozen language
  store, semantic loss off.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from . import semantic
from .autodiff import Tensor
from .decoder import CausalDecoder, DecoderConfig
from .encoder import ClipFeatures, EncoderConfig, build_encoder
from .errors import ConfigError, ShapeError
from .pa import PaBlock
from .semantic import (CosineHead, LanguageTargets, LinearHead, LossWeights,
                       ProtoStore)
from .tca import TcaStack


@dataclass
class Toggles:
    tca: bool = True
    pa: bool = True
    sem: bool = True
    use_language_as_visual: bool = False


TABLE3_SETTINGS = {
    "1": Toggles(tca=False, pa=False, sem=False),
    "2": Toggles(tca=False, pa=False, sem=True),
    "3": Toggles(tca=True, pa=False, sem=False),
    "4": Toggles(tca=False, pa=True, sem=True),
    "5": Toggles(tca=True, pa=True, sem=False, use_language_as_visual=True),
    "full": Toggles(),
}


@dataclass
class ModelConfig:
    num_classes: int
    frames: int
    d: int = 64
    encoder: EncoderConfig = None
    n_tca: int = 2
    tca_heads: int = 2
    pa_k: int = 1
    pa_scale: str = "d"
    decoder: DecoderConfig = None
    toggles: Toggles = field(default_factory=Toggles)
    subset_ratio: float = 1.0
    subset_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = EncoderConfig(mode="passthrough", d=self.d)
        if self.decoder is None:
            self.decoder = DecoderConfig(d=self.d, max_len=max(self.frames, 1))
        if self.encoder.d != self.d or self.decoder.d != self.d:
            raise ConfigError("encoder/decoder dimensionality must match d")
        if self.toggles.tca and self.encoder.mode == "adapter":
            raise ConfigError(
                "temporal aggregation needs multi-token features; disable the "
                "tca toggle in adapter mode")


class SgearModel:
    def __init__(self, config: ModelConfig, visual_store: ProtoStore = None,
                 language_store: ProtoStore = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        toggles = config.toggles

        needs_protos = toggles.pa or toggles.sem or toggles.use_language_as_visual
        if toggles.use_language_as_visual:
            if language_store is None:
                raise ConfigError("use_language_as_visual needs a language store")
            visual_store = ProtoStore(
                kind="visual", tensor=Tensor(language_store.tensor.data.copy()),
                class_names=language_store.class_names, frozen=True)
        if needs_protos and visual_store is None:
            visual_store = semantic.init_visual_prototypes(
                "random", config.num_classes, config.d, seed=config.seed)
        if toggles.sem and language_store is None:
            raise ConfigError("semantic guidance needs a language store")

        self.visual_store = visual_store
        self.language_store = language_store
        self.language_targets = (LanguageTargets(language_store)
                                 if language_store is not None else None)
        self.subset = semantic.choose_subset(
            config.num_classes, config.subset_ratio, config.subset_seed)

        self.encoder = build_encoder(config.encoder, rng)
        self.tca = (TcaStack(config.d, config.tca_heads, config.frames, rng,
                             n_blocks=config.n_tca)
                    if toggles.tca else None)
        self.pa = (PaBlock(config.d, config.frames, rng, k=config.pa_k,
                           scale=config.pa_scale)
                   if toggles.pa else None)
        self.decoder = CausalDecoder(config.decoder, rng)
        self.use_cosine_head = needs_protos
        self.head = (CosineHead(config.d, config.num_classes, rng)
                     if self.use_cosine_head
                     else LinearHead(config.d, config.num_classes, rng))

    # -- forward pieces -----------------------------------------------------

    def _subset_or_none(self):
        return None if len(self.subset) == self.config.num_classes else self.subset

    def encode_merge(self, inputs):
        """Run encoder, temporal aggregation and prototype attention;
        returns the (T, d) merged stream."""
        feats = inputs if isinstance(inputs, ClipFeatures) else self.encoder(inputs)
        if feats.shape[0] != self.config.frames:
            raise ShapeError(f"model sized for T={self.config.frames}, got "
                             f"T={feats.shape[0]}")
        cls_causal = (self.tca(feats.tokens)[:, 0, :] if self.tca is not None
                      else feats.cls_view)
        if self.pa is not None:
            fused, _ = self.pa(feats.cls_view, self.visual_store.tensor)
            return self.pa.merge(cls_causal, fused)
        return cls_causal

    def step_logits(self, z: Tensor):
        """Route one decoder embedding through the classification head."""
        sub = self._subset_or_none()
        if self.use_cosine_head:
            z_hat = self.head.cosine_attention(z, self.visual_store.tensor,
                                               subset=sub)
            return self.head.classify(z_hat)
        return self.head.classify(z)

    def step_probs(self, z: Tensor) -> np.ndarray:
        """K-vector of class probabilities; with a prototype subset active the
        softmax runs over the subset's logits only."""
        logits, probs = self.step_logits(z)
        sub = self._subset_or_none()
        if sub is None:
            return probs.data
        out = np.zeros(self.config.num_classes)
        out[sub] = ad.softmax(logits[sub], axis=-1).data
        return out

    # -- training forward ------------------------------------------------------

    def forward(self, inputs, target, past_labels=None):
        """Full forward pass with all loss parts.

        `past_labels`: optional length-T list, entry t the class of frame t or
        None; step t < T-1 predicts past_labels[t+1].
        """
        t_len = self.config.frames
        sub = self._subset_or_none()
        merged = self.encode_merge(inputs)
        future = self.decoder.decode(merged)

        logits_final, probs_final = self.step_logits(future[t_len - 1])
        parts = {"cls": semantic.loss_cls(logits_final, target)}

        # anticipation steps with a known label: final one plus labeled past
        step_targets = [(t_len - 1, target)]
        past_terms = []
        for t in range(t_len - 1):
            y_next = past_labels[t + 1] if past_labels else None
            if y_next is not None:
                step_targets.append((t, y_next))
                logits_t, _ = self.step_logits(future[t])
                past_terms.append(semantic.loss_cls(logits_t, y_next))
        parts["past"] = (sum(past_terms[1:], past_terms[0]) if past_terms
                         else Tensor(np.asarray(0.0)))

        # sem needs language targets; reg applies whenever prototypes are in
        # play (including the frozen language-as-visual ablation)
        sem_terms, reg_terms = [], []
        for t, y in step_targets:
            if self.config.toggles.sem:
                row = self.language_targets.row(y, subset=sub)
                sem_terms.append(semantic.loss_sem(
                    future[t], self.visual_store.tensor, row, subset=sub))
            if self.use_cosine_head:
                reg_terms.append(semantic.loss_reg(
                    future[t], self.visual_store.tensor, y))
        parts["sem"] = (sum(sem_terms[1:], sem_terms[0]) * (1.0 / len(sem_terms))
                        if sem_terms else Tensor(np.asarray(0.0)))
        parts["reg"] = (sum(reg_terms[1:], reg_terms[0]) * (1.0 / len(reg_terms))
                        if reg_terms else Tensor(np.asarray(0.0)))

        parts["feat"], feat_empty = semantic.loss_feat(future, merged)
        return {
            "merged": merged,
            "future": future,
            "logits": logits_final,
            "probs": probs_final,
            "parts": parts,
            "past_empty": not past_terms,
            "feat_empty": feat_empty,
        }

    def total_loss(self, inputs, target, weights: LossWeights, past_labels=None):
        out = self.forward(inputs, target, past_labels=past_labels)
        out["loss"] = semantic.total_loss(out["parts"], weights)
        return out

    # -- inference ----------------------------------------------------------------

    def predict(self, inputs, n_steps=0) -> np.ndarray:
        """Class probabilities for one clip; n_steps > 0 rolls the decoder
        forward autoregressively before classifying."""
        merged = self.encode_merge(inputs)
        if n_steps == 0:
            future = self.decoder.decode(merged)
        else:
            future = self.decoder.rollout(merged, n_steps)
        return self.step_probs(future[future.shape[0] - 1])

    # -- registry ------------------------------------------------------------------

    def parameters(self):
        params = nn.prefixed("encoder", self.encoder.parameters())
        if self.tca is not None:
            params = nn.merge_params(params,
                                     nn.prefixed("tca", self.tca.parameters()))
        if self.pa is not None:
            params = nn.merge_params(params,
                                     nn.prefixed("pa", self.pa.parameters()))
        params = nn.merge_params(
            params,
            nn.prefixed("decoder", self.decoder.parameters()),
            nn.prefixed("head", self.head.parameters()))
        if (self.visual_store is not None
                and self.visual_store.tensor.requires_grad):
            params = nn.merge_params(
                params, {"protos.visual": self.visual_store.tensor})
        return params

    def effective_weights(self, weights: LossWeights) -> LossWeights:
        """Zero out the semantic weights when the sem toggle is off, so loss
        reports make the ablation routing explicit."""
        if self.config.toggles.sem:
            return weights
        return LossWeights(sem=0.0, reg=weights.reg, cls=weights.cls,
                           past=weights.past, feat=weights.feat)


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(obj: dict) -> ModelConfig:
    obj = dict(obj)
    obj["encoder"] = EncoderConfig(**obj["encoder"])
    obj["decoder"] = DecoderConfig(**obj["decoder"])
    obj["toggles"] = Toggles(**obj["toggles"])
    return ModelConfig(**obj)
