"""The meta-learner: frozen backbone + correspondence + guidance + decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig, build_backbone
from .correspondence import correlation_tensor, fuse_correlation
from .decoder import ASPP, Classifier, ConvBlock, DecoderInput, aspp, assemble_decoder_input, classify, conv_block
from .guidance import AttentionNet, GuidanceBundle, attention_map, attention_vector, merge_support_features, prior_mask, prototype
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    alpha: int = 64
    merged_channels: int = 64
    decoder_channels: int = 128
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    multi_similarity: bool = True
    attention: bool = True
    prototype: bool = True
    prior_mask: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))
        for key in ("alpha", "merged_channels", "decoder_channels"):
            if getattr(self, key) < 1:
                raise ModelConfigError(f"{key} must be >= 1")
        if not self.aspp_rates or min(self.aspp_rates) < 1:
            raise ModelConfigError(f"aspp_rates must be positive, got {self.aspp_rates}")
        if self.decoder_channels % (len(self.aspp_rates) + 1):
            raise ModelConfigError(
                f"decoder_channels={self.decoder_channels} must be divisible by "
                f"{len(self.aspp_rates) + 1} ASPP branches"
            )

    @property
    def guidance_enabled(self) -> bool:
        return self.multi_similarity or self.attention or self.prototype or self.prior_mask


@dataclass
class ForwardResult:
    probs: Tensor  # (N, 2, H, W)
    correlation: Optional[np.ndarray]  # (N, L, h, w), averaged over shots
    shot_correlation: list  # per shot (N, L, h, w)
    guidance: GuidanceBundle  # averaged over shots
    decoder_input: DecoderInput
    fused: Optional[Tensor]


class MetaLearner(Module):
    def __init__(self, backbone: Backbone, cfg: ModelConfig = ModelConfig()):
        bcfg = backbone.cfg
        if len(bcfg.blocks) < 2:
            raise ModelConfigError("the meta-learner needs at least two backbone blocks")
        self.cfg = cfg
        self.backbone = backbone
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        c2, c3 = bcfg.blocks[0][0], bcfg.blocks[1][0]
        cm = cfg.merged_channels
        self.fuse = Conv2d(bcfg.layer_count, cfg.alpha, 1, rng, padding=0) if cfg.multi_similarity else None
        self.merge = Conv2d(c2 + c3, cm, 1, rng, padding=0)
        self.attention = AttentionNet(cm, rng) if cfg.attention else None
        self.aspp = ASPP(self.decoder_in_channels, cfg.decoder_channels, cfg.aspp_rates, rng)
        self.block = ConvBlock(cfg.decoder_channels, rng)
        self.classifier = Classifier(cfg.decoder_channels, rng)

    @property
    def decoder_in_channels(self) -> int:
        c = self.cfg
        return (
            (c.alpha if c.multi_similarity else 0)
            + (c.merged_channels if c.attention else 0)
            + (1 if c.prior_mask else 0)
            + (c.merged_channels if c.prototype else 0)
            + c.merged_channels
        )

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def head_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def forward(self, query_images, support_images, support_masks) -> ForwardResult:
        """Batched K-shot forward pass.

        Shapes: query ``(N,3,H,W)``, supports ``(N,K,3,H,W)``, masks ``(N,K,H,W)``;
        the unbatched forms ``(3,H,W)``, ``(K,3,H,W)``, ``(K,H,W)`` are accepted too.
        With K > 1 the per-shot similarity maps, ``A_s``, ``V_s`` and ``M_pr`` are
        averaged before the decoder runs once.
        """
        q = np.asarray(query_images)
        s = np.asarray(support_images)
        m = np.asarray(support_masks)
        if q.ndim == 3:
            q, s, m = q[None], s[None], m[None]
        if q.ndim != 4 or s.ndim != 5 or m.ndim != 4:
            raise ShapeError(f"forward: bad shapes query {q.shape}, supports {s.shape}, masks {m.shape}")
        n, k = s.shape[:2]
        if q.shape[0] != n or m.shape[:2] != (n, k) or s.shape[2:] != q.shape[1:] or m.shape[2:] != q.shape[2:]:
            raise ShapeError(f"forward: inconsistent shapes query {q.shape}, supports {s.shape}, masks {m.shape}")
        cfg = self.cfg
        pyr_q = self.backbone.extract_features(q)
        F_q23 = merge_support_features(pyr_q.block_output(0), pyr_q.block_output(1), self.merge)

        shot_cs, A_list, V_list, P_list = [], [], [], []
        F_s23_list, V_a_list = [], []
        for j in range(k):
            pyr_s = self.backbone.extract_features(s[:, j])
            mask_j = m[:, j]
            if cfg.multi_similarity:
                shot_cs.append(correlation_tensor(pyr_q, pyr_s, mask_j))
            need_merged = cfg.attention or cfg.prototype
            if need_merged:
                F_s23 = merge_support_features(pyr_s.block_output(0), pyr_s.block_output(1), self.merge)
                F_s23_list.append(F_s23)
            if cfg.attention:
                V_a = attention_vector(F_s23, mask_j, self.attention)
                V_a_list.append(V_a)
                A_list.append(attention_map(F_s23, V_a))
            if cfg.prototype:
                V_list.append(prototype(F_s23, mask_j))
            if cfg.prior_mask:
                P_list.append(prior_mask(pyr_q.block_output(-1), pyr_s.block_output(-1), mask_j))

        cs = _mean_array(shot_cs) if shot_cs else None
        fused = fuse_correlation(cs, self.fuse) if cs is not None else None
        A_s = ops.mean_of(A_list) if A_list else None
        V_s = ops.mean_of(V_list) if V_list else None
        M_pr = _mean_array(P_list) if P_list else None
        bundle = GuidanceBundle(
            F_s23=F_s23_list[0] if len(F_s23_list) == 1 else None,
            V_a=V_a_list[0] if len(V_a_list) == 1 else None,
            A_s=A_s,
            V_s=V_s,
            M_pr=M_pr,
        )
        dec_in = assemble_decoder_input(fused, A_s, M_pr, V_s, F_q23)
        h = conv_block(aspp(dec_in, self.aspp), self.block)
        probs = classify(h, self.classifier, q.shape[-2:])
        return ForwardResult(probs, cs, shot_cs, bundle, dec_in, fused)

    def predict_proba(self, query_image, support_images, support_masks) -> np.ndarray:
        """Foreground/background probabilities ``(2, H, W)`` for a single episode."""
        return self.forward(query_image, support_images, support_masks).probs.data[0]


def _mean_array(parts: list) -> np.ndarray:
    if len(parts) == 1:
        return parts[0]
    total = parts[0].astype(np.float64)
    for p in parts[1:]:
        total = total + p
    return (total / len(parts)).astype(parts[0].dtype)


def build_model(
    backbone_cfg: Optional[BackboneConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    backbone: Optional[Backbone] = None,
) -> MetaLearner:
    bb = backbone if backbone is not None else build_backbone(backbone_cfg)
    model = MetaLearner(bb, model_cfg or ModelConfig())
    for name, p in model.named_parameters():
        p.name = name
    return model


def parameter_checksum(model: Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
