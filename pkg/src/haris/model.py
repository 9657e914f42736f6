"""Full model: fusion stack + decoder + mask head over frozen encoder-stub features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from haris.config import Config
from haris.decoder import DecoderParams, decode_batch, mask_head
from haris.fusion import FusionFlags, FusionOutput, FusionStackParams, fusion_forward
from haris.nn import walk
from haris.synthetic import EncodedSample, EncoderStubs
from haris.tensor import Buffer, Parameter, Tensor


@dataclass(eq=False)
class ModelParams:
    fusion: FusionStackParams
    decoder: DecoderParams
    stubs: EncoderStubs

    def parameters(self) -> list[Parameter]:
        return [p for p in walk(self) if isinstance(p, Parameter)]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def frozen(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.trainable]

    def buffers(self) -> list[Buffer]:
        return [b for b in walk(self) if isinstance(b, Buffer)]

    def zero_grad(self) -> None:
        for p in self.trainable():
            p.zero_grad()


def build_model(cfg: Config) -> ModelParams:
    """Initialise every learnable weight from ``cfg.init_seed`` and the stubs from ``cfg.stub_seed``."""
    rng = np.random.default_rng(cfg.init_seed)
    stubs = EncoderStubs.create(cfg.stub_seed, cfg.image_size, cfg.dim, cfg.text_dim)
    fusion = FusionStackParams.create("fusion", cfg.dim, cfg.text_dim, rng, without_hierarchy=cfg.wo_hs)
    n_tokens = (cfg.image_size // 4) ** 2 if cfg.decoder_pos_embed else None
    decoder = DecoderParams.create(
        "decoder", cfg.dim, cfg.decoder_layers, rng, n_tokens=n_tokens,
        text_dim=cfg.text_dim if cfg.r_de else None,
    )
    return ModelParams(fusion, decoder, stubs)


def fusion_flags(cfg: Config) -> FusionFlags:
    # a conventional cross-attention block is the one-round block with both branches kept
    return FusionFlags(
        without_hierarchy=cfg.wo_hs,
        feedback=not (cfg.wo_fb or cfg.r_ca),
        vision_weighted=not cfg.wo_vw,
        language_weighted=not cfg.wo_lw,
        fuse_uses_intermediate=cfg.fuse_uses_intermediate,
        deep_to_shallow=cfg.deep_to_shallow,
    )


@dataclass
class ForwardResult:
    logits: Tensor  # [B, S, S]
    fusion: FusionOutput


def forward(model: ModelParams, batch: list[EncodedSample], cfg: Config, training: bool,
            bn_updates: list | None = None) -> ForwardResult:
    grid = model.stubs.grid
    f_v1 = np.stack([s.f_v1 for s in batch])
    f_v2 = np.stack([s.f_v2 for s in batch])
    f_v3 = np.stack([s.f_v3 for s in batch])
    f_w = [s.f_w for s in batch]
    f_s = [s.f_s for s in batch]
    fused = fusion_forward(f_v1, f_v2, f_v3, f_w, f_s, model.fusion, grid, fusion_flags(cfg),
                           training, bn_updates)
    m_out, v_out = decode_batch(fused, f_s, model.decoder,
                                pointwise=cfg.r_de, query_swap=cfg.decoder_query_swap)
    logits = mask_head(v_out, m_out, model.decoder, grid, training, bn_updates)
    return ForwardResult(logits, fused)


def predict(model: ModelParams, samples: list[EncodedSample], cfg: Config, batch_size: int = 16) -> list[np.ndarray]:
    """Inference-mode logits (running BN statistics), one ``[S, S]`` array per sample."""
    out = []
    for i in range(0, len(samples), batch_size):
        res = forward(model, samples[i:i + batch_size], cfg, training=False)
        out.extend(list(res.logits.data))
    return out
