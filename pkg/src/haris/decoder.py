"""Query-token transformer decoder and the upsampling mask head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from haris.nn import (
    AttentionParams,
    ConvBAParams,
    LayerNormParams,
    LinearParams,
    MLPParams,
    attention,
    conv_bn_act,
    layer_norm_p,
    linear,
    mlp,
    upsample_bilinear_x2,
)
from haris.tensor import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mul_row,
    reshape,
    slice_rows,
    stack,
    transpose,
)


@dataclass(eq=False)
class DecoderLayerParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    ln_cross: LayerNormParams
    cross_attn: AttentionParams
    ln_ffn: LayerNormParams
    ffn: MLPParams

    @classmethod
    def create(cls, name: str, dim: int, rng) -> "DecoderLayerParams":
        return cls(
            LayerNormParams.create(f"{name}.ln_self", dim),
            AttentionParams.create(f"{name}.self_attn", dim, rng),
            LayerNormParams.create(f"{name}.ln_cross", dim),
            AttentionParams.create(f"{name}.cross_attn", dim, rng),
            LayerNormParams.create(f"{name}.ln_ffn", dim),
            MLPParams.create(f"{name}.ffn", dim, rng),
        )


@dataclass(eq=False)
class DecoderParams:
    layers: list[DecoderLayerParams]
    query_token: Parameter
    head: list[ConvBAParams]
    pos_embed: Parameter | None = None  # optional learned positions for the visual rows
    sentence_proj: LinearParams | None = None  # only for the point-wise replacement decoder

    @classmethod
    def create(cls, name: str, dim: int, n_layers: int, rng, n_tokens: int | None = None,
               text_dim: int | None = None) -> "DecoderParams":
        layers = [DecoderLayerParams.create(f"{name}.layers.{i}", dim, rng) for i in range(n_layers)]
        query = Parameter(f"{name}.query_token", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(1, dim)))
        head = [ConvBAParams.create(f"{name}.head.{i}", dim, dim, rng) for i in range(2)]
        pos = None
        if n_tokens is not None:
            pos = Parameter(f"{name}.pos_embed", rng.normal(0.0, 0.02, size=(n_tokens, dim)))
        proj = None
        if text_dim is not None:
            proj = LinearParams.create(f"{name}.sentence_proj", text_dim, dim, rng)
        return cls(layers, query, head, pos, proj)


def decoder_layer(x, memory, p: DecoderLayerParams) -> Tensor:
    """Pre-norm layer: self-attention, cross-attention to ``memory``, FFN, each residual."""
    h = layer_norm_p(x, p.ln_self)
    x = add(x, attention(h, h, p.self_attn)[0])
    x = add(x, attention(layer_norm_p(x, p.ln_cross), memory, p.cross_attn)[0])
    return add(x, mlp(layer_norm_p(x, p.ln_ffn), p.ffn))


def _tile(x, lead: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return stack([x] * lead[0]) if lead else x


def decode(f_l2v, f_v2l, p: DecoderParams, query_swap: bool = False) -> tuple[Tensor, Tensor]:
    """Return the updated query token ``[1, C]`` and visual rows ``[L_v, C]`` for one sample.

    The query sequence is the learnable token followed by the language-aware
    visual tokens; keys and values are the vision-aware linguistic tokens.
    With ``query_swap`` the roles of the two token sets are exchanged and the
    visual rows are returned unchanged.  A shared leading group axis is allowed.
    """
    f_l2v, f_v2l = as_tensor(f_l2v), as_tensor(f_v2l)
    width = p.query_token.shape[1]
    if f_l2v.shape[-1] != width or f_v2l.shape[-1] != width or f_l2v.shape[:-2] != f_v2l.shape[:-2]:
        raise DimensionError(f"decode: token sets {f_l2v.shape} / {f_v2l.shape} vs query width {width}")
    lead = f_l2v.shape[:-2]
    visual = add(f_l2v, _tile(p.pos_embed, lead)) if p.pos_embed is not None else f_l2v
    query = _tile(p.query_token, lead)
    if query_swap:
        seq, memory = concat([query, f_v2l], axis=-2), visual
    else:
        seq, memory = concat([query, visual], axis=-2), f_v2l
    for layer in p.layers:
        seq = decoder_layer(seq, memory, layer)
    m_out = slice_rows(seq, 0, 1)
    if query_swap:
        return m_out, f_l2v
    return m_out, slice_rows(seq, 1, seq.shape[-2])


def pointwise_decode(f_l2v, f_s, p: DecoderParams) -> tuple[Tensor, Tensor]:
    """Decoder replacement: visual tokens scaled by the projected sentence vector."""
    if p.sentence_proj is None:
        raise ContractError("point-wise decoding needs DecoderParams.sentence_proj")
    f_l2v = as_tensor(f_l2v)
    s = linear(f_s, p.sentence_proj)
    return _tile(p.query_token, f_l2v.shape[:-2]), mul_row(f_l2v, s)


def mask_head(v_out, m_out, p: DecoderParams, grid: tuple[int, int], training: bool,
              bn_updates: list | None = None) -> Tensor:
    """Two conv + BN + ReLU + bilinear x2 stages, then a per-pixel dot product with ``m_out``.

    ``v_out`` is ``[L_v, C]`` (with ``m_out`` ``[1, C]``) or a batch
    ``[B, L_v, C]`` (with ``m_out`` ``[B, 1, C]``).  Returns logits of shape
    ``[4H, 4W]`` or ``[B, 4H, 4W]``.
    """
    v_out, m_out = as_tensor(v_out), as_tensor(m_out)
    h, w = grid
    if v_out.shape[-2] != h * w:
        raise ContractError(f"mask_head: {v_out.shape[-2]} visual tokens do not form a {h}x{w} grid")
    single = v_out.ndim == 2
    b = 1 if single else v_out.shape[0]
    c = v_out.shape[-1]
    feat = reshape(v_out, (b, h, w, c))
    for stage in p.head:
        feat = upsample_bilinear_x2(conv_bn_act(feat, stage, training, bn_updates))
    hh, ww = 4 * h, 4 * w
    pix = reshape(feat, (b, hh * ww, c))
    m = reshape(m_out, (b, 1, c))
    logits = matmul(pix, transpose(m))
    return reshape(logits, (hh, ww) if single else (b, hh, ww))


def decode_batch(fused, f_s: list, p: DecoderParams, pointwise: bool = False,
                 query_swap: bool = False) -> tuple[Tensor, Tensor]:
    """Decode a fused batch group by group; returns ``m_out [B, 1, C]`` and ``v_out [B, L_v, C]``."""
    groups = fused.groups
    ms, vs = [], []
    for g, idx in enumerate(groups.members):
        visual = groups.gather(fused.f_l2v_final, g)
        if pointwise:
            m, v = pointwise_decode(visual, stack([f_s[i] for i in idx]), p)
        else:
            m, v = decode(visual, fused.f_v2l_groups[g], p, query_swap)
        ms.append(m)
        vs.append(v)
    return groups.scatter(ms), groups.scatter(vs)
