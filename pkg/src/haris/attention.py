"""Human-like attention block: bidirectional cross-attention plus a sentence-driven feedback pass.

Round one fuses visual and linguistic tokens in both directions.  The
language-aware visual tokens are then modulated by the sentence vector, passed
through an MLP, and the result is added to the visual tokens before the
language-weighted path runs a second time with the same weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from haris.nn import LayerNormParams, LinearParams, MLPParams, layer_norm_p, linear, mlp
from haris.tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    as_tensor,
    matmul,
    softmax_rows,
    transpose,
)


@dataclass(eq=False)
class HABlockParams:
    W_v_i: LinearParams
    W_l_i: LinearParams
    W_v_o: LinearParams
    W_l_o: LinearParams
    ln_v: LayerNormParams
    ln_l: LayerNormParams
    feedback_mlp: MLPParams
    sentence_proj: LinearParams

    @classmethod
    def create(cls, name: str, dim: int, text_dim: int, rng, lang_dim: int | None = None) -> "HABlockParams":
        """``lang_dim`` is the width of the linguistic tokens fed in (defaults to ``text_dim``)."""
        return cls(
            W_v_i=LinearParams.create(f"{name}.W_v_i", dim, dim, rng, bias=False),
            W_l_i=LinearParams.create(f"{name}.W_l_i", lang_dim or text_dim, dim, rng, bias=False),
            W_v_o=LinearParams.create(f"{name}.W_v_o", dim, dim, rng),
            W_l_o=LinearParams.create(f"{name}.W_l_o", dim, dim, rng),
            ln_v=LayerNormParams.create(f"{name}.ln_v", dim),
            ln_l=LayerNormParams.create(f"{name}.ln_l", dim),
            feedback_mlp=MLPParams.create(f"{name}.feedback_mlp", dim, rng),
            sentence_proj=LinearParams.create(f"{name}.sentence_proj", text_dim, dim, rng, bias=False),
        )

    @property
    def dim(self) -> int:
        return self.W_v_i.weight.shape[1]


@dataclass
class HABlockOutput:
    f_l2v: Tensor  # language-aware visual tokens after the second pass, L_v x C
    f_v2l: Tensor  # vision-aware linguistic tokens from round one, L_t x C
    affinity_round1: Tensor
    affinity_round2: Tensor
    modulated: Tensor  # sentence-modulated round-one visual tokens (feedback MLP input)


def cross_affinity(f_v, f_l, p: HABlockParams) -> tuple[Tensor, Tensor, Tensor]:
    f_v, f_l = as_tensor(f_v), as_tensor(f_l)
    if f_v.ndim not in (2, 3) or f_l.ndim != f_v.ndim or f_v.shape[:-2] != f_l.shape[:-2]:
        raise DimensionError(f"cross_affinity: incompatible token sets {f_v.shape} and {f_l.shape}")
    e_v = linear(f_v, p.W_v_i)
    e_l = linear(f_l, p.W_l_i)
    a = softmax_rows(matmul(e_v, transpose(e_l)) * (1.0 / math.sqrt(p.dim)))
    return e_v, e_l, a


def language_weighted(e_v, e_l, a, p: HABlockParams) -> Tensor:
    return linear(layer_norm_p(add(matmul(a, e_l), e_v), p.ln_v), p.W_v_o)


def vision_weighted(e_v, e_l, a, p: HABlockParams) -> Tensor:
    return linear(layer_norm_p(add(matmul(transpose(a), e_v), e_l), p.ln_l), p.W_l_o)


def bidirectional_fuse(e_v, e_l, a, p: HABlockParams) -> tuple[Tensor, Tensor]:
    return language_weighted(e_v, e_l, a, p), vision_weighted(e_v, e_l, a, p)


def sentence_modulate(f_l2v, f_s, p: HABlockParams) -> Tensor:
    """Add the softmax-weighted projected sentence vector to every visual token.

    The score matrix is L_v x 1, so each row's softmax is exactly 1 and the
    modulation reduces to broadcasting the projected sentence onto every row.
    The literal form is kept so gradients follow the same graph.
    """
    f_l2v, f_s = as_tensor(f_l2v), as_tensor(f_s)
    if f_s.ndim != f_l2v.ndim or f_s.shape[-2] != 1:
        raise ContractError(f"sentence vector must be a single row, got shape {f_s.shape}")
    s = linear(f_s, p.sentence_proj)
    w = softmax_rows(matmul(f_l2v, transpose(s)) * (1.0 / math.sqrt(p.dim)))
    return add(matmul(w, s), f_l2v)


def ha_block_forward(
    f_v,
    f_l,
    f_s,
    p: HABlockParams,
    feedback_enabled: bool = True,
    vision_weighted_enabled: bool = True,
    language_weighted_enabled: bool = True,
) -> HABlockOutput:
    """Run one block.  Disabled branches pass their in-projected input tokens through.

    Inputs are ``[L_v, C]``, ``[L_t, C_t]``, ``[1, C_t]`` for one sample, or carry
    a shared leading axis for a group of samples with equal sentence length.
    """
    f_v = as_tensor(f_v)
    e_v, e_l, a1 = cross_affinity(f_v, f_l, p)
    f_v2l = vision_weighted(e_v, e_l, a1, p) if vision_weighted_enabled else e_l
    if not language_weighted_enabled:
        return HABlockOutput(e_v, f_v2l, a1, a1, e_v)

    f_l2v_r1 = language_weighted(e_v, e_l, a1, p)
    modulated = sentence_modulate(f_l2v_r1, f_s, p)
    if not feedback_enabled:
        return HABlockOutput(f_l2v_r1, f_v2l, a1, a1, modulated)

    feedback = mlp(modulated, p.feedback_mlp)
    e_v2 = linear(add(f_v, feedback), p.W_v_i)
    a2 = softmax_rows(matmul(e_v2, transpose(e_l)) * (1.0 / math.sqrt(p.dim)))
    f_l2v = language_weighted(e_v2, e_l, a2, p)
    return HABlockOutput(f_l2v, f_v2l, a1, a2, modulated)
