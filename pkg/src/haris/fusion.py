"""Three human-like attention blocks chained over the encoder levels, joined by conv fuse blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from haris.attention import HABlockOutput, HABlockParams, ha_block_forward
from haris.nn import ConvBAParams, conv_bn_act
from haris.tensor import DimensionError, Tensor, as_tensor, concat, index, reshape, stack, take


@dataclass(eq=False)
class FusionStackParams:
    blocks: list[HABlockParams]
    fuses: list[ConvBAParams]

    @classmethod
    def create(cls, name: str, dim: int, text_dim: int, rng,
               without_hierarchy: bool = False) -> "FusionStackParams":
        # later blocks read the previous block's C-wide linguistic tokens, except when
        # the hierarchy is removed and the last block reads the word features directly
        lang = [text_dim, dim, text_dim if without_hierarchy else dim]
        blocks = [
            HABlockParams.create(f"{name}.blocks.{i}", dim, text_dim, rng, lang_dim=lang[i])
            for i in range(3)
        ]
        fuses = [ConvBAParams.create(f"{name}.fuses.{i}", 2 * dim, dim, rng) for i in range(2)]
        return cls(blocks, fuses)


@dataclass
class FusionFlags:
    without_hierarchy: bool = False  # only the deepest level through the last block
    feedback: bool = True
    vision_weighted: bool = True
    language_weighted: bool = True
    fuse_uses_intermediate: bool = False
    deep_to_shallow: bool = False


@dataclass
class LengthGroups:
    """Samples bucketed by sentence length so each bucket runs as one batched block."""

    members: list[np.ndarray]  # sample indices per group, ascending
    order: np.ndarray  # concatenated members
    inverse: np.ndarray  # position of each sample inside ``order``

    @classmethod
    def from_lengths(cls, lengths) -> "LengthGroups":
        lengths = np.asarray(lengths)
        members = [np.flatnonzero(lengths == n) for n in np.unique(lengths)]
        order = np.concatenate(members)
        return cls(members, order, np.argsort(order, kind="stable"))

    def locate(self, sample: int) -> tuple[int, int]:
        for g, idx in enumerate(self.members):
            hit = np.flatnonzero(idx == sample)
            if hit.size:
                return g, int(hit[0])
        raise IndexError(sample)

    def gather(self, x: Tensor, g: int) -> Tensor:
        if len(self.members) == 1:
            return x
        return take(x, self.members[g])

    def scatter(self, parts: list[Tensor]) -> Tensor:
        """Reassemble per-group results into original sample order."""
        whole = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        if np.array_equal(self.order, np.arange(len(self.order))):
            return whole
        return take(whole, self.inverse)


@dataclass
class FusionOutput:
    f_l2v_final: Tensor  # [B, L_v, C]
    f_v2l_groups: list[Tensor]  # per length group, [G, L_t, C]
    groups: LengthGroups
    per_block: list[list[HABlockOutput]] = field(default_factory=list)  # [block][group]

    @property
    def f_v2l_final(self) -> list[Tensor]:
        out = []
        for i in range(len(self.groups.order)):
            g, j = self.groups.locate(i)
            out.append(index(self.f_v2l_groups[g], j))
        return out

    def affinities(self, block: int, sample: int) -> tuple[np.ndarray, np.ndarray]:
        """Round-one and round-two attention of one sample in one block, ``[L_v, L_t]`` each."""
        g, j = self.groups.locate(sample)
        out = self.per_block[block][g]
        return out.affinity_round1.data[j], out.affinity_round2.data[j]


def fuse_level(f_block_out, f_v_next, p: ConvBAParams, grid: tuple[int, int], training: bool,
               bn_updates: list | None = None) -> Tensor:
    """Concatenate block output and next-level features on the grid, then conv + BN + ReLU.

    Inputs are ``[L_v, C]`` for one sample or ``[B, L_v, C]`` for a batch (batch
    statistics are then shared across the batch).
    """
    a, b = as_tensor(f_block_out), as_tensor(f_v_next)
    h, w = grid
    if a.shape != b.shape or a.shape[-2] != h * w:
        raise DimensionError(f"fuse_level: {a.shape} and {b.shape} do not share the {h}x{w} grid")
    single = a.ndim == 2
    lead = (1,) if single else a.shape[:1]
    c = a.shape[-1]
    x = concat([reshape(a, lead + (h, w, c)), reshape(b, lead + (h, w, c))], axis=-1)
    y = conv_bn_act(x, p, training, bn_updates)
    return reshape(y, (h * w, p.c_out) if single else lead + (h * w, p.c_out))


def fusion_forward(
    f_v1,
    f_v2,
    f_v3,
    f_w: list,
    f_s: list,
    p: FusionStackParams,
    grid: tuple[int, int],
    flags: FusionFlags | None = None,
    training: bool = True,
    bn_updates: list | None = None,
) -> FusionOutput:
    """Run the stack on a batch.

    ``f_v1..3`` are ``[B, L_v, C]``; ``f_w`` and ``f_s`` are per-sample lists of
    ``[L_t, C_t]`` and ``[1, C_t]`` arrays or tensors (sentence lengths may differ).
    """
    flags = flags or FusionFlags()
    levels = [as_tensor(f_v1), as_tensor(f_v2), as_tensor(f_v3)]
    if any(lv.shape != levels[0].shape for lv in levels) or levels[0].ndim != 3:
        raise DimensionError(f"fusion_forward: level shapes {[lv.shape for lv in levels]} differ")
    if len(f_w) != levels[0].shape[0] or len(f_s) != len(f_w):
        raise DimensionError("fusion_forward: one sentence per image required")
    if flags.deep_to_shallow:
        levels = levels[::-1]
    groups = LengthGroups.from_lengths([as_tensor(w).shape[0] for w in f_w])
    words = [stack([f_w[i] for i in idx]) for idx in groups.members]
    sents = [stack([f_s[i] for i in idx]) for idx in groups.members]

    def run_block(x, words, blk):
        return [
            ha_block_forward(
                groups.gather(x, g), words[g], sents[g], blk,
                feedback_enabled=flags.feedback,
                vision_weighted_enabled=flags.vision_weighted,
                language_weighted_enabled=flags.language_weighted,
            )
            for g in range(len(groups.members))
        ]

    if flags.without_hierarchy:
        outs = run_block(as_tensor(f_v3), words, p.blocks[2])
        return FusionOutput(groups.scatter([o.f_l2v for o in outs]), [o.f_v2l for o in outs],
                            groups, [outs])

    x = levels[0]
    per_block = []
    for i in range(3):
        outs = run_block(x, words, p.blocks[i])
        per_block.append(outs)
        words = [o.f_v2l for o in outs]
        if i < 2:
            src = groups.scatter([o.modulated if flags.fuse_uses_intermediate else o.f_l2v for o in outs])
            x = fuse_level(src, levels[i + 1], p.fuses[i], grid, training, bn_updates)
    return FusionOutput(groups.scatter([o.f_l2v for o in per_block[2]]), words, groups, per_block)
