"""Whole-model finite-difference gradient check on a small batch."""

from __future__ import annotations

import numpy as np

from haris.config import Config
from haris.losses import total_loss
from haris.model import ModelParams, build_model, forward
from haris.synthetic import EncodedSample, encode_image_stub, encode_text_stub, generate_scene, object_mask
from haris.tensor import grad_check


def check_batch(model: ModelParams, n: int = 2, words: int = 3, seed: int = 0) -> list[EncodedSample]:
    """``n`` scenes whose expressions are padded or cut to exactly ``words`` tokens."""
    out = []
    for i in range(n):
        scene, image = generate_scene(seed + i, model.stubs.image_size)
        target = scene.objects[scene.referred_index]
        tokens = (["the", target.color, target.kind, "object"] * words)[:words]
        f_v1, f_v2, f_v3 = encode_image_stub(image, model.stubs)
        f_w, f_s = encode_text_stub(tokens, model.stubs, max(words, 1))
        gt = object_mask(target, scene.image_size)
        out.append(EncodedSample(seed + i, f_v1, f_v2, f_v3, f_w, f_s, gt, tokens, scene))
    return out


def model_grad_check(cfg: Config, h: float = 1e-5, words: int = 3, max_coords: int | None = 24,
                     directions: int = 2, model: ModelParams | None = None):
    """Return ``(worst, per-parameter errors)`` for the training loss of a 2-sample batch.

    By default each parameter gets 24 sampled coordinates plus two random
    directions spanning all its coordinates; ``max_coords=None`` sweeps every
    coordinate (minutes rather than seconds).
    """
    model = model or build_model(cfg)
    batch = check_batch(model, 2, words)
    target = np.stack([s.gt_mask for s in batch]).astype(np.float64)

    def loss():
        logits = forward(model, batch, cfg, training=True).logits
        return total_loss(logits, target, cfg.focal_gamma, cfg.focal_alpha)[0]

    return grad_check(loss, model.trainable(), h=h, per_param=True, max_coords=max_coords,
                      directions=directions)
