"""Run configuration: flat ``key = value`` text, ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from haris.tensor import ContractError

# config key -> ablation name used on the command line and in reports
ABLATIONS = {
    "wo_hs": "w/o HS",
    "r_ca": "r. CA",
    "wo_fb": "w/o FB",
    "wo_vw": "w/o VW",
    "wo_lw": "w/o LW",
    "r_de": "r. DE",
    "decoder_query_swap": "decoder query swap",
    "fuse_uses_intermediate": "fuse intermediate",
}


@dataclass
class Config:
    # dims
    image_size: int = 32
    dim: int = 32
    text_dim: int = 32
    decoder_layers: int = 2
    max_words: int = 17
    # seeds
    data_seed: int = 0
    stub_seed: int = 1234
    init_seed: int = 0
    # data
    n_train: int = 2000
    n_val: int = 200
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_epoch: int = 30
    # schedule
    epochs: int = 50
    batch_size: int = 8
    steps_per_epoch: int = 80
    bn_momentum: float = 0.1
    # loss
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # ablations and variants
    wo_hs: bool = False
    r_ca: bool = False
    wo_fb: bool = False
    wo_vw: bool = False
    wo_lw: bool = False
    r_de: bool = False
    decoder_query_swap: bool = False
    fuse_uses_intermediate: bool = False
    deep_to_shallow: bool = False
    decoder_pos_embed: bool = False
    # paths
    out_dir: str = "runs/default"

    def validate(self) -> "Config":
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.epochs > 0 and not self.decay_epoch < self.epochs:
            raise ContractError(f"decay_epoch {self.decay_epoch} must be < epochs {self.epochs}")
        if self.image_size % 4:
            raise ContractError("image_size must be divisible by 4")
        if min(self.batch_size, self.n_train, self.n_val, self.decoder_layers) < 1:
            raise ContractError("batch_size, n_train, n_val and decoder_layers must be >= 1")
        return self

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(kind, raw: str, key: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from exc


def parse_config(text: str, apply_env: bool = True) -> Config:
    kinds = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ContractError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(kinds[key], raw, key)
    cfg = Config(**values)
    if apply_env:
        cfg = apply_seed_override(cfg)
    return cfg.validate()


def load_config(path: str) -> tuple[Config, str]:
    """Return the parsed config and the exact file text (echoed into checkpoints)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text), text


def apply_seed_override(cfg: Config) -> Config:
    """``HARIS_SEED`` replaces the data and init seeds; the frozen stub seed is kept."""
    raw = os.environ.get("HARIS_SEED")
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ContractError(f"HARIS_SEED must be an integer, got {raw!r}") from exc
    return dataclasses.replace(cfg, data_seed=seed, init_seed=seed)


def tiny_config(**overrides) -> Config:
    """Small dims used for full-model gradient checks."""
    base = Config(image_size=16, dim=8, text_dim=8, decoder_layers=1, n_train=4, n_val=2,
                  batch_size=2, epochs=1, decay_epoch=0, steps_per_epoch=1)
    return base.replace(**overrides)
