"""Optimiser, training loop, checkpoints, evaluation, attention dumps and ablation runs."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from haris.config import ABLATIONS, Config, parse_config
from haris.losses import MetricsReport, aggregate_metrics, binarize, total_loss
from haris.model import ModelParams, build_model, forward, predict
from haris.nn import apply_bn_updates
from haris.synthetic import VAL_SEED_OFFSET, EncodedSample, make_split, write_pgm
from haris.tensor import ContractError, Parameter, Tape, backward

MAGIC = b"HARISCKP"
FORMAT_VERSION = 1
TEST_SEED_OFFSET = 2 * 10**6
CSV_HEADER = MetricsReport.CSV_HEADER
CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.csv"

# record dtype codes
_F64, _I64, _U8 = 0, 1, 2
_DTYPES = {_F64: "<f8", _I64: "<i8", _U8: "u1"}


class CheckpointError(ValueError):
    pass


class NaNLossError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Parameter], grads: list[np.ndarray], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; frozen parameters are skipped."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} for {p.name} {p.data.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ContractError(f"adam_step: moment shape {m.shape} for {p.name} {p.data.shape}")
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, cfg: Config) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * (cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    version: int
    config_echo: str  # text of the config file as given
    config_text: str  # effective config after environment overrides
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam: AdamState
    step: int
    epoch: int
    rng_state: dict

    def config(self) -> Config:
        return parse_config(self.config_text, apply_env=False)


def _pack(name: str, arr: np.ndarray, code: int) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    key = name.encode("utf-8")
    head = struct.pack("<I", len(key)) + key + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = arr.tobytes()
    return head + struct.pack("<Q", len(body)) + body


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", ck.version)]
    meta = [
        ("meta.config_echo", _text(ck.config_echo), _U8),
        ("meta.config", _text(ck.config_text), _U8),
        ("meta.rng", _text(json.dumps(ck.rng_state, sort_keys=True)), _U8),
        ("meta.counters", np.array([ck.step, ck.epoch, ck.adam.t]), _I64),
    ]
    records = meta + [(f"param.{k}", v, _F64) for k, v in ck.params.items()]
    records += [(f"buffer.{k}", v, _F64) for k, v in ck.buffers.items()]
    records += [(f"adam.m.{k}", v, _F64) for k, v in ck.adam.m.items()]
    records += [(f"adam.v.{k}", v, _F64) for k, v in ck.adam.v.items()]
    out.append(struct.pack("<I", len(records)))
    out.extend(_pack(*r) for r in records)
    return b"".join(out)


def save_checkpoint(path: str, ck: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def parse_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    def fail(msg):
        raise CheckpointError(f"{source}: {msg}")

    if raw[:8] != MAGIC:
        fail("not a checkpoint (bad magic)")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            fail("truncated")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (version,) = read("<I")
    if version != FORMAT_VERSION:
        fail(f"format version {version}, expected {FORMAT_VERSION}")
    (n,) = read("<I")
    records = {}
    for _ in range(n):
        (klen,) = read("<I")
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        code, ndim = read("<BI")
        if code not in _DTYPES:
            fail(f"record {name!r}: unknown dtype code {code}")
        shape = read(f"<{ndim}Q")
        (nbytes,) = read("<Q")
        if pos + nbytes > len(raw):
            fail("truncated")
        records[name] = np.frombuffer(raw[pos:pos + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        fail("trailing bytes")

    def pick(prefix):
        return {k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)}

    try:
        step, epoch, t = (int(x) for x in records["meta.counters"])
        return Checkpoint(
            version=version,
            config_echo=records["meta.config_echo"].tobytes().decode("utf-8"),
            config_text=records["meta.config"].tobytes().decode("utf-8"),
            params=pick("param."),
            buffers=pick("buffer."),
            adam=AdamState(pick("adam.m."), pick("adam.v."), t),
            step=step,
            epoch=epoch,
            rng_state=json.loads(records["meta.rng"].tobytes().decode("utf-8")),
        )
    except KeyError as exc:
        fail(f"missing record {exc}")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), path)


def snapshot(model: ModelParams, cfg: Config, config_echo: str, adam: AdamState, step: int,
             epoch: int, rng: np.random.Generator) -> Checkpoint:
    return Checkpoint(
        version=FORMAT_VERSION,
        config_echo=config_echo,
        config_text=cfg.to_text(),
        params={p.name: p.data.copy() for p in model.parameters()},
        buffers={b.name: b.data.copy() for b in model.buffers()},
        adam=AdamState({k: v.copy() for k, v in adam.m.items()},
                       {k: v.copy() for k, v in adam.v.items()}, adam.t),
        step=step,
        epoch=epoch,
        rng_state=rng.bit_generator.state,
    )


def restore_model(ck: Checkpoint) -> tuple[ModelParams, Config]:
    cfg = ck.config()
    model = build_model(cfg)
    for item in model.parameters() + model.buffers():
        store = ck.params if isinstance(item, Parameter) else ck.buffers
        arr = store.get(item.name)
        if arr is None or arr.shape != item.data.shape:
            raise CheckpointError(f"checkpoint does not match model at {item.name!r}")
        item.data[...] = arr
    return model, cfg


# ---------------------------------------------------------------- training


def split_seed(cfg: Config, split: str) -> int:
    offsets = {"train": 0, "val": VAL_SEED_OFFSET, "test": TEST_SEED_OFFSET}
    if split not in offsets:
        raise ContractError(f"unknown split {split!r}; expected one of {sorted(offsets)}")
    return cfg.data_seed + offsets[split]


def load_split(cfg: Config, split: str, model: ModelParams, n: int | None = None) -> list[EncodedSample]:
    if n is None:
        n = cfg.n_val if split != "train" else cfg.n_train
    return make_split(n, split_seed(cfg, split), model.stubs, cfg.max_words)


def evaluate_samples(model: ModelParams, samples: list[EncodedSample], cfg: Config) -> MetricsReport:
    logits = predict(model, samples, cfg)
    return aggregate_metrics([(binarize(lg), s.gt_mask) for lg, s in zip(logits, samples)])


def _epoch_order(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    parts, have = [], 0
    while have < count:
        parts.append(rng.permutation(n))
        have += n
    return np.concatenate(parts)[:count]


@dataclass
class TrainResult:
    model: ModelParams
    checkpoint: Checkpoint
    history: list[MetricsReport]
    losses: list[float]


def train(cfg: Config, out_dir: str | None = None, config_echo: str | None = None,
          log=None, val_every: int = 1) -> TrainResult:
    """Train from scratch; writes ``checkpoint.bin`` and ``metrics.csv`` to ``out_dir`` if given.

    One CSV row of validation metrics is emitted per evaluated epoch.
    """
    cfg.validate()
    if config_echo is None:
        config_echo = cfg.to_text()
    model = build_model(cfg)
    train_set = load_split(cfg, "train", model)
    val_set = load_split(cfg, "val", model)
    rng = np.random.default_rng(cfg.data_seed)
    adam = AdamState()
    params = model.trainable()
    history, losses = [], []
    step = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = _epoch_order(rng, len(train_set), cfg.steps_per_epoch * cfg.batch_size)
        for k in range(cfg.steps_per_epoch):
            batch = [train_set[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            target = np.stack([s.gt_mask for s in batch]).astype(np.float64)
            model.zero_grad()
            bn_updates: list = []
            with Tape():
                res = forward(model, batch, cfg, True, bn_updates)
                loss, _ = total_loss(res.logits, target, cfg.focal_gamma, cfg.focal_alpha)
                if not np.isfinite(loss.item()):
                    raise NaNLossError(step)
                backward(loss)
            adam_step(params, [p.grad for p in params], adam, lr, (cfg.beta1, cfg.beta2), cfg.eps)
            apply_bn_updates(bn_updates, cfg.bn_momentum)
            losses.append(loss.item())
            step += 1
        if (epoch + 1) % val_every == 0 or epoch + 1 == cfg.epochs:
            report = evaluate_samples(model, val_set, cfg)
            history.append(report)
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {np.mean(losses[-cfg.steps_per_epoch:]):.4f} "
                    f"val mIoU {report.mean_iou:.4f}")
    ck = snapshot(model, cfg, config_echo, adam, step, cfg.epochs, rng)
    if out_dir is not None:
        write_outputs(out_dir, ck, history)
    return TrainResult(model, ck, history, losses)


def metrics_csv(reports: list[MetricsReport]) -> str:
    return CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in reports)


def write_outputs(out_dir: str, ck: Checkpoint, history: list[MetricsReport]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILE), ck)
    with open(os.path.join(out_dir, METRICS_FILE), "w", encoding="ascii", newline="\n") as fh:
        fh.write(metrics_csv(history))


def evaluate(checkpoint_path: str, split: str, n: int | None = None) -> MetricsReport:
    model, cfg = restore_model(load_checkpoint(checkpoint_path))
    return evaluate_samples(model, load_split(cfg, split, model, n), cfg)


# ---------------------------------------------------------------- attention dumps


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def attention_maps(model: ModelParams, cfg: Config, sample: EncodedSample) -> dict[tuple[int, int, int], np.ndarray]:
    """``(block, round, word) -> [H, W]`` attention of every visual token on that word."""
    res = forward(model, [sample], cfg, training=False)
    h, w = model.stubs.grid
    maps = {}
    for b in range(len(res.fusion.per_block)):
        for r, aff in enumerate(res.fusion.affinities(b, 0), start=1):
            for j in range(aff.shape[1]):
                maps[(b + 1, r, j)] = aff[:, j].reshape(h, w)
    return maps


def dump_attention(checkpoint_path: str, sample_id: int, out_dir: str, split: str = "val") -> list[str]:
    """Write one PGM per (block, round, word); ``sample_id`` indexes into ``split``."""
    model, cfg = restore_model(load_checkpoint(checkpoint_path))
    n = cfg.n_val if split != "train" else cfg.n_train
    if not 0 <= sample_id < n:
        raise ContractError(f"sample {sample_id} not in {split} split of size {n}")
    sample = make_split(1, split_seed(cfg, split) + sample_id, model.stubs, cfg.max_words)[0]
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for (b, r, j), amap in sorted(attention_maps(model, cfg, sample).items()):
        path = os.path.join(out_dir, f"block{b}_round{r}_word{j}_{sample.tokens[j]}.pgm")
        write_pgm(path, normalize_map(amap))
        written.append(path)
    return written


# ---------------------------------------------------------------- ablation


ABLATION_HEADER = "variant,seeds," + CSV_HEADER


def parse_flags(csvlist: str) -> list[str]:
    """Accept config keys (``wo_fb``) or report names (``w/o FB``), comma separated."""
    by_name = {v.lower(): k for k, v in ABLATIONS.items()}
    flags = []
    for raw in csvlist.split(","):
        tok = raw.strip()
        if not tok:
            continue
        key = tok if tok in ABLATIONS else by_name.get(tok.lower())
        if key is None:
            raise ContractError(f"unknown ablation flag {tok!r}; expected one of {sorted(ABLATIONS)}")
        if key not in flags:
            flags.append(key)
    return flags


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        mean_iou=float(np.mean([r.mean_iou for r in reports])),
        cumulative_iou=float(np.mean([r.cumulative_iou for r in reports])),
        pr_at={k: float(np.mean([r.pr_at[k] for r in reports])) for k in reports[0].pr_at},
        n_samples=reports[0].n_samples,
    )


def ablate(cfg: Config, flags: list[str], seeds=(0, 1, 2), out_path: str | None = None,
           log=None) -> dict[str, MetricsReport]:
    """Train the baseline and each single-flag variant on shared seeds; seed-averaged final val metrics."""
    for f in flags:
        if f not in ABLATIONS:
            raise ContractError(f"unknown ablation flag {f!r}")
    variants = [("baseline", {})] + [(ABLATIONS[f], {f: True}) for f in flags]
    results = {}
    for name, change in variants:
        finals = []
        for seed in seeds:
            run_cfg = cfg.replace(data_seed=seed, init_seed=seed, **change)
            finals.append(train(run_cfg, val_every=run_cfg.epochs).history[-1])
        results[name] = mean_report(finals)
        if log:
            log(f"{name}: mean IoU {results[name].mean_iou:.4f}")
    if out_path is not None:
        seed_txt = " ".join(str(s) for s in seeds)
        lines = [ABLATION_HEADER] + [f"{k},{seed_txt},{r.csv_row()}" for k, r in results.items()]
        parent = os.path.dirname(out_path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(out_path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return results
