"""``haris`` command line.

Exit status: 0 on success, 1 on a contract or validation error, 2 on an I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from haris import config as config_mod
from haris import train as train_mod
from haris.gradcheck import model_grad_check
from haris.losses import MetricsReport
from haris.synthetic import VAL_SEED_OFFSET, VocabularyError, export_split
from haris.tensor import ContractError, DimensionError

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args) -> int:
    """Train split gets ``n`` scenes from ``seed``; val gets ``max(1, n // 10)`` from the val range."""
    if args.n < 1:
        raise ContractError("--n must be >= 1")
    export_split(os.path.join(args.out, "train"), range(args.seed, args.seed + args.n), args.image_size)
    n_val = max(1, args.n // 10)
    val0 = args.seed + VAL_SEED_OFFSET
    export_split(os.path.join(args.out, "val"), range(val0, val0 + n_val), args.image_size)
    print(f"wrote {args.n} train and {n_val} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, text = config_mod.load_config(args.config)
    res = train_mod.train(cfg, out_dir=args.out, config_echo=text, log=_log)
    final = res.history[-1]
    print(MetricsReport.CSV_HEADER)
    print(final.csv_row())
    return EXIT_OK


def cmd_eval(args) -> int:
    report = train_mod.evaluate(args.checkpoint, args.split, args.n)
    print(MetricsReport.CSV_HEADER)
    print(report.csv_row())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, _ = config_mod.load_config(args.config)
    if args.dims == "tiny":
        cfg = config_mod.tiny_config(**{k: getattr(cfg, k) for k in config_mod.ABLATIONS})
    start = time.perf_counter()
    worst, report = model_grad_check(cfg)
    elapsed = time.perf_counter() - start
    for name, err in report.items():
        print(f"{name} {err:.3e}")
    status = "PASS" if worst <= args.tol else "FAIL"
    print(f"{status} max relative error {worst:.3e} (tol {args.tol:g}) over {len(report)} parameters "
          f"in {elapsed:.1f}s")
    return EXIT_OK if worst <= args.tol else EXIT_CONTRACT


def cmd_dump_attention(args) -> int:
    paths = train_mod.dump_attention(args.checkpoint, args.sample, args.out, args.split)
    print(f"wrote {len(paths)} maps to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, _ = config_mod.load_config(args.config)
    flags = train_mod.parse_flags(args.flags)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    train_mod.ablate(cfg, flags, seeds=seeds, out_path=args.out, log=_log)
    with open(args.out, encoding="ascii") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad arguments are a validation error, not an I/O one
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="haris", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="export a synthetic dataset as PPM/PGM files")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=None, help="number of samples (default: split size)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every trainable parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--dims", choices=("tiny", "config"), default="tiny")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="write per-word attention maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("ablate", help="train baseline and single-flag variants")
    p.add_argument("--config", required=True)
    p.add_argument("--flags", default="", help="comma separated, e.g. wo_fb,wo_hs")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    except (ContractError, DimensionError, VocabularyError, train_mod.CheckpointError,
            train_mod.NaNLossError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
