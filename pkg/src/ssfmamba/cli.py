"""``ssfm`` command line: data synthesis, training, evaluation and self-checks."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks, data
from .network import load_checkpoint
from .scan import OrderKind, build_order
from .train import evaluate, load_config, train


def _triple(text: str) -> tuple:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected H,W,D, got {text!r}")
    return tuple(parts)


def cmd_synth(args) -> int:
    out = Path(args.out)
    for k in range(args.count):
        seed = args.seed + k
        case = data.synth_case(seed, args.size)
        img, lab = data.save_case(case, out)
        counts = np.bincount(case.labels.ravel(), minlength=data.NUM_LABELS)
        print(f"{case.case_id}: {img.name} {lab.name} labels={counts.tolist()}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    result = train(cfg, emit=print)
    for path in result.checkpoint_paths:
        print(f"checkpoint {path}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate(load_checkpoint(args.ckpt), args.data)
    print(report.table())
    print()
    for line in report.lines():
        print(line)
    return 0


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    return _report(checks.gradcheck(args.module, max_coords=args.max_coords))


def cmd_fft_selftest(args) -> int:
    return _report(checks.fft_selftest())


def cmd_inspect_order(args) -> int:
    order = build_order(OrderKind.parse(args.kind), args.shape, args.block)
    for t, (h, w, d) in enumerate(order.coords()):
        print(f"{t}\t{h}\t{w}\t{d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssfm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic image/label pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_triple, default=(16, 16, 16), help="H,W,D")
    p.add_argument("--count", type=int, default=1, help="cases, seeded seed..seed+count-1")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["all", "diffcore", "ssm", "blocks", "network"], default="all")
    p.add_argument("--max-coords", type=int, default=None,
                   help="probe at most this many coordinates per array")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("fft-selftest", help="spectral transform oracle checks")
    p.set_defaults(fn=cmd_fft_selftest)

    p = sub.add_parser("inspect-order", help="print a scan order as t, h, w, d rows")
    p.add_argument("--kind", required=True, help="in_slice | cross_slice | local_3d")
    p.add_argument("--shape", type=_triple, required=True)
    p.add_argument("--block", type=int, default=2)
    p.set_defaults(fn=cmd_inspect_order)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"ssfm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
