"""MSE and argmax agreement against FP32 over a word-length range.

    python scripts/wl_sweep.py --fixture tiny_cnn --wl-min 6 --wl-max 16
"""
import argparse
import json
import os
import tempfile
from pathlib import Path

from fxemu.cli import main, run_sweep
from fxemu.pipeline import QuantConfig


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--fixture", default="tiny_cnn")
    p.add_argument("--wl-min", type=int, default=6)
    p.add_argument("--wl-max", type=int, default=16)
    p.add_argument("--calib", type=int, default=32)
    p.add_argument("--eval", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the rows as JSON here")
    return p.parse_args()


def run(args):
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp) / args.fixture
        main(["fixture", args.fixture, str(d), "--seed", str(args.seed),
              "--calib", str(args.calib), "--eval", str(args.eval)])
        workers = int(os.environ.get("FXEMU_THREADS", "1"))
        return run_sweep(d / "model", d / "calib.npy", d / "eval.npy", QuantConfig(),
                         args.wl_min, args.wl_max, Path(tmp) / "sweep", workers)


if __name__ == "__main__":
    args = parse_args()
    rows = run(args)
    print(f"{'WL':>3} {'MSE':>12} {'max|d|':>10} {'argmax':>7}")
    for r in rows:
        print(f"{r['wl']:>3} {r['mse']:>12.4e} {r['max_abs_diff']:>10.4f} {r['argmax_agreement']:>7.3f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
