"""Effect of widening the tensors read by activation functions.

Quantizes a fixture at one WL with activation offsets 0..K and reports MSE
against FP32 for each.
"""
import argparse

import numpy as np

from fxemu.engine import run_quantized
from fxemu.model_io import FIXTURES, build_fixture, fixture_inputs, split_batch
from fxemu.pipeline import QuantConfig, quantize_model
from fxemu.refexec import compare, run_fp32


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--fixture", choices=FIXTURES, default="tiny_cnn")
    p.add_argument("--wl", type=int, default=10)
    p.add_argument("--max-offset", type=int, default=3)
    p.add_argument("--seeds", type=int, default=5, help="weight seeds to average over")
    args = p.parse_args()

    mse = np.zeros((args.seeds, args.max_offset + 1))
    for s in range(args.seeds):
        g = build_fixture(args.fixture, seed=s)
        calib = split_batch(fixture_inputs(args.fixture, 32, seed=100 + s))
        x = fixture_inputs(args.fixture, 32, seed=200 + s)
        ref = run_fp32(g, x)
        for k in range(args.max_offset + 1):
            qm = quantize_model(g, calib, QuantConfig(wl=args.wl, fl_activation_offset=k)).model
            mse[s, k] = compare(run_quantized(qm, x).output, ref).mse

    print(f"{args.fixture} at WL {args.wl}, {args.seeds} seeds")
    print("seed " + " ".join(f"{'k=' + str(k):>11}" for k in range(args.max_offset + 1)))
    for s, row in enumerate(mse):
        print(f"{s:>4} " + " ".join(f"{v:>11.3e}" for v in row))
    print("mean " + " ".join(f"{v:>11.3e}" for v in mse.mean(axis=0)))


if __name__ == "__main__":
    main()
