"""Overflow counts versus guard bits, and the cost of detect mode.

For every MAC layer of a fixture: overflow count at each guard-bit setting,
then wall-clock of plain versus detect runs.
"""
import argparse
import time

from fxemu.engine import run_quantized
from fxemu.model_io import FIXTURES, build_fixture, fixture_inputs, split_batch
from fxemu.pipeline import QuantConfig, quantize_model


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--fixture", choices=FIXTURES, default="resnet_block")
    p.add_argument("--wl", type=int, default=8)
    p.add_argument("--max-guard", type=int, default=8)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    g = build_fixture(args.fixture)
    qm = quantize_model(g, split_batch(fixture_inputs(args.fixture, 32, seed=1)),
                        QuantConfig(wl=args.wl)).model
    x = fixture_inputs(args.fixture, args.batch, seed=2)

    counts = {}
    for gb in range(args.max_guard + 1):
        rep = run_quantized(qm, x, detect=True, guard_bits=gb).report
        for node, rec in rep.layers.items():
            counts.setdefault(node, []).append(rec.overflows)
    print("overflows by guard bits (default guard in brackets)")
    print(f"{'node':<12}" + "".join(f"{gb:>9}" for gb in range(args.max_guard + 1)))
    for node, row in counts.items():
        print(f"{node + ' [' + str(qm.ann.guard_bits[node]) + ']':<12}" + "".join(f"{c:>9}" for c in row))

    plain = timed(lambda: run_quantized(qm, x), args.repeat)
    detect = timed(lambda: run_quantized(qm, x, detect=True), args.repeat)
    print(f"\nplain {plain * 1e3:.1f} ms, detect {detect * 1e3:.1f} ms, ratio {detect / plain:.2f}")


if __name__ == "__main__":
    main()
