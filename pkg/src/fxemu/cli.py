"""Command-line front end.

    fxemu fixture NAME OUT_DIR           write a fixture model plus calib/eval tensors
    fxemu quantize MODEL CALIB --out Q   run the six-step pipeline
    fxemu run QMODEL INPUTS              integer inference, metrics, overflow table
    fxemu sweep MODEL CALIB EVAL         one quantize+run per WL

Every command writes its records under ``--run-dir`` using fixed names:
``manifest.json``, ``metrics.txt``/``metrics.json``, ``overflow.txt``/``overflow.json``
and ``passes.txt``.  ``--config FILE`` reads a JSON object whose keys mirror
the long flag names (or a previous ``manifest.json``, whose ``config`` echo is
used); explicit flags win.  ``FXEMU_THREADS`` sets the sweep worker count.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .engine import run_quantized
from .errors import (
    ConfigError,
    ContractViolation,
    FxEmuError,
    ModelFormatError,
    PipelineError,
)
from .model_io import (
    FIXTURES,
    build_fixture,
    export_quantized,
    fixture_inputs,
    load_model,
    load_quantized,
    load_tensor,
    save_model,
    save_tensor,
    split_batch,
)
from .pipeline import QuantConfig, quantize_model
from .refexec import compare, run_fp32

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PIPELINE = 3
EXIT_CONTRACT = 4
EXIT_FORMAT = 5

THREADS_ENV = "FXEMU_THREADS"

# config keys shared by the config file, the manifest echo and the flags
_CONFIG_KEYS = ("wl", "wl_activation", "wl_bias", "fl_activation_offset", "add_strategy",
                "guard_bits", "detect_overflow", "wl_min", "wl_max", "seed")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _run_dir(args) -> Path:
    d = Path(args.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _quant_config(args) -> QuantConfig:
    return QuantConfig(wl=args.wl, wl_activation=args.wl_activation, wl_bias=args.wl_bias,
                       fl_activation_offset=args.fl_activation_offset,
                       add_strategy=args.add_strategy, guard_bits=args.guard_bits)


def _config_echo(args) -> dict:
    return {k: getattr(args, k) for k in _CONFIG_KEYS if hasattr(args, k)}


def _manifest(args, **sections) -> dict:
    doc = {"command": args.command, "argv": sys.argv[1:], "config": _config_echo(args)}
    doc.update(sections)
    return doc


def _metrics_text(rows: list[dict]) -> str:
    head = f"{'wl':>4}{'max_abs_diff':>16}{'mse':>16}{'argmax_agree':>14}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{str(r.get('wl', '-')):>4}{r['max_abs_diff']:>16.6g}{r['mse']:>16.6g}"
                     f"{r['argmax_agreement']:>14.3f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_fixture(args) -> int:
    out = Path(args.out_dir)
    g = build_fixture(args.name, args.seed)
    save_model(g, out / "model")
    save_tensor(fixture_inputs(args.name, args.calib, seed=args.seed + 1), out / "calib.npy")
    save_tensor(fixture_inputs(args.name, args.eval, seed=args.seed + 2), out / "eval.npy")
    print(f"wrote {args.name} model and tensors under {out}")
    return EXIT_OK


def quantize_files(model_path, calib_path, cfg: QuantConfig, out_path):
    g = load_model(model_path)
    calib = split_batch(load_tensor(calib_path))
    res = quantize_model(g, calib, cfg)
    export_quantized(res.model, out_path)
    return g, res


def cmd_quantize(args) -> int:
    run_dir = _run_dir(args)
    cfg = _quant_config(args)
    t0 = time.perf_counter()
    _, res = quantize_files(args.model, args.calib, cfg, args.out)
    total = time.perf_counter() - t0
    text = "\n".join(r.to_text() for r in res.reports) + "\n"
    (run_dir / "passes.txt").write_text(text)
    print(text, end="")
    doc = _manifest(
        args,
        files={"model": _sha256(args.model), "calib": _sha256(args.calib),
               "quantized": _sha256(args.out)},
        pass_reports=[r.as_dict() for r in res.reports],
        calibration=[c.as_dict() for c in res.calibration],
        timings={**res.timings, "total": total},
    )
    _write_json(run_dir / "manifest.json", doc)
    print(f"quantized model written to {args.out}")
    return EXIT_OK


def evaluate(qm, x, detect: bool, guard_bits):
    """Reference, plain and (optionally) detect runs with timings."""
    timings = {}
    t0 = time.perf_counter()
    ref = run_fp32(qm.graph, x)
    timings["fp32"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    plain = run_quantized(qm, x)
    timings["plain"] = time.perf_counter() - t0
    report = None
    if detect:
        t0 = time.perf_counter()
        det = run_quantized(qm, x, detect=True, guard_bits=guard_bits)
        timings["detect"] = time.perf_counter() - t0
        if not np.array_equal(det.output, plain.output):
            raise ContractViolation("detect mode changed numeric outputs")
        report = det.report
    return compare(plain.output, ref), report, timings


def cmd_run(args) -> int:
    run_dir = _run_dir(args)
    qm = load_quantized(args.qmodel)
    x = load_tensor(args.inputs)
    metrics, report, timings = evaluate(qm, x, args.detect_overflow, args.guard_bits)
    row = metrics.as_dict()
    (run_dir / "metrics.txt").write_text(_metrics_text([row]))
    _write_json(run_dir / "metrics.json", row)
    print(_metrics_text([row]), end="")
    sections = {"files": {"qmodel": _sha256(args.qmodel), "inputs": _sha256(args.inputs)},
                "metrics": row, "timings": timings}
    if report is not None:
        (run_dir / "overflow.txt").write_text(report.to_text() + "\n")
        _write_json(run_dir / "overflow.json", report.records())
        sections["overflow"] = report.records()
        print(report.to_text())
        if timings.get("plain"):
            print(f"detect/plain time ratio: {timings['detect'] / timings['plain']:.2f}")
    _write_json(run_dir / "manifest.json", _manifest(args, **sections))
    return EXIT_OK


def sweep_point(model_path, calib_path, eval_path, cfg_dict, out_dir):
    cfg = QuantConfig(**cfg_dict)
    qdir = Path(out_dir) / f"wl{cfg.wl:02d}"
    _, res = quantize_files(model_path, calib_path, cfg, qdir)
    x = load_tensor(eval_path)
    metrics, _, timings = evaluate(res.model, x, False, None)
    return {"wl": cfg.wl, **metrics.as_dict(), "timings": timings}


def run_sweep(model_path, calib_path, eval_path, base: QuantConfig, wl_min: int, wl_max: int,
              out_dir, workers: int = 1) -> list[dict]:
    if not (2 <= wl_min <= wl_max <= 24):
        raise ConfigError(f"sweep range {wl_min}..{wl_max} must satisfy 2 <= min <= max <= 24")
    cfgs = []
    for wl in range(wl_min, wl_max + 1):
        d = base.as_dict()
        d["wl"] = wl
        # a fixed activation WL would not sweep
        d["wl_activation"] = None
        cfgs.append(d)
    jobs = [(model_path, calib_path, eval_path, d, out_dir) for d in cfgs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(sweep_point, *zip(*jobs)))
    return [sweep_point(*j) for j in jobs]


def cmd_sweep(args) -> int:
    run_dir = _run_dir(args)
    workers = int(os.environ.get(THREADS_ENV, "1"))
    rows = run_sweep(args.model, args.calib, args.eval, _quant_config(args), args.wl_min,
                     args.wl_max, run_dir / "models", workers)
    (run_dir / "metrics.txt").write_text(_metrics_text(rows))
    _write_json(run_dir / "metrics.json", rows)
    print(_metrics_text(rows), end="")
    _write_json(run_dir / "manifest.json", _manifest(
        args, files={"model": _sha256(args.model), "calib": _sha256(args.calib),
                     "eval": _sha256(args.eval)},
        metrics=rows))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_quant_flags(p):
    p.add_argument("--wl", type=int, default=12, help="word length for weights (and activations)")
    p.add_argument("--wl-activation", type=int, default=None)
    p.add_argument("--wl-bias", type=int, default=None)
    p.add_argument("--fl-activation-offset", type=int, default=0,
                   help="extra WL and FL bits for the tensors activation functions read and write")
    p.add_argument("--add-strategy", choices=["min-fl", "align-max"], default="min-fl")
    p.add_argument("--guard-bits", type=int, default=None,
                   help="accumulator guard bits per MAC layer (default ceil(log2 K))")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxemu", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixture", help="write a built-in fixture model and tensors")
    p.add_argument("name", choices=FIXTURES)
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib", type=int, default=32, help="calibration samples")
    p.add_argument("--eval", type=int, default=32, help="evaluation samples")
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("quantize", help="run the quantization pipeline")
    p.add_argument("model")
    p.add_argument("calib")
    p.add_argument("--out", required=True)
    p.add_argument("--run-dir", default="run")
    _add_quant_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("run", help="integer inference on a quantized model")
    p.add_argument("qmodel")
    p.add_argument("inputs")
    p.add_argument("--detect-overflow", action="store_true")
    p.add_argument("--guard-bits", type=int, default=None)
    p.add_argument("--run-dir", default="run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="quantize and evaluate over a WL range")
    p.add_argument("model")
    p.add_argument("calib")
    p.add_argument("eval")
    p.add_argument("--wl-min", type=int, default=6)
    p.add_argument("--wl-max", type=int, default=16)
    p.add_argument("--run-dir", default="run")
    _add_quant_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def _load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if isinstance(doc, dict) and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        pre, _ = parser.parse_known_args(argv)
        if pre.config:
            defaults = _load_config(pre.config)
            for action in parser._subparsers._group_actions[0].choices.values():
                known = {a.dest for a in action._actions}
                action.set_defaults(**{k: v for k, v in defaults.items() if k in known})
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    except ContractViolation as e:
        where = f" (node {e.node_id!r})" if e.node_id else ""
        print(f"contract violation: {e}{where}", file=sys.stderr)
        return EXIT_CONTRACT
    except ModelFormatError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except FxEmuError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
