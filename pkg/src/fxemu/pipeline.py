"""The six-step quantization flow.

1. fuse layers (BatchNorm distribution over concat, then conv+BN folding)
2. quantize weights
3. calibrate activations
4. replace division-bearing layers
5. adjust FL at Add/Concat joins
6. fix output formats, quantize biases and pick default guard bits
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

from .calib import (
    MAC_KINDS,
    CalibRecord,
    WLConfig,
    assign_weight_params,
    calibrate_activations,
    derive_params,
)
from .engine import QuantizedModel
from .errors import ConfigError, FxEmuError, PipelineError
from .graph import Graph, QuantAnnotation, infer_shapes, topo_order, validate
from .passes import AddStrategy, PassReport, adjust_fl, eliminate_division, fuse_all
from .qtensor import quantize_tensor

STEPS = ("fuse", "quantize_weights", "calibrate", "eliminate_division", "adjust_fl",
         "quantize_outputs")


@dataclass(frozen=True)
class QuantConfig:
    wl: int = 12
    wl_activation: int | None = None
    wl_bias: int | None = None
    fl_activation_offset: int = 0
    add_strategy: str = "min-fl"
    guard_bits: int | None = None

    def __post_init__(self):
        try:
            AddStrategy(self.add_strategy)
        except ValueError:
            raise ConfigError(f"unknown add strategy {self.add_strategy!r}") from None
        if self.guard_bits is not None and self.guard_bits < 0:
            raise ConfigError("guard bits must be nonnegative")
        self.wl_config()

    def wl_config(self) -> WLConfig:
        return WLConfig(self.wl, self.wl_activation, self.wl_bias, self.fl_activation_offset)

    def as_dict(self):
        return asdict(self)


@dataclass
class PipelineResult:
    model: QuantizedModel
    reports: list[PassReport] = field(default_factory=list)
    calibration: list[CalibRecord] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


def mac_depth(g: Graph, node) -> int:
    w = g.weights[node.inputs[1]]
    return int(math.prod(w.shape[1:]))


def finalize(g: Graph, ann: QuantAnnotation, guard_bits: int | None = None) -> QuantizedModel:
    """Step 6: complete the annotation and quantize every MAC weight."""
    ann = ann.copy()
    derive_params(g, ann, ann.bias_wl)
    qweights = {}
    for n in topo_order(g):
        if n.kind in MAC_KINDS:
            for t in n.inputs[1:]:
                qweights[t] = quantize_tensor(g.weights[t], ann.params[t])
            k = mac_depth(g, n)
            ann.guard_bits[n.id] = guard_bits if guard_bits is not None else max(0, (k - 1).bit_length())
    missing = [t for n in g.nodes for t in g.data_inputs(n) + [n.output] if t not in ann.params]
    if missing:
        raise PipelineError(f"tensors without a format: {sorted(set(missing))}", step=6)
    return QuantizedModel(g, ann, qweights)


def quantize_model(g: Graph, calib_inputs, cfg: QuantConfig | None = None) -> PipelineResult:
    cfg = QuantConfig() if cfg is None else cfg
    wl_cfg = cfg.wl_config()
    problems = validate(g)
    if problems:
        raise PipelineError("invalid input graph: " + "; ".join(problems), step=0)
    res = PipelineResult(model=None)
    step = 0

    def tick(name, t0):
        res.timings[name] = time.perf_counter() - t0

    try:
        step, t0 = 1, time.perf_counter()
        g, reports = fuse_all(g)
        res.reports += reports
        tick("fuse", t0)

        step, t0 = 2, time.perf_counter()
        ann, wrec = assign_weight_params(g, wl_cfg)
        ann.bias_wl = cfg.wl_bias
        tick("quantize_weights", t0)

        step, t0 = 3, time.perf_counter()
        ann, arec = calibrate_activations(g, calib_inputs, wl_cfg, ann)
        res.calibration = wrec + arec
        tick("calibrate", t0)

        step, t0 = 4, time.perf_counter()
        g, ann, rep = eliminate_division(g, ann)
        res.reports.append(rep)
        tick("eliminate_division", t0)

        step, t0 = 5, time.perf_counter()
        ann, rep = adjust_fl(g, ann, cfg.add_strategy)
        res.reports.append(rep)
        tick("adjust_fl", t0)

        step, t0 = 6, time.perf_counter()
        res.model = finalize(g, ann, cfg.guard_bits)
        infer_shapes(res.model.graph)
        tick("quantize_outputs", t0)
    except PipelineError as e:
        if e.step is None:
            e.step = step
        raise
    except ConfigError:
        raise
    except FxEmuError as e:
        raise PipelineError(str(e), step=step) from e
    return res
