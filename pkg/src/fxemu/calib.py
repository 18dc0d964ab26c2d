"""Max-abs calibration: picks one QuantParams per tensor.

Roles and their formats:

* weight      conv/linear kernels, WL ``cfg.weight``, FL from the weight values
* bias        derived, FL = FL(input) + FL(weight) so the bias lands in the
              accumulator scale; WL ``cfg.bias`` or the product width
* activation  every format-defining tensor, WL ``cfg.activation``
* internal    a tensor read or written by LeakyReLU/HardSwish: activation
              format widened by ``cfg.act_offset`` bits of WL *and* FL.
              Widening the output too avoids rounding twice (once into the
              wide input, again into a narrow output).

Tensors behind format-transparent nodes (max-pool, ReLU, upsample, concat)
and the wide sums made by GAP replacement are derived, never calibrated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .fixedpoint import MAX_WL, QuantParams, round_half_away
from .graph import FL_TRANSPARENT, Graph, QuantAnnotation, infer_shapes, topo_order
from .refexec import run_fp32

ACTIVATION_KINDS = frozenset({"LeakyReLU", "HardSwish"})
MAC_KINDS = frozenset({"Conv2D", "Linear"})


@dataclass(frozen=True)
class WLConfig:
    weight: int = 12
    activation: int | None = None
    bias: int | None = None
    act_offset: int = 0

    def __post_init__(self):
        if self.activation is None:
            object.__setattr__(self, "activation", self.weight)
        for name in ("weight", "activation"):
            v = getattr(self, name)
            if not 2 <= v <= MAX_WL:
                raise ConfigError(f"{name} WL {v} outside [2, {MAX_WL}]")
        if self.bias is not None and not 2 <= self.bias <= MAX_WL:
            raise ConfigError(f"bias WL {self.bias} outside [2, {MAX_WL}]")
        if self.act_offset < 0 or self.activation + self.act_offset > MAX_WL:
            raise ConfigError(f"activation offset {self.act_offset} invalid")

    @property
    def internal(self) -> int:
        return self.activation + self.act_offset


@dataclass(frozen=True)
class CalibRecord:
    tensor: str
    max_abs: float
    params: QuantParams
    role: str

    def as_dict(self):
        return {"tensor": self.tensor, "max_abs": self.max_abs, "wl": self.params.wl,
                "fl": self.params.fl, "role": self.role}


def _fits(max_abs: float, wl: int, fl: int) -> bool:
    try:
        scaled = math.ldexp(max_abs, fl)
    except OverflowError:
        return False
    return round_half_away(scaled) <= (1 << (wl - 1)) - 1


def choose_fl(max_abs: float, wl: int) -> QuantParams:
    """Largest FL for which ``max_abs`` quantizes without saturating."""
    if not math.isfinite(max_abs) or max_abs < 0:
        raise DomainError(f"max_abs must be finite and nonnegative, got {max_abs!r}")
    QuantParams(wl, 0)  # validates wl
    if max_abs == 0:
        return QuantParams(wl, wl - 1)
    _, e = math.frexp(max_abs)
    fl = wl - 1 - e
    while not _fits(max_abs, wl, fl):
        fl -= 1
    while _fits(max_abs, wl, fl + 1):
        fl += 1
    return QuantParams(wl, fl)


def _ceil_log2(n: int) -> int:
    return max(0, (n - 1).bit_length())


def mac_weights(g: Graph) -> tuple[set[str], set[str]]:
    """Names of conv/linear kernels and biases."""
    kernels, biases = set(), set()
    for n in g.nodes:
        if n.kind in MAC_KINDS:
            kernels.add(n.inputs[1])
            if len(n.inputs) > 2:
                biases.add(n.inputs[2])
    return kernels, biases


def assign_weight_params(g: Graph, cfg: WLConfig, ann: QuantAnnotation | None = None):
    ann = QuantAnnotation() if ann is None else ann
    records = []
    kernels, _ = mac_weights(g)
    for name in sorted(kernels):
        m = float(np.max(np.abs(g.weights[name]))) if g.weights[name].size else 0.0
        p = choose_fl(m, cfg.weight)
        ann.params[name] = p
        records.append(CalibRecord(name, m, p, "weight"))
    return ann, records


def derive_params(g: Graph, ann: QuantAnnotation, bias_wl: int | None = None) -> None:
    """Fill in formats that follow from other formats (in place)."""
    shapes = None
    for n in topo_order(g):
        data = g.data_inputs(n)
        if n.kind in FL_TRANSPARENT:
            ps = [ann.params[t] for t in data if t in ann.params]
            if len(ps) != len(data):
                continue
            if all(p == ps[0] for p in ps):
                ann.params[n.output] = ps[0]
            else:
                ann.params[n.output] = QuantParams(max(p.wl for p in ps), min(p.fl for p in ps))
        elif n.kind == "ReduceSum":
            if data[0] not in ann.params:
                continue
            shapes = infer_shapes(g) if shapes is None else shapes
            _, _, h, w = shapes[data[0]]
            p = ann.params[data[0]]
            wl = p.wl + _ceil_log2(h * w)
            if wl > MAX_WL:
                raise ConfigError(f"spatial sum at node {n.id!r} needs {wl} bits")
            ann.params[n.output] = QuantParams(wl, p.fl)
        elif n.kind in MAC_KINDS and len(n.inputs) > 2:
            x, w, b = n.inputs[:3]
            if x not in ann.params or w not in ann.params:
                continue
            px, pw = ann.params[x], ann.params[w]
            wl = bias_wl if bias_wl is not None else min(MAX_WL, px.wl + pw.wl - 1)
            ann.params[b] = QuantParams(wl, px.fl + pw.fl)


def collect_max_abs(g: Graph, calib_inputs) -> dict[str, float]:
    calib_inputs = list(calib_inputs)
    if not calib_inputs:
        raise ConfigError("calibration set is empty")
    stats: dict[str, float] = {}
    for x in calib_inputs:
        with np.errstate(all="ignore"):
            env = run_fp32(g, x, record=True)
        for name, v in env.items():
            if not np.all(np.isfinite(v)):
                raise DomainError(f"non-finite activation observed in tensor {name!r}")
            m = float(np.max(np.abs(v))) if v.size else 0.0
            stats[name] = max(stats.get(name, 0.0), m)
    return stats


def calibrate_activations(g: Graph, calib_inputs, cfg: WLConfig,
                          ann: QuantAnnotation | None = None):
    ann = QuantAnnotation() if ann is None else ann
    stats = collect_max_abs(g, calib_inputs)
    prod = g.producers()
    internal = {t for n in g.nodes if n.kind in ACTIVATION_KINDS for t in g.data_inputs(n) + [n.output]}
    records = []
    names = list(g.inputs) + [n.output for n in topo_order(g)]
    for name in names:
        node = prod.get(name)
        if node is not None and (node.kind in FL_TRANSPARENT or node.kind == "ReduceSum"):
            continue
        m = stats[name]
        p = choose_fl(m, cfg.activation)
        role = "activation"
        if name in internal and cfg.act_offset:
            p = QuantParams(cfg.internal, p.fl + cfg.act_offset)
            role = "internal"
        ann.params[name] = p
        records.append(CalibRecord(name, m, p, role))
    derive_params(g, ann, cfg.bias)
    return ann, records


def calibrate(g: Graph, calib_inputs, cfg: WLConfig):
    """Weight formats from the weights, activation formats from a float pass."""
    ann, wrec = assign_weight_params(g, cfg)
    ann.bias_wl = cfg.bias
    ann, arec = calibrate_activations(g, calib_inputs, cfg, ann)
    return ann, wrec + arec
