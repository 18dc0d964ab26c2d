"""Integer-domain executor with MAC overflow accounting.

Every node is evaluated on raw integers using add, sub, mul, shifts and
compares only.  Each format-defining node rescales its exact wide result to
the annotated output format (round half away from zero, then saturate).

``run_quantized_float`` is the second, independent route: it dequantizes,
computes in float64 and re-quantizes at each node.  While all intermediate
values fit in 53 bits the two routes agree bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calib import MAC_KINDS
from .errors import ConfigError, ContractViolation, ShapeError
from .fixedpoint import (
    MAX_WL,
    FixedScalar,
    QuantParams,
    clamp_array,
    dequantize_array,
    int_dtype_for,
    quantize_array,
    rescale_array,
)
from .graph import FL_TRANSPARENT, Graph, QuantAnnotation, topo_order
from .passes import AddStrategy, is_division_free
from .qtensor import FTensor, QTensor, as_ftensor, im2col, im2col_array
from .refexec import maxpool_arr, upsample_arr


@dataclass(frozen=True)
class AccumulatorSpec:
    acc_bits: int
    guard_bits: int | None = None

    def __post_init__(self):
        if not 2 <= self.acc_bits <= MAX_WL:
            raise ConfigError(f"accumulator width {self.acc_bits} outside [2, {MAX_WL}]")

    @classmethod
    def for_layer(cls, wl_in: int, wl_weight: int, guard_bits: int) -> "AccumulatorSpec":
        if guard_bits < 0:
            raise ConfigError(f"guard bits must be nonnegative, got {guard_bits}")
        return cls(wl_in + wl_weight + guard_bits, guard_bits)

    @property
    def lo(self) -> int:
        return -(1 << (self.acc_bits - 1))

    @property
    def hi(self) -> int:
        return (1 << (self.acc_bits - 1)) - 1


def required_bits(lo_val: int, hi_val: int) -> int:
    """Smallest signed width holding every value in [lo_val, hi_val]."""
    n = 2
    if hi_val > 0:
        n = max(n, int(hi_val).bit_length() + 1)
    if lo_val < 0:
        n = max(n, int(-lo_val - 1).bit_length() + 1)
    return n


@dataclass
class LayerOverflow:
    node_id: str
    acc_bits: int
    k: int
    macs: int = 0
    overflows: int = 0
    final_overflows: int = 0
    max_acc: int = 0
    min_acc: int = 0

    @property
    def max_abs(self) -> int:
        return max(abs(self.max_acc), abs(self.min_acc))

    @property
    def required_acc_bits(self) -> int:
        return required_bits(self.min_acc, self.max_acc)

    def merge(self, other: "LayerOverflow") -> None:
        self.macs += other.macs
        self.overflows += other.overflows
        self.final_overflows += other.final_overflows
        self.max_acc = max(self.max_acc, other.max_acc)
        self.min_acc = min(self.min_acc, other.min_acc)

    def as_dict(self):
        return {"node": self.node_id, "macs": self.macs, "overflows": self.overflows,
                "final_overflows": self.final_overflows, "max_abs_acc": self.max_abs,
                "acc_bits": self.acc_bits, "min_acc_bits": self.required_acc_bits}


@dataclass
class OverflowReport:
    layers: dict[str, LayerOverflow] = field(default_factory=dict)

    def add(self, rec: LayerOverflow) -> None:
        if rec.node_id in self.layers:
            self.layers[rec.node_id].merge(rec)
        else:
            self.layers[rec.node_id] = rec

    @property
    def total_overflows(self) -> int:
        return sum(r.overflows for r in self.layers.values())

    def records(self) -> list[dict]:
        return [r.as_dict() for r in self.layers.values()]

    def to_text(self) -> str:
        head = f"{'node':<16}{'MACs':>12}{'overflows':>12}{'max|acc|':>16}{'acc_bits':>10}{'min_bits':>10}"
        rows = [head, "-" * len(head)]
        for r in self.layers.values():
            rows.append(f"{r.node_id:<16}{r.macs:>12}{r.overflows:>12}{r.max_abs:>16}"
                        f"{r.acc_bits:>10}{r.required_acc_bits:>10}")
        return "\n".join(rows)


@dataclass
class QuantizedModel:
    """Graph after the full pipeline, its formats and integer weights."""

    graph: Graph
    ann: QuantAnnotation
    qweights: dict[str, QTensor]


@dataclass
class RunResult:
    output: FTensor
    report: OverflowReport | None = None
    raws: dict[str, QTensor] | None = None


# ---------------------------------------------------------------------------
# integer kernels


def _mac_dtype(k: int, wl_a: int, wl_b: int, wl_bias: int = 2):
    bound = k * (1 << (wl_a - 1)) * (1 << (wl_b - 1)) + (1 << (wl_bias - 1))
    return int_dtype_for(bound.bit_length() + 1)


def _count_overflows(w, cols, bias, spec: AccumulatorSpec, node_id, dtype,
                     chunk_elems: int = 1 << 22) -> LayerOverflow:
    """Walk partial sums bias + w[:, 0]x[0] + ... in order k = 0..K-1."""
    o, k = w.shape
    p = cols.shape[1]
    rec = LayerOverflow(node_id, spec.acc_bits, k)
    if p == 0 or o == 0 or k == 0:
        return rec
    step = max(1, chunk_elems // max(1, o * k))
    parts = []
    for start in range(0, p, step):
        c = cols[:, start:start + step]
        ps = np.cumsum(w[:, :, None] * c[None, :, :], axis=1)
        if bias is not None:
            ps = ps + bias[:, None, None]
        bad = (ps > spec.hi) | (ps < spec.lo)
        parts.append(LayerOverflow(node_id, spec.acc_bits, k, macs=int(ps.size),
                                   overflows=int(bad.sum()),
                                   final_overflows=int(bad[:, -1, :].sum()),
                                   max_acc=int(ps.max()), min_acc=int(ps.min())))
    rec = parts[0]
    for part in parts[1:]:
        rec.merge(part)
    return rec


def conv2d_int(cols: QTensor, w: QTensor, bias: QTensor | None, out_params: QuantParams,
               spec: AccumulatorSpec | None = None, node_id: str = "mac"):
    """Integer matrix multiply (O, K) x (K, P) with exact accumulation.

    Returns the (O, P) result in ``out_params`` and, when ``spec`` is given,
    a :class:`LayerOverflow` for the partial sums.
    """
    o = w.shape[0]
    wr = w.raw.reshape(o, -1)
    k = wr.shape[1]
    if cols.shape[0] != k:
        raise ShapeError(f"weight has {k} taps, columns have {cols.shape[0]}")
    fl_prod = cols.params.fl + w.params.fl
    wl_bias = 2
    b = None
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} != ({o},)")
        if bias.params.fl != fl_prod:
            raise ContractViolation(f"bias FL {bias.params.fl} != product FL {fl_prod}", node_id)
        wl_bias = bias.params.wl
    dtype = _mac_dtype(k, cols.params.wl, w.params.wl, wl_bias)
    wr = wr.astype(dtype)
    x = cols.raw.astype(dtype)
    if bias is not None:
        b = bias.raw.astype(dtype)
    acc = wr @ x
    if b is not None:
        acc = acc + b[:, None]
    out = QTensor(rescale_array(acc, fl_prod, out_params), out_params)
    rec = _count_overflows(wr, x, b, spec, node_id, dtype) if spec is not None else None
    return out, rec


def add_int(a: QTensor, b: QTensor, strategy, out_params: QuantParams, node_id="add") -> QTensor:
    strategy = AddStrategy(strategy)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
    if strategy is AddStrategy.MIN_FL:
        if a.params != b.params:
            raise ContractViolation(f"min-fl add needs equal formats, got {a.params} and {b.params}",
                                    node_id)
        fl = a.params.fl
        dtype = int_dtype_for(a.params.wl + 1)
        s = a.raw.astype(dtype) + b.raw.astype(dtype)
    else:
        fl = max(a.params.fl, b.params.fl)
        da, db = fl - a.params.fl, fl - b.params.fl
        dtype = int_dtype_for(max(a.params.wl + da, b.params.wl + db) + 1)
        s = (a.raw.astype(dtype) << da) + (b.raw.astype(dtype) << db)
    return QTensor(rescale_array(s, fl, out_params), out_params)


def concat_int(inputs: list[QTensor], axis: int = 1, node_id="concat") -> QTensor:
    p = inputs[0].params
    for q in inputs[1:]:
        if q.params != p:
            raise ContractViolation(f"concat inputs have formats {p} and {q.params}", node_id)
    return QTensor(np.concatenate([q.raw for q in inputs], axis=axis), p)


def mul_const_int(x: QTensor, c: FixedScalar, out_params: QuantParams) -> QTensor:
    dtype = int_dtype_for(x.params.wl + c.params.wl)
    prod = x.raw.astype(dtype) * c.raw
    return QTensor(rescale_array(prod, x.params.fl + c.params.fl, out_params), out_params)


def mul_int(a: QTensor, b: QTensor, out_params: QuantParams) -> QTensor:
    dtype = int_dtype_for(a.params.wl + b.params.wl)
    prod = a.raw.astype(dtype) * b.raw.astype(dtype)
    return QTensor(rescale_array(prod, a.params.fl + b.params.fl, out_params), out_params)


def leaky_relu_int(x: QTensor, slope: FixedScalar, out_params: QuantParams) -> QTensor:
    pos = rescale_array(x.raw, x.params.fl, out_params)
    dtype = int_dtype_for(x.params.wl + slope.params.wl)
    neg = rescale_array(x.raw.astype(dtype) * slope.raw, x.params.fl + slope.params.fl, out_params)
    return QTensor(np.where(x.raw >= 0, pos, neg), out_params)


def relu_int(x: QTensor) -> QTensor:
    return QTensor(np.maximum(x.raw, 0), x.params)


def hardswish_int(x: QTensor, sixth: FixedScalar, out_params: QuantParams) -> QTensor:
    """x * clamp(x + 3, 0, 6) * c with c ~ 1/6, all in integers."""
    fl_x = x.params.fl
    fl_t = max(fl_x, 0)
    wl_t = x.params.wl + (fl_t - fl_x) + 3
    dtype = int_dtype_for(x.params.wl + wl_t + sixth.params.wl)
    xr = x.raw.astype(dtype)
    t = clamp_array(xr << (fl_t - fl_x), -(3 << fl_t), 3 << fl_t) + (3 << fl_t)
    prod = xr * t * sixth.raw
    return QTensor(rescale_array(prod, fl_x + fl_t + sixth.params.fl, out_params), out_params)


def maxpool_int(x: QTensor, kernel, stride) -> QTensor:
    return QTensor(maxpool_arr(x.raw, kernel, stride), x.params)


def upsample_int(x: QTensor, scale: int) -> QTensor:
    return QTensor(upsample_arr(x.raw, scale), x.params)


def spatial_sum_int(x: QTensor, out_params: QuantParams) -> QTensor:
    _, _, h, w = x.shape
    dtype = int_dtype_for(x.params.wl + max(0, (h * w - 1).bit_length()))
    s = x.raw.astype(dtype).sum(axis=(2, 3), keepdims=True)
    return QTensor(rescale_array(s, x.params.fl, out_params), out_params)


def gap_sum_mul_int(x: QTensor, recip: FixedScalar, sum_params: QuantParams,
                    out_params: QuantParams) -> QTensor:
    return mul_const_int(spatial_sum_int(x, sum_params), recip, out_params)


# ---------------------------------------------------------------------------
# whole-graph execution


def check_ready(qm: QuantizedModel) -> None:
    """Raise ContractViolation unless the model went through the full pipeline."""
    g, ann = qm.graph, qm.ann
    for n in g.nodes:
        if not (ann.division_free.get(n.id, False) and is_division_free(n)):
            raise ContractViolation(f"{n.kind} node is not division free", n.id)
        for t in g.data_inputs(n) + [n.output]:
            if t not in ann.params:
                raise ContractViolation(f"tensor {t!r} has no format", n.id)
        if n.kind in MAC_KINDS:
            for t in n.inputs[1:]:
                if t not in qm.qweights:
                    raise ContractViolation(f"weight {t!r} is not quantized", n.id)
    for t in g.inputs:
        if t not in ann.params:
            raise ContractViolation(f"graph input {t!r} has no format")


def _const(n, prefix) -> FixedScalar:
    a = n.attrs
    return FixedScalar(a[f"{prefix}_raw"], QuantParams(a[f"{prefix}_wl"], a[f"{prefix}_fl"]))


def _mac_geometry(n, x_shape, w_shape):
    if n.kind == "Conv2D":
        return tuple(w_shape[2:]), tuple(n.attrs["stride"]), tuple(n.attrs["pad"])
    return None


def _eval_int(qm: QuantizedModel, n, env, guard, report):
    g, ann = qm.graph, qm.ann
    out_p = ann.params[n.output]
    data = [env[t] for t in g.data_inputs(n)]
    x = data[0]
    k = n.kind
    if k in FL_TRANSPARENT and k != "Concat" and x.params != out_p:
        raise ContractViolation(f"{k} would change format {x.params} -> {out_p}", n.id)
    if k in MAC_KINDS:
        w = qm.qweights[n.inputs[1]]
        b = qm.qweights[n.inputs[2]] if len(n.inputs) > 2 else None
        spec = None
        if guard is not None:
            gb = guard if isinstance(guard, int) and not isinstance(guard, bool) else ann.guard_bits.get(n.id, 0)
            spec = AccumulatorSpec.for_layer(x.params.wl, w.params.wl, gb)
        if k == "Conv2D":
            kernel, stride, pad = _mac_geometry(n, x.shape, w.shape)
            cols = im2col(x, kernel, stride, pad)
            res, rec = conv2d_int(cols, w, b, out_p, spec, n.id)
            nb, _, hh, ww = x.shape
            oh = (hh + 2 * pad[0] - kernel[0]) // stride[0] + 1
            ow = (ww + 2 * pad[1] - kernel[1]) // stride[1] + 1
            out = QTensor(res.raw.reshape(w.shape[0], nb, oh, ow).transpose(1, 0, 2, 3), out_p)
        else:
            cols = QTensor(x.raw.reshape(x.shape[0], -1).T, x.params)
            res, rec = conv2d_int(cols, w, b, out_p, spec, n.id)
            out = QTensor(res.raw.T, out_p)
        if rec is not None:
            report.add(rec)
        return out
    if k == "LeakyReLU":
        return leaky_relu_int(x, _const(n, "slope"), out_p)
    if k == "HardSwish":
        return hardswish_int(x, _const(n, "sixth"), out_p)
    if k == "ReLU":
        return relu_int(x)
    if k == "MaxPool2D":
        return maxpool_int(x, n.attrs["kernel"], n.attrs["stride"])
    if k == "Upsample":
        return upsample_int(x, n.attrs["scale"])
    if k == "Concat":
        res = concat_int(data, n.attrs["axis"], n.id)
        if res.params != out_p:
            raise ContractViolation(f"concat output format {out_p} != inputs {res.params}", n.id)
        return res
    if k == "ReduceSum":
        return spatial_sum_int(x, out_p)
    if k == "Mul":
        if len(data) == 2:
            return mul_int(data[0], data[1], out_p)
        return mul_const_int(x, _const(n, "const"), out_p)
    if k == "Add":
        return add_int(data[0], data[1], ann.add_strategy, out_p, n.id)
    raise ContractViolation(f"integer engine cannot run {k}", n.id)


def run_quantized(qm: QuantizedModel, x, detect: bool = False, guard_bits: int | None = None,
                  trace: bool = False) -> RunResult:
    """Run the integer path.

    ``detect`` turns on overflow accounting with each layer's annotated guard
    bits, or ``guard_bits`` for every layer when given.
    """
    check_ready(qm)
    g, ann = qm.graph, qm.ann
    (in_name,) = g.inputs
    guard = None
    if detect:
        guard = guard_bits if guard_bits is not None else True
    report = OverflowReport() if detect else None
    env = {in_name: QTensor(quantize_array(as_ftensor(x), ann.params[in_name]), ann.params[in_name])}
    for n in topo_order(g):
        env[n.output] = _eval_int(qm, n, env, guard, report)
    out_t = env[g.outputs[0]]
    y = dequantize_array(out_t.raw, out_t.params).astype(np.float32)
    return RunResult(y, report, env if trace else None)


# ---------------------------------------------------------------------------
# dequantize -> float64 -> re-quantize route


def _deq(q: QTensor) -> np.ndarray:
    return dequantize_array(q.raw, q.params)


def _req(v: np.ndarray, p: QuantParams) -> QTensor:
    return QTensor(quantize_array(v, p), p)


def _eval_float(qm: QuantizedModel, n, env):
    g, ann = qm.graph, qm.ann
    out_p = ann.params[n.output]
    data = [env[t] for t in g.data_inputs(n)]
    xs = [_deq(q) for q in data]
    x = xs[0]
    k = n.kind
    a = n.attrs
    if k in MAC_KINDS:
        w = _deq(qm.qweights[n.inputs[1]])
        b = _deq(qm.qweights[n.inputs[2]]) if len(n.inputs) > 2 else np.zeros(w.shape[0])
        if k == "Conv2D":
            o = w.shape[0]
            cols = im2col_array(x, w.shape[2:], tuple(a["stride"]), tuple(a["pad"]))
            y = w.reshape(o, -1) @ cols + b[:, None]
            nb, _, hh, ww = x.shape
            oh = (hh + 2 * a["pad"][0] - w.shape[2]) // a["stride"][0] + 1
            ow = (ww + 2 * a["pad"][1] - w.shape[3]) // a["stride"][1] + 1
            v = y.reshape(o, nb, oh, ow).transpose(1, 0, 2, 3)
        else:
            v = x.reshape(x.shape[0], -1) @ w.T + b[None, :]
    elif k == "LeakyReLU":
        slope = math.ldexp(a["slope_raw"], -a["slope_fl"])
        v = np.where(x >= 0, x, x * slope)
    elif k == "HardSwish":
        sixth = math.ldexp(a["sixth_raw"], -a["sixth_fl"])
        v = x * np.clip(x + 3.0, 0.0, 6.0) * sixth
    elif k == "ReLU":
        v = np.maximum(x, 0.0)
    elif k == "MaxPool2D":
        v = maxpool_arr(x, a["kernel"], a["stride"])
    elif k == "Upsample":
        v = upsample_arr(x, a["scale"])
    elif k == "Concat":
        v = np.concatenate(xs, axis=a["axis"])
    elif k == "ReduceSum":
        v = x.sum(axis=(2, 3), keepdims=True)
    elif k == "Mul":
        v = xs[0] * xs[1] if len(xs) == 2 else x * math.ldexp(a["const_raw"], -a["const_fl"])
    elif k == "Add":
        v = xs[0] + xs[1]
    else:
        raise ContractViolation(f"float route cannot run {k}", n.id)
    return _req(v, out_p)


def run_quantized_float(qm: QuantizedModel, x) -> dict[str, QTensor]:
    """Quantized-float route; returns every tensor as raw integers."""
    check_ready(qm)
    g, ann = qm.graph, qm.ann
    (in_name,) = g.inputs
    env = {in_name: _req(as_ftensor(x).astype(np.float64), ann.params[in_name])}
    for n in topo_order(g):
        env[n.output] = _eval_float(qm, n, env)
    return env
