"""Graph rewrites that make a float model exactly emulatable in integers.

* ``distribute_bn_over_concat`` splits a BatchNorm that follows a channel
  concat into one BatchNorm per branch, so each can be folded.
* ``fuse_conv_bn`` folds BatchNorm into the preceding convolution.
* ``eliminate_division`` rewrites GAP, HardSwish and LeakyReLU so that they
  need no division.
* ``adjust_fl`` aligns formats at Add/Concat joins.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .calib import choose_fl, derive_params
from .errors import GraphError, PipelineError
from .fixedpoint import QuantParams, quantize
from .graph import (
    Graph,
    Node,
    QuantAnnotation,
    find_join_points,
    infer_shapes,
    topo_order,
)

# kinds an integer-only datapath can run as-is
DIVISION_FREE_KINDS = frozenset({
    "Conv2D", "Linear", "ReLU", "MaxPool2D", "Add", "Concat", "Upsample", "ReduceSum",
})


class AddStrategy(str, enum.Enum):
    MIN_FL = "min-fl"
    ALIGN_MAX = "align-max"


@dataclass
class PassReport:
    name: str
    removed: list[str] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    fl_changes: dict[str, tuple[str, str]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def fired(self) -> bool:
        return bool(self.removed or self.added or self.modified or self.fl_changes)

    def as_dict(self):
        return {"pass": self.name, "removed": self.removed, "added": self.added,
                "modified": self.modified,
                "fl_changes": {k: list(v) for k, v in self.fl_changes.items()},
                "warnings": self.warnings}

    def to_text(self) -> str:
        lines = [f"[{self.name}] removed={len(self.removed)} added={len(self.added)} "
                 f"modified={len(self.modified)} fl_changes={len(self.fl_changes)}"]
        for label, items in (("removed", self.removed), ("added", self.added),
                             ("modified", self.modified)):
            if items:
                lines.append(f"  {label}: {', '.join(items)}")
        for t, (old, new) in self.fl_changes.items():
            lines.append(f"  {t}: {old} -> {new}")
        for w in self.warnings:
            lines.append(f"  warning: {w}")
        return "\n".join(lines)


def _drop_unused_weights(g: Graph, names) -> None:
    used = {t for n in g.nodes for t in n.inputs}
    for name in names:
        if name not in used:
            g.weights.pop(name, None)


def _sole_consumer(g: Graph, tensor: str, node: Node) -> bool:
    return tensor not in g.outputs and [c.id for c in g.consumers(tensor)] == [node.id]


def fuse_conv_bn(g: Graph) -> tuple[Graph, PassReport]:
    g = g.copy()
    report = PassReport("fuse_conv_bn")
    prod = g.producers()
    for bn in [n for n in g.nodes if n.kind == "BatchNorm2D"]:
        conv = prod.get(bn.inputs[0])
        if conv is None or conv.kind != "Conv2D" or not _sole_consumer(g, conv.output, bn):
            report.warnings.append(f"BatchNorm {bn.id!r} has no exclusive conv producer; left intact")
            continue
        gamma, beta, mean, var = (g.weights[t].astype(np.float64) for t in bn.inputs[1:])
        scale = gamma / np.sqrt(var + float(bn.attrs["eps"]))
        w_name = conv.inputs[1]
        w = g.weights[w_name].astype(np.float64)
        b = g.weights[conv.inputs[2]].astype(np.float64) if len(conv.inputs) > 2 else np.zeros(w.shape[0])
        # private copies when a kernel/bias is shared with another node
        if sum(w_name in n.inputs for n in g.nodes) > 1:
            w_name = f"{conv.id}.weight.fused"
        b_name = conv.inputs[2] if len(conv.inputs) > 2 else f"{conv.id}.bias"
        if len(conv.inputs) > 2 and sum(b_name in n.inputs for n in g.nodes) > 1:
            b_name = f"{conv.id}.bias.fused"
        g.weights[w_name] = (w * scale[:, None, None, None]).astype(np.float32)
        g.weights[b_name] = ((b - mean) * scale + beta).astype(np.float32)
        conv.inputs = [conv.inputs[0], w_name, b_name]
        conv.output = bn.output
        g.nodes.remove(bn)
        _drop_unused_weights(g, bn.inputs[1:])
        report.removed.append(bn.id)
        report.modified.append(conv.id)
        prod = g.producers()
    g.nodes = topo_order(g)
    return g, report


def distribute_bn_over_concat(g: Graph) -> tuple[Graph, PassReport]:
    g = g.copy()
    report = PassReport("distribute_bn_over_concat")
    shapes = infer_shapes(g)
    prod = g.producers()
    for bn in [n for n in g.nodes if n.kind == "BatchNorm2D"]:
        cat = prod.get(bn.inputs[0])
        if cat is None or cat.kind != "Concat":
            continue
        if cat.attrs["axis"] != 1:
            report.warnings.append(f"BatchNorm {bn.id!r} follows a non-channel concat; left intact")
            continue
        if not _sole_consumer(g, cat.output, bn):
            report.warnings.append(f"concat {cat.id!r} output has other users; BatchNorm {bn.id!r} left intact")
            continue
        widths = [shapes[t][1] for t in cat.inputs]
        channels = g.weights[bn.inputs[1]].shape[0]
        if sum(widths) != channels:
            raise GraphError(f"concat {cat.id!r} branch widths {widths} do not sum to "
                             f"BatchNorm {bn.id!r} channel count {channels}")
        params = [g.weights[t] for t in bn.inputs[1:]]
        new_inputs = []
        start = 0
        for i, (branch, width) in enumerate(zip(cat.inputs, widths)):
            nid = f"{bn.id}.{i}"
            names = []
            for pname, arr in zip(("gamma", "beta", "mean", "var"), params):
                wname = f"{nid}.{pname}"
                g.weights[wname] = arr[start:start + width].copy()
                names.append(wname)
            out = f"{nid}.out"
            g.nodes.append(Node(nid, "BatchNorm2D", [branch] + names, out, dict(bn.attrs)))
            new_inputs.append(out)
            report.added.append(nid)
            start += width
        cat.inputs = new_inputs
        cat.output = bn.output
        g.nodes.remove(bn)
        _drop_unused_weights(g, bn.inputs[1:])
        report.removed.append(bn.id)
        report.modified.append(cat.id)
        prod = g.producers()
    g.nodes = topo_order(g)
    return g, report


def fuse_all(g: Graph) -> tuple[Graph, list[PassReport]]:
    g, r1 = distribute_bn_over_concat(g)
    g, r2 = fuse_conv_bn(g)
    return g, [r1, r2]


def gap_constant(area: int, wl: int) -> tuple[float, QuantParams]:
    """The reciprocal of ``area`` and the format it is quantized in."""
    value = 1.0 / area
    return value, choose_fl(value, wl)


def sixth_params(wl: int) -> QuantParams:
    return QuantParams(wl, wl - 1)


def is_division_free(n: Node) -> bool:
    if n.kind in DIVISION_FREE_KINDS:
        return True
    if n.kind == "Mul":
        return len(n.inputs) == 2 or "const_raw" in n.attrs
    if n.kind == "LeakyReLU":
        return "slope_raw" in n.attrs
    if n.kind == "HardSwish":
        return "sixth_raw" in n.attrs
    return False


def eliminate_division(g: Graph, ann: QuantAnnotation | None = None,
                       default_wl: int = 16) -> tuple[Graph, QuantAnnotation, PassReport]:
    """Make every node realizable with integer add/sub/mul.

    Constants are quantized at the WL of the tensor they multiply
    (``default_wl`` when the graph carries no annotation yet).
    """
    g = g.copy()
    ann = QuantAnnotation() if ann is None else ann.copy()
    report = PassReport("eliminate_division")
    shapes = infer_shapes(g)

    def wl_of(t):
        return ann.params[t].wl if t in ann.params else default_wl

    new_nodes = []
    for n in g.nodes:
        x = n.inputs[0]
        if n.kind == "GlobalAvgPool":
            _, _, h, w = shapes[x]
            value, cp = gap_constant(h * w, wl_of(x))
            sum_out = f"{n.output}.sum"
            s = Node(f"{n.id}.sum", "ReduceSum", [x], sum_out)
            m = Node(n.id, "Mul", [sum_out], n.output,
                     {"value": value, "const_raw": quantize(value, cp).raw,
                      "const_wl": cp.wl, "const_fl": cp.fl})
            new_nodes += [s, m]
            report.added.append(s.id)
            report.modified.append(n.id)
            continue
        if n.kind == "HardSwish" and "sixth_raw" not in n.attrs:
            cp = sixth_params(wl_of(x))
            n.attrs.update(sixth_raw=quantize(1.0 / 6.0, cp).raw, sixth_wl=cp.wl, sixth_fl=cp.fl)
            report.modified.append(n.id)
        elif n.kind == "LeakyReLU" and "slope_raw" not in n.attrs:
            slope = float(n.attrs["negative_slope"])
            cp = choose_fl(slope, wl_of(x))
            n.attrs.update(slope_raw=quantize(slope, cp).raw, slope_wl=cp.wl, slope_fl=cp.fl)
            report.modified.append(n.id)
        elif n.kind == "BatchNorm2D":
            raise PipelineError("BatchNorm divides by sqrt(var + eps) and could not be fused",
                                node_id=n.id, step=4)
        elif not is_division_free(n):
            raise PipelineError(f"{n.kind} has no division-free replacement", node_id=n.id, step=4)
        new_nodes.append(n)
    g.nodes = new_nodes
    g.nodes = topo_order(g)
    for n in g.nodes:
        ann.division_free[n.id] = is_division_free(n)
    if ann.params:
        derive_params(g, ann, ann.bias_wl)
    return g, ann, report


def adjust_fl(g: Graph, ann: QuantAnnotation,
              strategy: AddStrategy | str = AddStrategy.MIN_FL) -> tuple[QuantAnnotation, PassReport]:
    """Align formats at every Add/Concat until nothing changes.

    Concat (and Add under MIN_FL): every producer gets the smallest FL among
    them; WL is widened to the largest so that the inputs share one format.
    Add output: FL lowered to that minimum as well, which is where ALIGN_MAX
    returns after adding at the largest FL.
    """
    strategy = AddStrategy(strategy)
    before = dict(ann.params)
    ann = ann.copy()
    ann.add_strategy = strategy.value
    report = PassReport("adjust_fl")
    joins = find_join_points(g)
    for jp in joins:
        if not jp.producer_tensors:
            raise GraphError(f"join {jp.node_id!r} has no producers")
        missing = [t for t in jp.producer_tensors if t not in ann.params]
        if missing:
            raise GraphError(f"join {jp.node_id!r}: producers {missing} have no format")
    changed = True
    while changed:
        changed = False
        for jp in joins:
            ps = [ann.params[t] for t in jp.producer_tensors]
            fl_min = min(p.fl for p in ps)
            wl_max = max(p.wl for p in ps)
            if jp.kind == "Concat" or strategy is AddStrategy.MIN_FL:
                target = QuantParams(wl_max, fl_min)
                for t in jp.producer_tensors:
                    if ann.params[t] != target:
                        ann.params[t] = target
                        changed = True
            if jp.kind == "Add":
                out = g.node(jp.node_id).output
                cur = ann.params[out]
                if cur.fl > fl_min:
                    ann.params[out] = QuantParams(cur.wl, fl_min)
                    changed = True
        derive_params(g, ann, ann.bias_wl)
    for t, p in ann.params.items():
        if before.get(t) != p:
            report.fl_changes[t] = (str(before.get(t)), str(p))
    return ann, report
