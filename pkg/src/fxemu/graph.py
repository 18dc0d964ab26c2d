"""Layer-graph IR.

A :class:`Graph` is an SSA-style DAG: every tensor name is produced by one
node or declared as a graph input or a weight.  Weights live on the graph as
``float32`` arrays so passes can rewrite them in place of a separate store.
"""
from __future__ import annotations

import copy
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, ShapeError
from .fixedpoint import QuantParams
from .qtensor import conv_output_size

KINDS = (
    "Conv2D", "Linear", "BatchNorm2D", "LeakyReLU", "ReLU", "HardSwish",
    "MaxPool2D", "GlobalAvgPool", "Add", "Concat", "Mul", "Upsample",
    # produced by eliminate_division
    "ReduceSum",
)

# kinds that never change the fixed-point format of their data
FL_TRANSPARENT = frozenset({"MaxPool2D", "ReLU", "Upsample", "Concat"})

JOIN_KINDS = frozenset({"Add", "Concat"})

# attribute name -> predicate; missing keys are violations
_REQUIRED_ATTRS = {
    "Conv2D": {"stride": lambda v: len(v) == 2 and min(v) >= 1,
               "pad": lambda v: len(v) == 2 and min(v) >= 0},
    "BatchNorm2D": {"eps": lambda v: v > 0},
    "LeakyReLU": {"negative_slope": lambda v: 0 < v < 1},
    "MaxPool2D": {"kernel": lambda v: len(v) == 2 and min(v) >= 1,
                  "stride": lambda v: len(v) == 2 and min(v) >= 1},
    "Concat": {"axis": lambda v: isinstance(v, int)},
    "Upsample": {"scale": lambda v: isinstance(v, int) and v >= 1},
}

_ARITY = {
    "Conv2D": (2, 3), "Linear": (2, 3), "BatchNorm2D": (5, 5), "LeakyReLU": (1, 1),
    "ReLU": (1, 1), "HardSwish": (1, 1), "MaxPool2D": (1, 1), "GlobalAvgPool": (1, 1),
    "Add": (2, 2), "Concat": (1, None), "Mul": (1, 2), "Upsample": (1, 1),
    "ReduceSum": (1, 1),
}


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str]
    output: str
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown node kind {self.kind!r} (node {self.id!r})")
        self.inputs = list(self.inputs)


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, tuple[int, ...]]
    outputs: list[str]
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = {k: tuple(int(d) for d in v) for k, v in self.inputs.items()}
        self.outputs = list(self.outputs)
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in self.weights.items()}

    def copy(self) -> "Graph":
        return Graph(copy.deepcopy(self.nodes), dict(self.inputs), list(self.outputs),
                     {k: v.copy() for k, v in self.weights.items()})

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producers(self) -> dict[str, Node]:
        return {n.output: n for n in self.nodes}

    def consumers(self, tensor: str) -> list[Node]:
        return [n for n in self.nodes if tensor in n.inputs]

    def data_inputs(self, node: Node) -> list[str]:
        """Inputs that carry activations (i.e. are not weights)."""
        return [t for t in node.inputs if t not in self.weights]

    def count(self, kind: str) -> int:
        return sum(n.kind == kind for n in self.nodes)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.nodes == other.nodes and self.inputs == other.inputs
                and self.outputs == other.outputs
                and self.weights.keys() == other.weights.keys()
                and all(self.weights[k].shape == other.weights[k].shape
                        and np.array_equal(self.weights[k].view(np.uint32),
                                           other.weights[k].view(np.uint32))
                        for k in self.weights))


@dataclass
class QuantAnnotation:
    params: dict[str, QuantParams] = field(default_factory=dict)
    guard_bits: dict[str, int] = field(default_factory=dict)
    division_free: dict[str, bool] = field(default_factory=dict)
    add_strategy: str = "min-fl"
    bias_wl: int | None = None

    def copy(self) -> "QuantAnnotation":
        return QuantAnnotation(dict(self.params), dict(self.guard_bits),
                               dict(self.division_free), self.add_strategy, self.bias_wl)


def topo_order(g: Graph) -> list[Node]:
    available = set(g.inputs) | set(g.weights)
    prod = {}
    for n in g.nodes:
        if n.output in prod:
            raise GraphError(f"tensor {n.output!r} produced twice")
        prod[n.output] = n
    pending = {}
    users: dict[str, list[Node]] = {}
    for n in g.nodes:
        deps = {t for t in n.inputs if t not in available}
        for t in deps:
            if t not in prod:
                raise GraphError(f"node {n.id!r} consumes undefined tensor {t!r}")
            users.setdefault(t, []).append(n)
        pending[n.id] = len(deps)
    ready = [(n.id, n) for n in g.nodes if pending[n.id] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, n = heapq.heappop(ready)
        order.append(n)
        for u in users.get(n.output, []):
            pending[u.id] -= 1
            if pending[u.id] == 0:
                heapq.heappush(ready, (u.id, u))
    if len(order) != len(g.nodes):
        stuck = sorted(set(pending) - {n.id for n in order})
        raise GraphError(f"graph has a cycle through nodes {stuck}")
    return order


@dataclass(frozen=True)
class JoinPoint:
    node_id: str
    kind: str
    producers: tuple[str, ...]
    producer_tensors: tuple[str, ...]


def trace_producers(g: Graph, tensor: str, prod=None) -> list[tuple[str, str]]:
    """Nearest format-defining (producer id, tensor) pairs behind ``tensor``.

    Graph inputs report themselves as producer.
    """
    prod = g.producers() if prod is None else prod
    out: list[tuple[str, str]] = []
    stack = [tensor]
    seen = set()
    while stack:
        t = stack.pop()
        if t in seen:
            continue
        seen.add(t)
        n = prod.get(t)
        if n is None:
            out.append((t, t))
        elif n.kind in FL_TRANSPARENT:
            stack.extend(reversed(g.data_inputs(n)))
        else:
            out.append((n.id, t))
    return list(dict.fromkeys(out))


def find_join_points(g: Graph) -> list[JoinPoint]:
    prod = g.producers()
    joins = []
    for n in topo_order(g):
        if n.kind not in JOIN_KINDS:
            continue
        pairs = []
        for t in g.data_inputs(n):
            pairs.extend(trace_producers(g, t, prod))
        pairs = list(dict.fromkeys(pairs))
        joins.append(JoinPoint(n.id, n.kind, tuple(p for p, _ in pairs),
                               tuple(t for _, t in pairs)))
    return joins


def _spatial_pool(shape, kernel, stride):
    n, c, h, w = shape
    return (n, c, conv_output_size(h, kernel[0], stride[0], 0),
            conv_output_size(w, kernel[1], stride[1], 0))


def _node_shape(g: Graph, n: Node, shapes: dict) -> tuple[int, ...]:
    ins = [shapes[t] for t in n.inputs]
    x = ins[0]
    k = n.kind
    if k == "Conv2D":
        w = ins[1]
        if len(x) != 4 or len(w) != 4:
            raise ShapeError("Conv2D needs NCHW input and OIHW weight")
        if w[1] != x[1]:
            raise ShapeError(f"Conv2D weight expects {w[1]} channels, input has {x[1]}")
        if len(ins) == 3 and ins[2] != (w[0],):
            raise ShapeError("Conv2D bias length must equal output channels")
        st, pd = n.attrs["stride"], n.attrs["pad"]
        return (x[0], w[0], conv_output_size(x[2], w[2], st[0], pd[0]),
                conv_output_size(x[3], w[3], st[1], pd[1]))
    if k == "Linear":
        w = ins[1]
        feat = math.prod(x[1:])
        if len(w) != 2 or w[1] != feat:
            raise ShapeError(f"Linear weight {w} incompatible with {feat} features")
        if len(ins) == 3 and ins[2] != (w[0],):
            raise ShapeError("Linear bias length must equal output features")
        return (x[0], w[0])
    if k == "BatchNorm2D":
        if len(x) != 4 or any(s != (x[1],) for s in ins[1:]):
            raise ShapeError("BatchNorm2D parameters must have one entry per channel")
        return x
    if k in ("LeakyReLU", "ReLU", "HardSwish"):
        return x
    if k == "MaxPool2D":
        return _spatial_pool(x, n.attrs["kernel"], n.attrs["stride"])
    if k in ("GlobalAvgPool", "ReduceSum"):
        if len(x) != 4:
            raise ShapeError(f"{k} expects NCHW input")
        return (x[0], x[1], 1, 1)
    if k in ("Add", "Mul"):
        if len(ins) == 2 and ins[0] != ins[1]:
            raise ShapeError(f"{k} operands differ in shape: {ins[0]} vs {ins[1]}")
        return x
    if k == "Concat":
        axis = n.attrs["axis"]
        if not 0 <= axis < len(x):
            raise ShapeError(f"concat axis {axis} out of range")
        for s in ins[1:]:
            if len(s) != len(x) or any(a != b for i, (a, b) in enumerate(zip(s, x)) if i != axis):
                raise ShapeError(f"concat inputs {ins} mismatch off axis {axis}")
        out = list(x)
        out[axis] = sum(s[axis] for s in ins)
        return tuple(out)
    if k == "Upsample":
        s = n.attrs["scale"]
        return (x[0], x[1], x[2] * s, x[3] * s)
    raise GraphError(f"no shape rule for {k}")


def infer_shapes(g: Graph) -> dict[str, tuple[int, ...]]:
    shapes = dict(g.inputs)
    shapes.update({k: tuple(v.shape) for k, v in g.weights.items()})
    for n in topo_order(g):
        try:
            shapes[n.output] = tuple(int(d) for d in _node_shape(g, n, shapes))
        except (KeyError, IndexError, TypeError) as e:
            raise ShapeError(f"node {n.id!r}: bad attributes or inputs ({e})") from e
        except ShapeError as e:
            raise ShapeError(f"node {n.id!r}: {e}") from e
    return shapes


def validate(g: Graph) -> list[str]:
    """Return a list of violations; empty means the graph is well formed."""
    problems = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        problems.append("duplicate node ids")
    declared = set(g.inputs) | set(g.weights)
    produced = set()
    for n in g.nodes:
        if n.output in declared or n.output in produced:
            problems.append(f"tensor {n.output!r} defined more than once")
        produced.add(n.output)
    for n in g.nodes:
        lo, hi = _ARITY[n.kind]
        if len(n.inputs) < lo or (hi is not None and len(n.inputs) > hi):
            problems.append(f"node {n.id!r}: {n.kind} takes {lo}..{hi} inputs, got {len(n.inputs)}")
        for name, ok in _REQUIRED_ATTRS.get(n.kind, {}).items():
            if name not in n.attrs:
                problems.append(f"node {n.id!r}: missing attribute {name!r}")
            else:
                try:
                    good = ok(n.attrs[name])
                except TypeError:
                    good = False
                if not good:
                    problems.append(f"node {n.id!r}: invalid {name}={n.attrs[name]!r}")
        for t in n.inputs:
            if t not in declared and t not in produced:
                problems.append(f"node {n.id!r} consumes undefined tensor {t!r}")
    for t in g.outputs:
        if t not in produced and t not in g.inputs:
            problems.append(f"graph output {t!r} is never produced")
    if problems:
        return problems
    try:
        infer_shapes(g)
    except (ShapeError, GraphError) as e:
        problems.append(str(e))
    return problems
