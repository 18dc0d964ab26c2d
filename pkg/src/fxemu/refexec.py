"""FP32 reference executor.

Accepts graphs before and after the rewrite passes: BatchNorm, GAP and
HardSwish are evaluated with true division, and the quantized constants that
``eliminate_division`` attaches to nodes are ignored in favour of the original
float attributes.  Convolutions and linear layers accumulate in ``float32`` in a
fixed order (bias first, then k = 0..K-1), so results are reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .graph import Graph, Node, topo_order
from .qtensor import as_ftensor, im2col_array

F32 = np.float32


def _mac_f32(w: np.ndarray, cols: np.ndarray, bias) -> np.ndarray:
    """(O, K) x (K, P) with sequential float32 accumulation."""
    o, k = w.shape
    acc = np.zeros((o, cols.shape[1]), dtype=F32)
    if bias is not None:
        acc += bias.astype(F32)[:, None]
    for j in range(k):
        acc += w[:, j:j + 1] * cols[j:j + 1, :]
    return acc


def conv2d_f32(x, w, b, stride, pad):
    n = x.shape[0]
    o, c, kh, kw = w.shape
    cols = im2col_array(x.astype(F32), (kh, kw), tuple(stride), tuple(pad))
    acc = _mac_f32(w.reshape(o, -1).astype(F32), cols, b)
    p = cols.shape[1] // n
    oh = (x.shape[2] + 2 * pad[0] - kh) // stride[0] + 1
    ow = p // oh
    return acc.reshape(o, n, oh, ow).transpose(1, 0, 2, 3)


def linear_f32(x, w, b):
    n = x.shape[0]
    flat = x.reshape(n, -1).astype(F32)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} features, got {flat.shape[1]}")
    return _mac_f32(w.astype(F32), flat.T, b).T


def maxpool_arr(x, kernel, stride):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = None
    for i in range(kh):
        for j in range(kw):
            win = x[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
            out = win.copy() if out is None else np.maximum(out, win)
    return out


def upsample_arr(x, scale):
    return x.repeat(scale, axis=2).repeat(scale, axis=3)


def _eval_node(g: Graph, n: Node, env: dict) -> np.ndarray:
    ins = [env[t] if t in env else g.weights[t] for t in n.inputs]
    x = ins[0]
    k = n.kind
    if k == "Conv2D":
        return conv2d_f32(x, ins[1], ins[2] if len(ins) > 2 else None,
                          n.attrs["stride"], n.attrs["pad"])
    if k == "Linear":
        return linear_f32(x, ins[1], ins[2] if len(ins) > 2 else None)
    if k == "BatchNorm2D":
        gamma, beta, mean, var = (a.astype(F32)[None, :, None, None] for a in ins[1:])
        return (x - mean) / np.sqrt(var + F32(n.attrs["eps"])) * gamma + beta
    if k == "LeakyReLU":
        return np.where(x >= 0, x, x * F32(n.attrs["negative_slope"]))
    if k == "ReLU":
        return np.maximum(x, F32(0))
    if k == "HardSwish":
        return x * np.clip(x + F32(3), F32(0), F32(6)) / F32(6)
    if k == "MaxPool2D":
        return maxpool_arr(x, n.attrs["kernel"], n.attrs["stride"])
    if k == "GlobalAvgPool":
        return x.mean(axis=(2, 3), keepdims=True, dtype=F32)
    if k == "ReduceSum":
        return x.sum(axis=(2, 3), keepdims=True, dtype=F32)
    if k == "Add":
        return x + ins[1]
    if k == "Mul":
        if len(ins) == 2:
            return x * ins[1]
        return x * F32(n.attrs["value"])
    if k == "Concat":
        return np.concatenate(ins, axis=n.attrs["axis"])
    if k == "Upsample":
        return upsample_arr(x, n.attrs["scale"])
    raise GraphError(f"refexec cannot evaluate {k}")


def run_fp32(g: Graph, x, weights: dict | None = None, record: bool = False):
    """Evaluate ``g`` on a single-input graph.

    Returns the first graph output, or with ``record=True`` the dict of every
    tensor computed.
    """
    if weights is not None:
        g = Graph(g.nodes, g.inputs, g.outputs, weights)
    missing = {t for n in g.nodes for t in n.inputs} - set(g.weights) - {n.output for n in g.nodes} - set(g.inputs)
    if missing:
        raise GraphError(f"missing weights: {sorted(missing)}")
    if len(g.inputs) != 1:
        raise GraphError("run_fp32 supports single-input graphs")
    (in_name, in_shape), = g.inputs.items()
    x = as_ftensor(x)
    if x.shape[1:] != in_shape[1:]:
        raise ShapeError(f"input shape {x.shape} incompatible with declared {in_shape}")
    env = {in_name: x}
    for n in topo_order(g):
        env[n.output] = np.asarray(_eval_node(g, n, env), dtype=F32)
    if record:
        return env
    return env[g.outputs[0]]


@dataclass(frozen=True)
class Comparison:
    max_abs_diff: float
    mse: float
    argmax_agreement: float

    def as_dict(self):
        return {"max_abs_diff": self.max_abs_diff, "mse": self.mse,
                "argmax_agreement": self.argmax_agreement}


def compare(a, b) -> Comparison:
    """Max abs difference, mean squared difference and argmax agreement.

    Argmax agreement is the fraction of rows (leading axis) whose argmax over
    the remaining elements matches; 1.0 means every row agrees.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    d = a - b
    if a.ndim >= 2:
        ra, rb = a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)
        agree = float(np.mean(ra.argmax(axis=1) == rb.argmax(axis=1)))
    else:
        agree = float(a.argmax() == b.argmax()) if a.size else 1.0
    return Comparison(float(np.max(np.abs(d))) if d.size else 0.0,
                      float(np.mean(d * d)) if d.size else 0.0, agree)
