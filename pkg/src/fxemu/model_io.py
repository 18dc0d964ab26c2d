"""On-disk formats and the built-in fixture models.

A model is a directory::

    manifest.json   graph topology, node attributes, weight index
    weights.bin     float32 little-endian weights, packed in index order

A quantized model adds::

    qparams.bin     one (wl, fl) pair of little-endian int16 per entry of
                    manifest["quant"]["params"], in that order
    qweights.bin    little-endian raws, packed in the order of
                    manifest["quant"]["qweights"]; int32 unless the entry's
                    "dtype" says "<i8" (tensors wider than 32 bits)

Calibration / evaluation tensors are plain ``.npy`` files holding a float32
NCHW batch.  The full field-by-field layout is documented in FORMAT.md.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .engine import QuantizedModel
from .errors import (
    BlobIndexError,
    ConfigError,
    DomainError,
    GraphError,
    ManifestError,
    RangeValidationError,
    VersionError,
)
from .fixedpoint import QuantParams
from .graph import KINDS, Graph, Node, QuantAnnotation, validate
from .qtensor import QTensor

FORMAT = "fxemu-model"
QFORMAT = "fxemu-qmodel"
VERSION = 1

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
QPARAMS = "qparams.bin"
QWEIGHTS = "qweights.bin"

F32LE = np.dtype("<f4")
I32LE = np.dtype("<i4")
I16LE = np.dtype("<i2")
I64LE = np.dtype("<i8")


def _pack(arrays: dict[str, np.ndarray], dtype, wide: set[str] = frozenset()) -> tuple[list[dict], bytes]:
    """Concatenate arrays; names in ``wide`` are written as int64 and tagged."""
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        dt = I64LE if name in wide else dtype
        data = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entry = {"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        if name in wide:
            entry["dtype"] = dt.str
        index.append(entry)
        chunks.append(data)
        offset += len(data)
    return index, b"".join(chunks)


def _unpack(index, blob: bytes, dtype, what: str) -> dict[str, np.ndarray]:
    out = {}
    expected = 0
    for entry in index:
        try:
            name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
            offset, count = int(entry["offset"]), int(entry["count"])
            dt = np.dtype(entry["dtype"]) if "dtype" in entry else dtype
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"malformed {what} index entry {entry!r}") from e
        if dt not in (dtype, I64LE) or (dt == I64LE and dtype.kind != "i"):
            raise ManifestError(f"{what} {name!r}: unsupported dtype {dt.str}")
        if math.prod(shape) != count:
            raise BlobIndexError(f"{what} {name!r}: shape {shape} does not hold {count} values")
        end = offset + count * dt.itemsize
        if offset != expected or end > len(blob):
            raise BlobIndexError(f"{what} {name!r}: bytes [{offset}, {end}) not in blob of "
                                 f"{len(blob)} bytes at expected offset {expected}")
        out[name] = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(shape)
        expected = end
    if expected != len(blob):
        raise BlobIndexError(f"{what} blob has {len(blob) - expected} trailing bytes")
    return out


def graph_to_manifest(g: Graph) -> dict:
    return {
        "inputs": [{"name": k, "shape": list(v)} for k, v in g.inputs.items()],
        "outputs": list(g.outputs),
        "nodes": [{"id": n.id, "kind": n.kind, "inputs": list(n.inputs), "output": n.output,
                   "attrs": n.attrs} for n in g.nodes],
    }


def _graph_from_manifest(doc: dict, weights: dict) -> Graph:
    try:
        gdoc = doc["graph"]
        nodes = []
        for nd in gdoc["nodes"]:
            if nd["kind"] not in KINDS:
                raise ManifestError(f"unknown node kind {nd['kind']!r} (node {nd.get('id')!r})")
            nodes.append(Node(nd["id"], nd["kind"], nd["inputs"], nd["output"], dict(nd.get("attrs", {}))))
        inputs = {e["name"]: tuple(e["shape"]) for e in gdoc["inputs"]}
        g = Graph(nodes, inputs, gdoc["outputs"], {k: v.copy() for k, v in weights.items()})
    except (KeyError, TypeError) as e:
        raise ManifestError(f"malformed graph section: {e!r}") from e
    except GraphError as e:
        raise ManifestError(str(e)) from e
    referenced = {t for n in g.nodes for t in n.inputs}
    produced = {n.output for n in g.nodes} | set(g.inputs)
    missing = referenced - produced - set(g.weights)
    if missing:
        raise BlobIndexError(f"graph references weights missing from the blob: {sorted(missing)}")
    problems = validate(g)
    if problems:
        raise ManifestError("invalid graph: " + "; ".join(problems))
    return g


def _read_manifest(path: Path, fmt: str) -> dict:
    try:
        doc = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as e:
        raise ManifestError(f"no {MANIFEST} in {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{MANIFEST} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "version" not in doc or "format" not in doc:
        raise ManifestError("manifest lacks format/version fields")
    if doc["format"] != fmt:
        raise VersionError(f"expected format {fmt!r}, found {doc['format']!r}")
    if doc["version"] != VERSION:
        raise VersionError(f"unsupported version {doc['version']!r} (this reader handles {VERSION})")
    return doc


def _write_manifest(path: Path, doc: dict) -> None:
    (path / MANIFEST).write_text(json.dumps(doc, indent=2) + "\n")


def _read_blob(path: Path, name: str) -> bytes:
    try:
        return (path / name).read_bytes()
    except FileNotFoundError as e:
        raise BlobIndexError(f"missing blob {name} in {path}") from e


def save_model(g: Graph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, blob = _pack(g.weights, F32LE)
    _write_manifest(path, {"format": FORMAT, "version": VERSION, "graph": graph_to_manifest(g),
                           "weights": index})
    (path / WEIGHTS).write_bytes(blob)
    return path


def load_model(path) -> Graph:
    path = Path(path)
    doc = _read_manifest(path, FORMAT)
    if "weights" not in doc:
        raise ManifestError("manifest lacks weight index")
    weights = _unpack(doc["weights"], _read_blob(path, WEIGHTS), F32LE, "weight")
    return _graph_from_manifest(doc, weights)


def export_quantized(qm: QuantizedModel, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g, ann = qm.graph, qm.ann
    names = list(ann.params)
    table = np.array([[ann.params[t].wl, ann.params[t].fl] for t in names], dtype=np.int64).reshape(-1, 2)
    if table.size and (table.min() < -(1 << 15) or table.max() >= (1 << 15)):
        raise ConfigError("a format does not fit the int16 params table")
    wide = {name for name, q in qm.qweights.items() if q.params.wl > 32}
    windex, wblob = _pack(g.weights, F32LE)
    qindex, qblob = _pack({k: v.raw for k, v in qm.qweights.items()}, I32LE, wide)
    doc = {
        "format": QFORMAT, "version": VERSION, "graph": graph_to_manifest(g), "weights": windex,
        "quant": {
            "add_strategy": ann.add_strategy,
            "bias_wl": ann.bias_wl,
            "params": names,
            "guard_bits": ann.guard_bits,
            "division_free": ann.division_free,
            "qweights": qindex,
        },
    }
    _write_manifest(path, doc)
    (path / WEIGHTS).write_bytes(wblob)
    (path / QPARAMS).write_bytes(table.astype(I16LE).tobytes())
    (path / QWEIGHTS).write_bytes(qblob)
    return path


def load_quantized(path) -> QuantizedModel:
    path = Path(path)
    doc = _read_manifest(path, QFORMAT)
    try:
        quant = doc["quant"]
        names = list(quant["params"])
        qindex = quant["qweights"]
        ann = QuantAnnotation(guard_bits={k: int(v) for k, v in quant["guard_bits"].items()},
                              division_free={k: bool(v) for k, v in quant["division_free"].items()},
                              add_strategy=quant["add_strategy"], bias_wl=quant.get("bias_wl"))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed quant section: {e!r}") from e
    weights = _unpack(doc.get("weights", []), _read_blob(path, WEIGHTS), F32LE, "weight")
    g = _graph_from_manifest(doc, weights)
    table = _read_blob(path, QPARAMS)
    if len(table) != 4 * len(names):
        raise BlobIndexError(f"params table holds {len(table) // 4} entries, manifest names {len(names)}")
    pairs = np.frombuffer(table, dtype=I16LE).reshape(-1, 2)
    try:
        ann.params = {t: QuantParams(int(wl), int(fl)) for t, (wl, fl) in zip(names, pairs)}
    except DomainError as e:
        raise RangeValidationError(f"invalid format in params table: {e}") from e
    raws = _unpack(qindex, _read_blob(path, QWEIGHTS), I32LE, "quantized weight")
    qweights = {}
    for name, raw in raws.items():
        if name not in ann.params:
            raise ManifestError(f"quantized weight {name!r} has no format")
        p = ann.params[name]
        if raw.size and (raw.min() < p.lo or raw.max() > p.hi):
            raise RangeValidationError(f"{name!r}: stored raw outside [{p.lo}, {p.hi}] for {p}")
        if raw.dtype.itemsize == 8 and p.wl <= 32:
            raise ManifestError(f"{name!r}: 64-bit storage declared for WL {p.wl}")
        qweights[name] = QTensor(raw.astype(np.int64), p)
    return QuantizedModel(g, ann, qweights)


def save_tensor(x, path) -> Path:
    path = Path(path)
    np.save(path, np.asarray(x, dtype=np.float32), allow_pickle=False)
    return path


def load_tensor(path) -> np.ndarray:
    try:
        x = np.load(Path(path), allow_pickle=False)
    except (ValueError, OSError) as e:
        raise ManifestError(f"cannot read tensor file {path}: {e}") from e
    return np.asarray(x, dtype=np.float32)


def split_batch(x: np.ndarray) -> list[np.ndarray]:
    """One-sample NCHW tensors from a batch."""
    return [x[i:i + 1] for i in range(x.shape[0])]


# ---------------------------------------------------------------------------
# fixtures

FIXTURES = ("tiny_cnn", "resnet_block", "csp_concat_bn")


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[Node] = []
        self.weights: dict[str, np.ndarray] = {}

    def conv(self, nid, x, cin, cout, k, pad, stride=1, bias=True):
        fan_in = cin * k * k
        self.weights[f"{nid}.weight"] = (self.rng.standard_normal((cout, cin, k, k))
                                         * math.sqrt(2.0 / fan_in)).astype(np.float32)
        ins = [x, f"{nid}.weight"]
        if bias:
            self.weights[f"{nid}.bias"] = (0.1 * self.rng.standard_normal(cout)).astype(np.float32)
            ins.append(f"{nid}.bias")
        self.nodes.append(Node(nid, "Conv2D", ins, nid, {"stride": [stride, stride], "pad": [pad, pad]}))
        return nid

    def bn(self, nid, x, c):
        r = self.rng
        vals = {"gamma": r.uniform(0.5, 1.5, c), "beta": 0.1 * r.standard_normal(c),
                "mean": 0.1 * r.standard_normal(c), "var": r.uniform(0.5, 1.5, c)}
        names = []
        for k, v in vals.items():
            self.weights[f"{nid}.{k}"] = v.astype(np.float32)
            names.append(f"{nid}.{k}")
        self.nodes.append(Node(nid, "BatchNorm2D", [x] + names, nid, {"eps": 1e-5}))
        return nid

    def op(self, nid, kind, inputs, **attrs):
        self.nodes.append(Node(nid, kind, inputs, nid, attrs))
        return nid

    def linear(self, nid, x, fin, fout):
        self.weights[f"{nid}.weight"] = (self.rng.standard_normal((fout, fin))
                                         * math.sqrt(1.0 / fin)).astype(np.float32)
        self.weights[f"{nid}.bias"] = (0.1 * self.rng.standard_normal(fout)).astype(np.float32)
        self.nodes.append(Node(nid, "Linear", [x, f"{nid}.weight", f"{nid}.bias"], nid))
        return nid


def build_fixture(name: str, seed: int = 0) -> Graph:
    """Small seeded models covering the rewrite motifs."""
    b = _Builder(seed)
    if name == "tiny_cnn":
        h = b.conv("conv1", "x", 3, 8, 3, 1)
        h = b.bn("bn1", h, 8)
        h = b.op("act1", "LeakyReLU", [h], negative_slope=0.1)
        h = b.op("pool1", "MaxPool2D", [h], kernel=[2, 2], stride=[2, 2])
        h = b.conv("conv2", h, 8, 8, 3, 1)
        h = b.bn("bn2", h, 8)
        h = b.op("act2", "HardSwish", [h])
        h = b.op("gap", "GlobalAvgPool", [h])
        out = b.linear("fc", h, 8, 10)
        inputs = {"x": (1, 3, 8, 8)}
    elif name == "resnet_block":
        h = b.conv("stem", "x", 4, 8, 3, 1)
        h = b.bn("stem_bn", h, 8)
        skip = b.op("stem_act", "LeakyReLU", [h], negative_slope=0.1)
        h = b.conv("conv1", skip, 8, 8, 3, 1)
        h = b.bn("bn1", h, 8)
        h = b.op("act1", "LeakyReLU", [h], negative_slope=0.1)
        h = b.conv("conv2", h, 8, 8, 3, 1)
        h = b.bn("bn2", h, 8)
        h = b.op("add", "Add", [skip, h])
        out = b.op("relu", "ReLU", [h])
        inputs = {"x": (1, 4, 8, 8)}
    elif name == "csp_concat_bn":
        a = b.conv("conv_a", "x", 4, 4, 1, 0, bias=False)
        c = b.conv("conv_b", "x", 4, 4, 3, 1, bias=False)
        h = b.op("cat", "Concat", [a, c], axis=1)
        h = b.bn("bn", h, 8)
        h = b.op("act", "LeakyReLU", [h], negative_slope=0.1)
        out = b.conv("conv_out", h, 8, 6, 1, 0)
        inputs = {"x": (1, 4, 8, 8)}
    else:
        raise ConfigError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURES)}")
    return Graph(b.nodes, inputs, [out], b.weights)


def fixture_inputs(name: str, count: int, seed: int = 0, low: float = -4.0, high: float = 4.0):
    """Uniform random inputs for a fixture, as an (count, C, H, W) batch."""
    g = build_fixture(name)
    (shape,) = g.inputs.values()
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, (count,) + tuple(shape[1:])).astype(np.float32)
