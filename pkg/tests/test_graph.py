import numpy as np
import pytest

from fxemu.errors import GraphError
from fxemu.graph import Graph, Node, find_join_points, infer_shapes, topo_order, validate
from fxemu.model_io import FIXTURES, build_fixture, fixture_inputs
from fxemu.refexec import run_fp32


def _conv(nid, x, cin=1, cout=1):
    return Node(nid, "Conv2D", [x, f"{nid}.w"], nid, {"stride": [1, 1], "pad": [0, 0]}), \
        {f"{nid}.w": np.ones((cout, cin, 1, 1), np.float32)}


def _graph(nodes_and_weights, outputs, inputs=None):
    nodes, weights = [], {}
    for n, w in nodes_and_weights:
        nodes.append(n)
        weights.update(w)
    return Graph(nodes, inputs or {"x": (1, 1, 4, 4)}, outputs, weights)


def test_topo_single_node():
    g = _graph([_conv("c", "x")], ["c"])
    assert [n.id for n in topo_order(g)] == ["c"]


def test_topo_diamond():
    g = _graph([
        (Node("add", "Add", ["a", "b"], "add"), {}),
        (Node("b", "ReLU", ["conv"], "b"), {}),
        _conv("conv", "x"),
        (Node("a", "LeakyReLU", ["conv"], "a", {"negative_slope": 0.1}), {}),
    ], ["add"])
    order = [n.id for n in topo_order(g)]
    assert order[0] == "conv" and order[-1] == "add"
    assert order == ["conv", "a", "b", "add"]  # ties broken by node id


def test_topo_cycle():
    g = Graph([Node("a", "ReLU", ["b"], "a"), Node("b", "ReLU", ["a"], "b")], {"x": (1, 1, 2, 2)}, ["a"])
    with pytest.raises(GraphError):
        topo_order(g)


def test_join_points_chain_is_empty():
    assert find_join_points(build_fixture("tiny_cnn")) == []


def test_join_points_resnet():
    (jp,) = find_join_points(build_fixture("resnet_block"))
    assert jp.kind == "Add"
    assert set(jp.producers) == {"stem_act", "bn2"}


def test_join_points_concat():
    (jp,) = find_join_points(build_fixture("csp_concat_bn"))
    assert jp.kind == "Concat" and jp.producers == ("conv_a", "conv_b")


def test_join_points_trace_through_transparent_nodes():
    base = _graph([_conv("ca", "x"), _conv("cb", "x"),
                   (Node("cat", "Concat", ["ca", "cb"], "cat", {"axis": 1}), {})], ["cat"])
    before = find_join_points(base)
    wrapped = _graph([_conv("ca", "x"), _conv("cb", "x"),
                      (Node("r", "ReLU", ["ca"], "r"), {}),
                      (Node("m", "MaxPool2D", ["r"], "m", {"kernel": [1, 1], "stride": [1, 1]}), {}),
                      (Node("u", "Upsample", ["m"], "u", {"scale": 1}), {}),
                      (Node("cat", "Concat", ["u", "cb"], "cat", {"axis": 1}), {})], ["cat"])
    after = find_join_points(wrapped)
    assert before[0].producers == after[0].producers == ("ca", "cb")
    # nested concat is traced through as well
    nested = _graph([_conv("ca", "x"), _conv("cb", "x"), _conv("cc", "x"),
                     (Node("c1", "Concat", ["ca", "cb"], "c1", {"axis": 1}), {}),
                     (Node("c2", "Concat", ["c1", "cc"], "c2", {"axis": 1}), {})], ["c2"])
    assert find_join_points(nested)[-1].producers == ("ca", "cb", "cc")


@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_validate(name):
    assert validate(build_fixture(name)) == []


def test_validate_concat_mismatch():
    g = _graph([_conv("ca", "x"), (Node("p", "MaxPool2D", ["x"], "p", {"kernel": [2, 2], "stride": [2, 2]}), {}),
                (Node("cat", "Concat", ["ca", "p"], "cat", {"axis": 1}), {})], ["cat"])
    assert validate(g)


def test_validate_undefined_tensor():
    g = _graph([(Node("r", "ReLU", ["nope"], "r"), {})], ["r"])
    assert any("undefined" in v for v in validate(g))


def test_validate_attributes():
    g = _graph([(Node("a", "LeakyReLU", ["x"], "a", {"negative_slope": 1.5}), {})], ["a"])
    assert any("negative_slope" in v for v in validate(g))
    g = _graph([(Node("a", "Concat", ["x"], "a"), {})], ["a"])
    assert any("axis" in v for v in validate(g))


def test_unknown_kind():
    with pytest.raises(GraphError):
        Node("a", "Softmax", ["x"], "a")


@pytest.mark.parametrize("name", FIXTURES)
def test_shape_inference_matches_execution(name):
    g = build_fixture(name)
    shapes = infer_shapes(g)
    env = run_fp32(g, fixture_inputs(name, 1), record=True)
    for t, v in env.items():
        assert tuple(v.shape) == shapes[t]
