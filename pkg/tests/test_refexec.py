import numpy as np
import pytest

from fxemu.errors import DomainError, GraphError, ShapeError
from fxemu.graph import Graph, Node
from fxemu.model_io import FIXTURES, build_fixture, fixture_inputs
from fxemu.refexec import compare, conv2d_f32, maxpool_arr, run_fp32

from oracles import conv2d_direct


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def test_identity_conv():
    g = Graph([Node("c", "Conv2D", ["x", "w"], "y", {"stride": [1, 1], "pad": [0, 0]})],
              {"x": (1, 1, 3, 3)}, ["y"], {"w": _f32([[[[1.0]]]])})
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(run_fp32(g, x), x)


def test_batchnorm_identity():
    eps = 1e-5
    g = Graph([Node("bn", "BatchNorm2D", ["x", "g", "b", "m", "v"], "y", {"eps": eps})],
              {"x": (1, 2, 2, 2)}, ["y"],
              {"g": _f32([1, 1]), "b": _f32([0, 0]), "m": _f32([0, 0]), "v": _f32([1 - eps] * 2)})
    x = np.linspace(-1, 1, 8, dtype=np.float32).reshape(1, 2, 2, 2)
    np.testing.assert_allclose(run_fp32(g, x), x, atol=1e-6)


def test_hand_traced_two_layer_net():
    g = Graph([
        Node("c1", "Conv2D", ["x", "w1", "b1"], "h", {"stride": [1, 1], "pad": [0, 0]}),
        Node("act", "LeakyReLU", ["h"], "a", {"negative_slope": 0.25}),
        Node("c2", "Conv2D", ["a", "w2", "b2"], "y", {"stride": [1, 1], "pad": [0, 0]}),
    ], {"x": (1, 1, 3, 3)}, ["y"], {
        "w1": _f32([[[[1, 0], [0, -1]]]]), "b1": _f32([0.5]),
        "w2": _f32([[[[2]]]]), "b2": _f32([-1]),
    })
    x = _f32([[[[1, 2, 0], [0, -1, 3], [2, 1, -2]]]])
    # conv1 -> [[2.5, -0.5], [-0.5, 1.5]]; leaky -> [[2.5, -0.125], ...]; conv2 -> 2a - 1
    assert run_fp32(g, x).ravel().tolist() == [4.0, -1.25, -1.25, 2.0]


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 2)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    ref = conv2d_direct(x.tolist(), w.tolist(), b.tolist(), (2, 1), (1, 0))
    np.testing.assert_allclose(conv2d_f32(x, w, b, (2, 1), (1, 0)), ref, rtol=1e-5, atol=1e-5)


def test_maxpool():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    assert maxpool_arr(x, (2, 2), (2, 2)).ravel().tolist() == [5, 7, 13, 15]
    assert maxpool_arr(np.full((1, 2, 4, 4), 3.0), (2, 2), (2, 2)).tolist() == np.full((1, 2, 2, 2), 3.0).tolist()


@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_run_deterministically(name):
    g = build_fixture(name)
    x = fixture_inputs(name, 1)
    a, b = run_fp32(g, x), run_fp32(g, x)
    assert a.dtype == np.float32 and np.array_equal(a, b)


def test_input_validation():
    g = build_fixture("tiny_cnn")
    with pytest.raises(ShapeError):
        run_fp32(g, np.zeros((1, 3, 9, 8)))
    with pytest.raises(DomainError):
        run_fp32(g, np.full((1, 3, 8, 8), np.nan))
    with pytest.raises(GraphError):
        run_fp32(g, fixture_inputs("tiny_cnn", 1), weights={})


def test_compare():
    c = compare([[1.0, 2.0], [3.0, 0.0]], [[1.0, 2.5], [2.0, 0.0]])
    assert c.max_abs_diff == 1.0
    assert c.mse == pytest.approx((0.25 + 1.0) / 4)
    assert c.argmax_agreement == 1.0
    c = compare([[1.0, 2.0], [3.0, 0.0]], [[1.0, 0.5], [3.0, 0.0]])
    assert c.argmax_agreement == 0.5
    assert compare([0.0, 1.0], [0.0, 1.0]).as_dict() == {"max_abs_diff": 0.0, "mse": 0.0, "argmax_agreement": 1.0}
    with pytest.raises(ShapeError):
        compare([1.0], [1.0, 2.0])
