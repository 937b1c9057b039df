import struct
import zlib

import numpy as np
import pytest

from icgeom.geomfeat import per_point_features
from icgeom.graph import knn_graph
from icgeom.net import (CheckpointError, EdgeConvLayer, LinearLayer, Model, ModelConfig, checkpoint_bytes,
                        edgeconv_forward, embed_point, embed_points, init_model, load_model,
                        model_forward, param_count, parse_checkpoint, save_model, zero_model)
from icgeom.pointcloud import PointCloud, normalize_unit_sphere

from oracles import dense_mlp, edgeconv_loops

TINY = ModelConfig(num_classes=3, k=4, embed_widths=(7, 8, 5), edge_widths=(8, 6), head_widths=(8,))


def _cloud(n, seed):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * [1.0, 0.6, 0.3]
    return pts, per_point_features(pts, 8)


def test_embed_zero_weights():
    m = zero_model(TINY)
    g = np.arange(7.0)
    np.testing.assert_array_equal(embed_point(m, [1.0, 2.0, 3.0], g), [0] * 5 + [1, 2, 3])


def test_embed_identity_layer():
    cfg = ModelConfig(num_classes=2, k=1, embed_widths=(7, 7), edge_widths=(4,), head_widths=())
    m = zero_model(cfg)
    m.embed_mlp[0].weight[:] = np.eye(7)
    g = np.array([0.5, 0.1, 0.2, 0.6, 3.0, 0.1, 0.9])
    np.testing.assert_array_equal(embed_point(m, [4.0, 5.0, 6.0], g), list(g) + [4, 5, 6])


def test_embed_matches_dense_oracle():
    m = init_model(TINY, 3)
    rng = np.random.default_rng(0)
    for layer in m.embed_mlp:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    g, xyz = rng.normal(size=7), rng.normal(size=3)
    ref = dense_mlp([l.weight.tolist() for l in m.embed_mlp], [l.bias.tolist() for l in m.embed_mlp], g)
    np.testing.assert_allclose(embed_point(m, xyz, g), ref + list(xyz), atol=1e-9)


def test_embed_width_mismatch():
    with pytest.raises(ValueError):
        embed_points(zero_model(TINY), np.zeros((2, 3)), np.zeros((2, 6)))


def test_edgeconv_zero_theta1():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 4))
    layer = EdgeConvLayer(np.zeros((5, 4)), rng.normal(size=(5, 4)))
    out = edgeconv_forward(layer, x, knn_graph(x, 3))
    np.testing.assert_allclose(out, np.maximum(x @ layer.theta2.T, 0), atol=1e-12)


def test_edgeconv_hand_example():
    x = np.array([[0.0, 0, 0], [1, 0, 0], [-2, 0, 0]])
    layer = EdgeConvLayer(np.array([[1.0, 0, 0]]), np.zeros((1, 3)))
    graph = np.array([[0, 1, 2], [1, 0, 2], [2, 0, 1]])
    assert edgeconv_forward(layer, x, graph)[0, 0] == 1.0


def test_edgeconv_matches_loops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 6))
    layer = EdgeConvLayer(rng.normal(size=(5, 6)), rng.normal(size=(5, 6)))
    g = knn_graph(x, 4)
    out = edgeconv_forward(layer, x, g)
    np.testing.assert_allclose(out, edgeconv_loops(layer.theta1, layer.theta2, x, g), atol=1e-9)
    assert np.all(out >= 0)


def test_edgeconv_shape_mismatch():
    layer = EdgeConvLayer(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        edgeconv_forward(layer, np.zeros((4, 5)), np.zeros((4, 2), dtype=int))


def test_forward_permutation_invariant():
    m = init_model(TINY, 0)
    pts, g = _cloud(64, 1)
    base, _ = model_forward(m, pts, g)
    rng = np.random.default_rng(9)
    for _ in range(10):
        perm = rng.permutation(64)
        logits, _ = model_forward(m, pts[perm], g[perm])
        assert np.abs(logits - base).max() < 1e-6


def test_forward_zero_model():
    pts, g = _cloud(32, 2)
    logits, _ = model_forward(zero_model(TINY), pts, g)
    assert np.all(logits == 0)


def test_forward_deterministic():
    pts, g = _cloud(40, 3)
    a, _ = model_forward(init_model(TINY, 5), pts, g)
    b, _ = model_forward(init_model(TINY, 5), pts, g)
    assert a.tobytes() == b.tobytes()


def test_forward_too_few_points():
    pts = np.random.default_rng(4).normal(size=(3, 3))
    g = np.zeros((3, 7))
    with pytest.raises(ValueError):
        model_forward(init_model(TINY, 0), pts, g)


def test_trace_contents():
    m = init_model(TINY, 1)
    pts, g = _cloud(30, 5)
    _, trace = model_forward(m, pts, g)
    assert len(trace.edges) == 2
    for layer, et in zip(m.edge_layers, trace.edges):
        assert et.argmax.shape == (30, layer.theta1.shape[0])
        assert et.graph.shape == (30, 4)


def test_single_layer_graph_is_embedding_knn():
    cfg = ModelConfig(num_classes=2, k=5, embed_widths=(7, 6), edge_widths=(4,), head_widths=())
    m = init_model(cfg, 2)
    pts, g = _cloud(25, 6)
    _, trace = model_forward(m, pts, g)
    np.testing.assert_array_equal(trace.edges[0].graph, knn_graph(embed_points(m, pts, g), 5))


def test_first_layer_partial_translation_invariance():
    m = init_model(TINY, 4)
    m.edge_layers[0].theta2[:] = 0.0
    pts, g = _cloud(50, 7)
    _, t0 = model_forward(m, pts, g)
    _, t1 = model_forward(m, pts + [3.0, -1.0, 7.5], g)
    np.testing.assert_allclose(t1.edges[1].inputs, t0.edges[1].inputs, atol=1e-9)


def test_first_layer_sees_translation_with_center_term():
    m = init_model(TINY, 4)
    pts, g = _cloud(50, 7)
    _, t0 = model_forward(m, pts, g)
    _, t1 = model_forward(m, pts + 10.0, g)
    assert np.abs(t1.edges[1].inputs - t0.edges[1].inputs).max() > 1e-3


def test_normalized_logits_ignore_translation_and_scale():
    m = init_model(TINY, 8)
    pts = np.random.default_rng(8).normal(size=(64, 3))

    def run(p):
        c = normalize_unit_sphere(PointCloud(p)).points
        return model_forward(m, c, per_point_features(c, 8))[0]

    base = run(pts)
    assert np.abs(run(pts * 3.0 + [40, -20, 5]) - base).max() < 1e-6


def test_param_counts():
    tiny = Model(ModelConfig(), [LinearLayer(np.zeros((4, 3)), np.zeros(4))], [], [])
    assert param_count(tiny) == 16
    edge = Model(ModelConfig(), [], [EdgeConvLayer(np.zeros((64, 6)), np.zeros((64, 6)))], [])
    assert param_count(edge) == 768


def test_default_architecture_size():
    m = init_model(ModelConfig(num_classes=67))
    n = param_count(m)
    assert 1_000_000 <= n <= 2_500_000
    assert m.edge_layers[0].theta1.shape[1] == 64 + 3
    assert m.head[-1].weight.shape[0] == 67


def test_checkpoint_roundtrip_bitwise(tmp_path):
    m = init_model(TINY, 11)
    pts, g = _cloud(32, 9)
    save_model(m, tmp_path / "m.icc")
    back = load_model(tmp_path / "m.icc")
    assert back.config == m.config
    assert model_forward(back, pts, g)[0].tobytes() == model_forward(m, pts, g)[0].tobytes()
    assert checkpoint_bytes(back) == (tmp_path / "m.icc").read_bytes()


def test_checkpoint_layout():
    m = zero_model(ModelConfig(num_classes=2, k=3, embed_widths=(7, 2), edge_widths=(2,), head_widths=()))
    data = checkpoint_bytes(m)
    assert data[:4] == b"ICC1"
    (nlen,) = struct.unpack_from("<I", data, 4)
    assert data[8:8 + nlen] == b"embed.0.weight"
    rank, d0, d1 = struct.unpack_from("<3I", data, 8 + nlen)
    assert (rank, d0, d1) == (2, 2, 7)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_checkpoint_corruption():
    data = bytearray(checkpoint_bytes(init_model(TINY, 0)))
    data[20] ^= 0xFF
    with pytest.raises(CheckpointError):
        parse_checkpoint(bytes(data))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXX" + bytes(data[4:]))
