import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icgeom.geomfeat import per_point_features
from icgeom.net import ModelConfig, init_model, model_forward
from icgeom.pointcloud import PointCloud
from icgeom.train import (TrainConfig, backward, batch_gradients, cross_entropy_loss,
                          finite_difference_check, make_synthetic_dataset, sgd_step, softmax,
                          stratified_split, train)

TINY = ModelConfig(num_classes=3, k=4, embed_widths=(7, 8, 4), edge_widths=(8, 8), head_widths=(8,))
SMALL_WIDTHS = dict(embed_widths=(7, 8, 8), edge_widths=(8, 16), head_widths=(16,))


def _sample(n=32, seed=0):
    pts = np.random.default_rng(seed).normal(size=(n, 3)) * [1.0, 0.5, 0.25]
    return pts, per_point_features(pts, 8)


def test_cross_entropy_values():
    assert math.isclose(cross_entropy_loss(np.zeros(67), 5), math.log(67), rel_tol=1e-12)
    sat = np.zeros(4)
    sat[2] = 1000.0
    assert cross_entropy_loss(sat, 2) < 1e-6
    assert math.isclose(cross_entropy_loss(np.array([1.0, 2.0, 3.0]), 2), 0.40760596444438013, rel_tol=1e-12)


def test_cross_entropy_bad_label():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros(3), 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=2, max_size=20), st.data())
def test_loss_nonnegative_and_softmax_normalized(logits, data):
    z = np.array(logits)
    label = data.draw(st.integers(0, len(z) - 1))
    assert cross_entropy_loss(z, label) >= 0
    assert abs(softmax(z).sum() - 1.0) < 1e-9


def test_saturated_logits_give_tiny_gradients():
    m = init_model(TINY, 1)
    pts, g = _sample()
    m.head[-1].bias[1] = 1000.0
    _, trace = model_forward(m, pts, g)
    grads = backward(m, trace, 1)
    assert max(np.abs(v).max() for v in grads.values()) < 1e-6


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    m = init_model(TINY, seed)
    rng = np.random.default_rng(100 + seed)
    for layer in m.embed_mlp + m.head:
        layer.bias[:] = rng.normal(0, 0.1, size=layer.bias.shape)
    pts, g = _sample(32, seed)
    worst, checked, ties = finite_difference_check(m, pts, g, seed % 3)
    assert worst < 1e-4
    assert checked > 0.8 * (checked + ties)


def test_duplicate_sample_doubles_summed_gradient():
    m = init_model(TINY, 2)
    pts, g = _sample(32, 3)
    _, single = batch_gradients(m, [(pts, g, 0)], reduction="sum")
    _, double = batch_gradients(m, [(pts, g, 0), (pts, g, 0)], reduction="sum")
    for name in single:
        np.testing.assert_allclose(double[name], 2 * single[name], rtol=0, atol=1e-9)


def test_backward_rejects_foreign_trace():
    pts, g = _sample()
    _, trace = model_forward(init_model(TINY, 0), pts, g)
    other = init_model(ModelConfig(num_classes=4, k=4, embed_widths=(7, 8, 4), edge_widths=(8, 8),
                                   head_widths=(8,)), 0)
    with pytest.raises(ValueError):
        backward(other, trace, 0)


def _scalar_model():
    cfg = ModelConfig(num_classes=1, k=1, embed_widths=(7, 1), edge_widths=(1,), head_widths=())
    m = init_model(cfg, 0)
    for _, t in m.named_tensors():
        t[...] = 0.0
    return m


def test_sgd_plain_step():
    m = _scalar_model()
    m.embed_mlp[0].bias[0] = 1.0
    grads = {name: np.zeros_like(t) for name, t in m.named_tensors()}
    grads["embed.0.bias"][0] = 0.5
    sgd_step(m, grads, lr=0.1, momentum=0.0)
    assert math.isclose(m.embed_mlp[0].bias[0], 0.95)


def test_sgd_momentum_two_steps():
    m = _scalar_model()
    grads = {name: np.zeros_like(t) for name, t in m.named_tensors()}
    grads["embed.0.bias"][0] = 1.0
    _, state = sgd_step(m, grads, lr=0.1, momentum=0.9)
    assert math.isclose(m.embed_mlp[0].bias[0], -0.1)
    sgd_step(m, grads, lr=0.1, momentum=0.9, state=state)
    assert math.isclose(m.embed_mlp[0].bias[0], -0.29)


def test_sgd_zero_gradient_fixed_point():
    m = init_model(TINY, 3)
    before = [t.copy() for _, t in m.named_tensors()]
    sgd_step(m, {n: np.zeros_like(t) for n, t in m.named_tensors()}, lr=0.5, momentum=0.9)
    for b, (_, t) in zip(before, m.named_tensors()):
        np.testing.assert_array_equal(b, t)


def test_sgd_shape_mismatch():
    m = init_model(TINY, 3)
    grads = {n: np.zeros_like(t) for n, t in m.named_tensors()}
    grads["head.0.bias"] = np.zeros(99)
    with pytest.raises(ValueError):
        sgd_step(m, grads, 0.1)


def test_synthetic_counts_and_labels():
    ds = make_synthetic_dataset(["strut", "plate", "sphere"], 50, 64, 0.02, 7)
    assert len(ds) == 150
    assert sorted({c.label for c in ds}) == [0, 1, 2]
    assert all(len(c) == 64 for c in ds)
    # labels follow sorted family order: plate, sphere, strut
    sphere = [c for c in ds if c.label == 1][0].points
    assert np.std(np.linalg.norm(sphere, axis=1)) < 0.1


def test_synthetic_sphere_is_exact_without_noise():
    ds = make_synthetic_dataset(["sphere", "plate"], 3, 500, 0.0, 1)
    for c in ds:
        if c.label == 1:
            np.testing.assert_allclose(np.linalg.norm(c.points, axis=1), 1.0, atol=1e-9)


def test_synthetic_deterministic():
    a = make_synthetic_dataset(["ring", "cylinder"], 4, 100, 0.01, 3)
    b = make_synthetic_dataset(["ring", "cylinder"], 4, 100, 0.01, 3)
    assert all(x.points.tobytes() == y.points.tobytes() and x.label == y.label for x, y in zip(a, b))


def test_synthetic_bad_family():
    with pytest.raises(ValueError):
        make_synthetic_dataset(["sphere", "cube"], 2, 10)
    with pytest.raises(ValueError):
        make_synthetic_dataset(["sphere"], 2, 10)


def test_stratified_split():
    labels = [0] * 10 + [1] * 20 + [2] * 5
    tr, va = stratified_split(labels, 0.2, 7)
    assert sorted(np.r_[tr, va].tolist()) == list(range(35))
    assert np.bincount(np.array(labels)[va]).tolist() == [2, 4, 1]
    relabeled = [{0: 2, 1: 0, 2: 1}[l] for l in labels]
    tr2, va2 = stratified_split(relabeled, 0.2, 7)
    np.testing.assert_array_equal(va, va2)


def _small_config(**kw):
    base = dict(k=6, epochs=2, batch_size=4, seed=3, points=48, k_geom=8, widths=SMALL_WIDTHS)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_data():
    return make_synthetic_dataset(["plate", "sphere", "strut"], 5, 48, 0.02, 7)


def test_zero_learning_rate_keeps_parameters(small_data):
    cfg = _small_config(lr=0.0, epochs=1)
    model = init_model(cfg.model_config(3), 5)
    before = [t.copy() for _, t in model.named_tensors()]
    result = train(cfg, small_data[:1] + small_data[5:6] + small_data[10:11], model=model)
    for b, (_, t) in zip(before, result.model.named_tensors()):
        np.testing.assert_array_equal(b, t)


def test_training_is_reproducible_and_descends(small_data):
    a = train(_small_config(), small_data)
    b = train(_small_config(), small_data)
    assert [m.train_loss for m in a.history] == [m.train_loss for m in b.history]
    from icgeom.train import mean_loss, prepare_cloud
    inputs = [prepare_cloud(c, 8) for c in small_data]
    labels = [c.label for c in small_data]
    one = train(_small_config(epochs=1), small_data)
    assert mean_loss(one.model, inputs, labels, one.train_indices) < one.initial_loss


def test_label_permutation_consistency(small_data):
    cfg = _small_config()
    perm = [2, 0, 1]  # old class c becomes perm[c]
    model = init_model(cfg.model_config(3), cfg.seed)
    permuted = model.copy()
    last = permuted.head[-1]
    last.weight[perm] = model.head[-1].weight
    last.bias[perm] = model.head[-1].bias
    relabeled = [PointCloud(c.points, perm[c.label]) for c in small_data]
    a = train(cfg, small_data, model=model)
    b = train(cfg, relabeled, model=permuted)
    np.testing.assert_allclose([m.train_loss for m in a.history], [m.train_loss for m in b.history],
                               rtol=1e-9)


def test_training_input_errors(small_data):
    mixed = small_data[:2] + [PointCloud(np.zeros((10, 3)), 0)]
    with pytest.raises(ValueError):
        train(_small_config(), mixed)
    with pytest.raises(ValueError):
        train(_small_config(num_classes=2), small_data)
    with pytest.raises(ValueError):
        train(_small_config(), [])
