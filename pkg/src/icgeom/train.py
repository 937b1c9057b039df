"""Loss, hand-derived backward pass, SGD with momentum, synthetic shapes and
the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geomfeat import per_point_features
from .net import Model, ModelConfig, ForwardTrace, init_model, model_forward
from .pointcloud import DEFAULT_BUDGET, PointCloud, normalize_unit_sphere

log = logging.getLogger(__name__)

Gradients = Dict[str, np.ndarray]

SHAPE_FAMILIES = ("cylinder", "plate", "ring", "sphere", "strut")


# ---------------------------------------------------------------------------
# Loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise ValueError(f"label {label} outside [0, {z.shape[-1]})")
    shifted = z - z.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


# ---------------------------------------------------------------------------
# Backward


def _mlp_backward(layers, inputs, pre, grad_out, final_relu=False):
    """Backprop through ``mlp_forward``; returns per-layer (dW, db) and dx."""
    grads = [None] * len(layers)
    g = grad_out
    for i in reversed(range(len(layers))):
        last = i == len(layers) - 1
        if not last or final_relu:
            g = g * (pre[i] > 0)
        h_in = inputs if i == 0 else np.maximum(pre[i - 1], 0.0)
        if g.ndim == 1:
            grads[i] = (np.outer(g, h_in), g.copy())
        else:
            grads[i] = (g.T @ h_in, g.sum(axis=0))
        g = g @ layers[i].weight
    return grads, g


def backward(model: Model, trace: ForwardTrace, label: int) -> Gradients:
    """Gradient of the cross-entropy loss with respect to every tensor.

    Max aggregations route the gradient to the recorded argmax only and the
    k-NN graphs are treated as constants.
    """
    cfg = model.config
    logits = trace.logits
    if logits is None or logits.shape != (cfg.num_classes,) or len(trace.edges) != len(model.edge_layers):
        raise ValueError("trace does not belong to this model")
    if not 0 <= label < cfg.num_classes:
        raise ValueError(f"label {label} outside [0, {cfg.num_classes})")

    grads: Gradients = {}
    dlogits = softmax(logits)
    dlogits[label] -= 1.0

    head_grads, dpooled = _mlp_backward(model.head, trace.pooled, trace.head_pre, dlogits)
    for i, (dw, db) in enumerate(head_grads):
        grads[f"head.{i}.weight"], grads[f"head.{i}.bias"] = dw, db

    last = trace.edges[-1]
    n, width = last.pre_max.shape
    dx = np.zeros((n, width))
    dx[trace.pool_argmax, np.arange(width)] = dpooled

    for li in reversed(range(len(model.edge_layers))):
        layer, et = model.edge_layers[li], trace.edges[li]
        x = et.inputs
        n, out = et.pre_max.shape
        g = dx * (et.pre_max > 0)
        # scatter[j, m] = sum of g[i, m] over points i whose argmax is j
        flat = (et.argmax * out + np.arange(out)).ravel()
        scatter = np.bincount(flat, weights=g.ravel(), minlength=n * out).reshape(n, out)
        gx = g.T @ x
        grads[f"edge.{li}.theta1"] = scatter.T @ x - gx
        grads[f"edge.{li}.theta2"] = gx
        dx = scatter @ layer.theta1 + g @ (layer.theta2 - layer.theta1)

    d_emb = dx[:, :cfg.d_embed]
    embed_grads, _ = _mlp_backward(model.embed_mlp, trace.g_table, trace.embed_pre, d_emb)
    for i, (dw, db) in enumerate(embed_grads):
        grads[f"embed.{i}.weight"], grads[f"embed.{i}.bias"] = dw, db

    return {name: grads[name] for name, _ in model.named_tensors()}


def loss_and_gradients(model: Model, points, g_table, label: int):
    logits, trace = model_forward(model, points, g_table)
    return cross_entropy_loss(logits, label), backward(model, trace, label)


def batch_gradients(model: Model, samples, reduction: str = "mean"):
    """Sum or mean of per-sample gradients, accumulated in list order.

    ``samples`` yields ``(points, g_table, label)``.
    """
    total: Optional[Gradients] = None
    losses = []
    for pts, g_table, label in samples:
        loss, g = loss_and_gradients(model, pts, g_table, label)
        losses.append(loss)
        if total is None:
            total = g
        else:
            for name in total:
                total[name] += g[name]
    if total is None:
        raise ValueError("empty batch")
    if reduction == "mean":
        for name in total:
            total[name] /= len(losses)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return losses, total


def trace_signature(trace: ForwardTrace):
    """All discrete choices made during a forward pass."""
    parts = [p > 0 for p in trace.embed_pre]
    for et in trace.edges:
        parts += [et.graph, et.argmax, et.pre_max > 0]
    parts.append(trace.pool_argmax)
    parts += [p > 0 for p in trace.head_pre[:-1]]
    return parts


def finite_difference_check(model: Model, points, g_table, label: int, eps: float = 1e-3,
                            floor: float = 1e-8):
    """Compare analytic gradients with central differences, entry by entry.

    Entries whose perturbation flips any ReLU, max or neighbor choice are
    reported as ties and skipped. Returns ``(max_rel_err, n_checked, n_ties)``.
    """
    logits, trace = model_forward(model, points, g_table)
    analytic = backward(model, trace, label)
    base_sig = trace_signature(trace)

    def same(sig):
        return all(np.array_equal(a, b) for a, b in zip(sig, base_sig))

    worst, checked, ties = 0.0, 0, 0
    for name, tensor in model.named_tensors():
        flat = tensor.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, tp = model_forward(model, points, g_table)
            flat[idx] = orig - eps
            lm, tm = model_forward(model, points, g_table)
            flat[idx] = orig
            if not (same(trace_signature(tp)) and same(trace_signature(tm))):
                ties += 1
                continue
            numeric = (cross_entropy_loss(lp, label) - cross_entropy_loss(lm, label)) / (2 * eps)
            a = analytic[name].reshape(-1)[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
            checked += 1
    return worst, checked, ties


# ---------------------------------------------------------------------------
# Optimizer


def sgd_step(model: Model, grads: Gradients, lr: float, momentum: float = 0.0,
             state: Optional[Dict[str, np.ndarray]] = None):
    """In-place update ``v = momentum * v + g; p -= lr * v``."""
    state = {} if state is None else state
    for name, param in model.named_tensors():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {param.shape}")
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        param -= lr * v
    return model, state


# ---------------------------------------------------------------------------
# Synthetic corpus


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sample_family(name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    u, v = rng.random(n), rng.random(n)
    if name == "sphere":
        d = rng.standard_normal((n, 3))
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    if name == "plate":
        w, h = rng.uniform(1.5, 2.0), rng.uniform(1.0, 1.5)
        return np.stack([(u - 0.5) * w, (v - 0.5) * h, np.zeros(n)], axis=1)
    if name == "strut":
        length, radius = rng.uniform(1.5, 2.0), rng.uniform(0.01, 0.03)
        t = 2 * np.pi * v
        return np.stack([(u - 0.5) * length, radius * np.cos(t), radius * np.sin(t)], axis=1)
    if name == "cylinder":
        height, radius = rng.uniform(1.0, 2.0), rng.uniform(0.4, 0.6)
        t = 2 * np.pi * v
        return np.stack([radius * np.cos(t), radius * np.sin(t), (u - 0.5) * height], axis=1)
    if name == "ring":
        big, small = rng.uniform(0.7, 1.0), rng.uniform(0.1, 0.2)
        a, b = 2 * np.pi * u, 2 * np.pi * v
        rad = big + small * np.cos(b)
        return np.stack([rad * np.cos(a), rad * np.sin(a), small * np.sin(b)], axis=1)
    raise ValueError(f"unknown shape family {name!r}; choose from {SHAPE_FAMILIES}")


def make_synthetic_dataset(classes: Sequence[str], per_class: int, points: int = DEFAULT_BUDGET,
                           noise: float = 0.0, seed: int = 0) -> List[PointCloud]:
    """Labeled clouds of simple shapes, labels by sorted family name.

    Shapes are centered at the origin with a random orientation; the sphere
    has radius 1.
    """
    families = sorted(set(classes))
    if len(families) < 2:
        raise ValueError("need at least two shape families")
    for name in families:
        if name not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {name!r}; choose from {SHAPE_FAMILIES}")
    rng = np.random.default_rng(seed)
    out = []
    for label, name in enumerate(families):
        for _ in range(per_class):
            pts = _sample_family(name, points, rng) @ _random_rotation(rng).T
            if noise > 0:
                pts = pts + rng.normal(0.0, noise, pts.shape)
            out.append(PointCloud(pts, label))
    return out


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    k: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 8
    seed: int = 7
    points: int = DEFAULT_BUDGET
    k_geom: int = 20
    normalize: bool = True
    val_fraction: float = 0.2
    num_classes: Optional[int] = None
    widths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1 or self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid training configuration")

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(num_classes=num_classes, k=self.k, **self.widths)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    model: Model
    history: List[EpochMetrics]
    initial_loss: float
    train_indices: np.ndarray
    val_indices: np.ndarray


def prepare_cloud(cloud: PointCloud, k_geom: int = 20, normalize: bool = True):
    """Network inputs for one cloud: (coordinates, geometric feature table)."""
    if normalize:
        cloud = normalize_unit_sphere(cloud)
    return cloud.points, per_point_features(cloud, k_geom)


def stratified_split(labels: Sequence[int], val_fraction: float, seed: int):
    """Seeded split holding out ``round(val_fraction * count)`` of each class.

    One global shuffle decides the order, so renaming classes does not change
    which samples are held out.
    """
    labels = np.asarray(labels)
    quota = {c: int(round(val_fraction * np.sum(labels == c))) for c in np.unique(labels)}
    taken = dict.fromkeys(quota, 0)
    val = []
    for i in np.random.default_rng(seed).permutation(len(labels)):
        c = labels[i]
        if taken[c] < quota[c]:
            taken[c] += 1
            val.append(i)
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


def mean_loss(model: Model, inputs, labels, indices) -> float:
    return float(np.mean([cross_entropy_loss(model_forward(model, *inputs[i])[0], labels[i])
                          for i in indices]))


def accuracy(model: Model, inputs, labels, indices) -> float:
    if len(indices) == 0:
        return float("nan")
    hits = [int(np.argmax(model_forward(model, *inputs[i])[0])) == labels[i] for i in indices]
    return float(np.mean(hits))


def train(config: TrainConfig, dataset: Sequence[PointCloud], model: Optional[Model] = None,
          on_epoch=None) -> TrainResult:
    """Mini-batch SGD with momentum; deterministic for a fixed seed."""
    if not dataset:
        raise ValueError("empty dataset")
    sizes = {len(c) for c in dataset}
    if len(sizes) != 1:
        raise ValueError(f"inconsistent cloud sizes {sorted(sizes)}")
    if any(c.label is None for c in dataset):
        raise ValueError("every training cloud needs a label")
    labels = np.array([c.label for c in dataset])
    num_classes = config.num_classes or int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"class id outside [0, {num_classes})")
    if model is None:
        model = init_model(config.model_config(num_classes), config.seed)
    elif model.config.num_classes != num_classes:
        raise ValueError("model class count does not match the dataset")

    inputs = [prepare_cloud(c, config.k_geom, config.normalize) for c in dataset]
    train_idx, val_idx = stratified_split(labels, config.val_fraction, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    initial = mean_loss(model, inputs, labels, train_idx)
    log.info("initial train loss %.4f", initial)

    state: Dict[str, np.ndarray] = {}
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            batch_losses, grads = batch_gradients(
                model, ((*inputs[i], labels[i]) for i in batch), reduction="mean")
            losses += batch_losses
            sgd_step(model, grads, config.lr, config.momentum, state)
        metrics = EpochMetrics(epoch, float(np.mean(losses)), accuracy(model, inputs, labels, val_idx))
        history.append(metrics)
        log.info("epoch %d loss %.4f val_acc %.3f", epoch, metrics.train_loss, metrics.val_accuracy)
        if on_epoch is not None:
            on_epoch(metrics)
    return TrainResult(model, history, initial, train_idx, val_idx)
