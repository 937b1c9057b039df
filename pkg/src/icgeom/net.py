"""The classifier network: geometric embedding, dynamic EdgeConv stack,
global max pooling and an MLP head. Forward only; gradients live in
:mod:`icgeom.train`.

Every point enters as ``[mlp(G), x, y, z]`` where ``G`` is its seven-value
geometric descriptor. Each EdgeConv layer rebuilds the k-NN graph in its own
input feature space and computes, per channel ``m``::

    out[i, m] = max_j relu(theta1[m] . (x_j - x_i) + theta2[m] . x_i)
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .geomfeat import N_FEATURES
from .graph import knn_graph

MAGIC = b"ICC1"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 67
    k: int = 20
    embed_widths: Tuple[int, ...] = (N_FEATURES, 32, 64)
    edge_widths: Tuple[int, ...] = (64, 64, 128, 256)
    head_widths: Tuple[int, ...] = (2048, 512)

    def __post_init__(self):
        if self.embed_widths[0] != N_FEATURES:
            raise ValueError(f"embedding must start at {N_FEATURES} inputs")
        if self.k < 1 or self.num_classes < 1:
            raise ValueError("k and num_classes must be positive")
        if not self.edge_widths:
            raise ValueError("need at least one EdgeConv layer")

    @property
    def d_embed(self) -> int:
        return self.embed_widths[-1]


# Small widths used for desk-scale training runs and tests.
COMPACT = dict(embed_widths=(N_FEATURES, 16, 16), edge_widths=(32, 32, 64), head_widths=(64,))


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class EdgeConvLayer:
    theta1: np.ndarray  # (out, in), acts on x_j - x_i
    theta2: np.ndarray  # (out, in), acts on x_i


@dataclass
class Model:
    config: ModelConfig
    embed_mlp: List[LinearLayer]
    edge_layers: List[EdgeConvLayer]
    head: List[LinearLayer]

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters in canonical order (the checkpoint order)."""
        out = []
        for i, layer in enumerate(self.embed_mlp):
            out += [(f"embed.{i}.weight", layer.weight), (f"embed.{i}.bias", layer.bias)]
        for i, layer in enumerate(self.edge_layers):
            out += [(f"edge.{i}.theta1", layer.theta1), (f"edge.{i}.theta2", layer.theta2)]
        for i, layer in enumerate(self.head):
            out += [(f"head.{i}.weight", layer.weight), (f"head.{i}.bias", layer.bias)]
        return out

    def copy(self) -> "Model":
        return Model(
            self.config,
            [LinearLayer(l.weight.copy(), l.bias.copy()) for l in self.embed_mlp],
            [EdgeConvLayer(l.theta1.copy(), l.theta2.copy()) for l in self.edge_layers],
            [LinearLayer(l.weight.copy(), l.bias.copy()) for l in self.head],
        )


def _layer_shapes(config: ModelConfig):
    embed = list(zip(config.embed_widths[:-1], config.embed_widths[1:]))
    edge_in = (config.d_embed + 3,) + tuple(config.edge_widths[:-1])
    edge = list(zip(edge_in, config.edge_widths))
    head_dims = (config.edge_widths[-1],) + tuple(config.head_widths) + (config.num_classes,)
    head = list(zip(head_dims[:-1], head_dims[1:]))
    return embed, edge, head


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """He-normal weights, zero biases. Values are float32-representable so a
    checkpoint round trip is lossless."""
    rng = np.random.default_rng(seed)

    def he(n_out, n_in, fan_in=None):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / (fan_in or n_in))
        return w.astype(np.float32).astype(np.float64)

    embed, edge, head = _layer_shapes(config)
    return Model(
        config,
        [LinearLayer(he(o, i), np.zeros(o)) for i, o in embed],
        # theta1 and theta2 share the fan-in of the concatenated edge input
        [EdgeConvLayer(he(o, i, 2 * i), he(o, i, 2 * i)) for i, o in edge],
        [LinearLayer(he(o, i), np.zeros(o)) for i, o in head],
    )


def zero_model(config: ModelConfig) -> Model:
    embed, edge, head = _layer_shapes(config)
    return Model(
        config,
        [LinearLayer(np.zeros((o, i)), np.zeros(o)) for i, o in embed],
        [EdgeConvLayer(np.zeros((o, i)), np.zeros((o, i))) for i, o in edge],
        [LinearLayer(np.zeros((o, i)), np.zeros(o)) for i, o in head],
    )


def param_count(model: Model) -> int:
    return int(sum(t.size for _, t in model.named_tensors()))


def relu(x):
    return np.maximum(x, 0.0)


def mlp_forward(layers: List[LinearLayer], x: np.ndarray, final_relu: bool = False):
    """ReLU between layers. Returns the output and every pre-activation."""
    pre = []
    h = x
    for i, layer in enumerate(layers):
        z = layer(h)
        pre.append(z)
        last = i == len(layers) - 1
        h = relu(z) if (not last or final_relu) else z
    return h, pre


def embed_points(model: Model, coords: np.ndarray, g_table: np.ndarray) -> np.ndarray:
    """``[mlp(g), x, y, z]`` for each point; shape ``(N, d_embed + 3)``."""
    g_table = np.asarray(g_table, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if g_table.shape[-1] != model.embed_mlp[0].weight.shape[1]:
        raise ValueError(f"feature width {g_table.shape[-1]} does not match the embedding")
    if coords.shape[-1] != 3 or coords.shape[:-1] != g_table.shape[:-1]:
        raise ValueError("coordinates must be (..., 3) and aligned with the features")
    emb, _ = mlp_forward(model.embed_mlp, g_table)
    return np.concatenate([emb, coords], axis=-1)


def embed_point(model: Model, coords, g) -> np.ndarray:
    return embed_points(model, np.asarray(coords)[None, :], np.asarray(g)[None, :])[0]


def _edgeconv(layer: EdgeConvLayer, x: np.ndarray, nbrs: np.ndarray):
    """Returns (output, max pre-activation, argmax neighbor index).

    Uses theta1.(x_j - x_i) + theta2.x_i = theta1.x_j + (theta2 - theta1).x_i.
    """
    if x.shape[1] != layer.theta1.shape[1]:
        raise ValueError(f"feature width {x.shape[1]} != layer input {layer.theta1.shape[1]}")
    if nbrs.shape[0] != x.shape[0]:
        raise ValueError("graph and features disagree on point count")
    a = x @ layer.theta1.T  # neighbor term
    b = x @ (layer.theta2 - layer.theta1).T  # center term
    edge = a[nbrs] + b[:, None, :]  # (N, k, out)
    slot = edge.argmax(axis=1)  # first max in neighbor order
    best = np.take_along_axis(edge, slot[:, None, :], axis=1)[:, 0, :]
    arg = np.take_along_axis(nbrs, slot, axis=1)
    return relu(best), best, arg


def edgeconv_forward(layer: EdgeConvLayer, features: np.ndarray, graph: np.ndarray) -> np.ndarray:
    out, _, _ = _edgeconv(layer, np.asarray(features, dtype=np.float64), np.asarray(graph))
    return out


@dataclass
class EdgeTrace:
    inputs: np.ndarray
    graph: np.ndarray
    pre_max: np.ndarray  # max over neighbors before the ReLU
    argmax: np.ndarray  # point index that achieved it, per (point, channel)


@dataclass
class ForwardTrace:
    g_table: np.ndarray
    embed_pre: List[np.ndarray]
    embedded: np.ndarray
    edges: List[EdgeTrace] = field(default_factory=list)
    pool_argmax: Optional[np.ndarray] = None
    pooled: Optional[np.ndarray] = None
    head_pre: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def model_forward(model: Model, points, g_table: np.ndarray):
    """Logits for one cloud plus everything backprop needs."""
    pts = points.points if hasattr(points, "points") else np.asarray(points, dtype=np.float64)
    g_table = np.asarray(g_table, dtype=np.float64)
    n = len(pts)
    if n < model.config.k:
        raise ValueError(f"cloud has {n} points, fewer than k={model.config.k}")
    if g_table.shape != (n, N_FEATURES):
        raise ValueError(f"feature table shape {g_table.shape} != ({n}, {N_FEATURES})")

    emb, embed_pre = mlp_forward(model.embed_mlp, g_table)
    x = np.concatenate([emb, pts], axis=1)
    trace = ForwardTrace(g_table=g_table, embed_pre=embed_pre, embedded=x)

    for layer in model.edge_layers:
        nbrs = knn_graph(x, model.config.k)
        out, best, arg = _edgeconv(layer, x, nbrs)
        trace.edges.append(EdgeTrace(x, nbrs, best, arg))
        x = out

    trace.pool_argmax = x.argmax(axis=0)
    trace.pooled = x[trace.pool_argmax, np.arange(x.shape[1])]
    logits, trace.head_pre = mlp_forward(model.head, trace.pooled)
    trace.logits = logits
    return logits, trace


def predict_logits(model: Model, points, g_table) -> np.ndarray:
    return model_forward(model, points, g_table)[0]


# ---------------------------------------------------------------------------
# Checkpoints
#
# magic "ICC1", then per tensor: u32 name length, UTF-8 name, u32 rank,
# rank x u32 dims, little-endian float32 data; finally u32 CRC32 of all
# preceding bytes. The neighbor count is stored as a 1-element tensor
# named "meta.k".


class CheckpointError(ValueError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(model: Model) -> bytes:
    body = bytearray(MAGIC)
    for name, t in model.named_tensors():
        body += _pack_tensor(name, t)
    body += _pack_tensor("meta.k", np.array([model.config.k], dtype=np.float64))
    return bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(data: bytes) -> Model:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an ICC1 checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    tensors = {}
    pos = 4
    try:
        while pos < len(body):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CheckpointError(f"tensor {name!r} truncated")
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            tensors[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return _model_from_tensors(tensors)


def _model_from_tensors(tensors: dict) -> Model:
    def collect(prefix, a, b):
        layers = []
        i = 0
        while f"{prefix}.{i}.{a}" in tensors:
            layers.append((tensors[f"{prefix}.{i}.{a}"], tensors[f"{prefix}.{i}.{b}"]))
            i += 1
        return layers

    try:
        embed = collect("embed", "weight", "bias")
        edge = collect("edge", "theta1", "theta2")
        head = collect("head", "weight", "bias")
        k = int(tensors["meta.k"][0])
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc}") from None
    if not (embed and edge and head):
        raise CheckpointError("checkpoint lacks a layer group")
    config = ModelConfig(
        num_classes=head[-1][0].shape[0],
        k=k,
        embed_widths=(embed[0][0].shape[1],) + tuple(w.shape[0] for w, _ in embed),
        edge_widths=tuple(t.shape[0] for t, _ in edge),
        head_widths=tuple(w.shape[0] for w, _ in head[:-1]),
    )
    model = Model(
        config,
        [LinearLayer(w, b) for w, b in embed],
        [EdgeConvLayer(t1, t2) for t1, t2 in edge],
        [LinearLayer(w, b) for w, b in head],
    )
    expected = [(n, t.shape) for n, t in zero_model(config).named_tensors()]
    if expected != [(n, t.shape) for n, t in model.named_tensors()]:
        raise CheckpointError("tensor shapes are inconsistent")
    return model


def load_model(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
