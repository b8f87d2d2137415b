"""GIN encoder, sum readout, projection head and the local-pair regressor.

Parameters live in a :class:`ModelParams` container of named leaf tensors
plus batch-norm running statistics. Names are dotted paths such as
``gin.0.w1`` or ``reg.bn2.gamma``; the checkpoint format relies on them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor
from .errors import ConfigError, ShapeError
from .graph import Graph

REGRESSOR_LAYERS = 5


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int
    num_layers: int = 3
    hidden_dim: int = 32
    projection_dim: int = 32
    gin_epsilon: float = 0.0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        for name in ("feature_dim", "hidden_dim", "projection_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(eq=False)
class BatchedGraphs:
    """Block-diagonal union of several graphs.

    ``src``/``dst`` hold both directions of every undirected edge so that
    neighbor aggregation is a single gather plus segment sum.
    """

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    graph_ids: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])


def collate(graphs: Sequence[Graph]) -> BatchedGraphs:
    if not graphs:
        raise ShapeError("collate: empty graph list")
    feats, src, dst, ids = [], [], [], []
    offset = 0
    for k, g in enumerate(graphs):
        feats.append(g.features)
        if g.num_edges:
            e = g.edges + offset
            src.extend([e[:, 0], e[:, 1]])
            dst.extend([e[:, 1], e[:, 0]])
        ids.append(np.full(g.node_count, k, dtype=np.int64))
        offset += g.node_count
    empty = np.zeros(0, dtype=np.int64)
    return BatchedGraphs(
        features=np.concatenate(feats, axis=0),
        src=np.concatenate(src) if src else empty,
        dst=np.concatenate(dst) if dst else empty,
        graph_ids=np.concatenate(ids),
        num_graphs=len(graphs),
    )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ModelParams:
    """Named tensors for encoder, projection head and regressor.

    ``tensors`` holds trainable leaves; ``buffers`` holds the regressor's
    batch-norm running statistics.
    """

    def __init__(self, config: EncoderConfig, tensors: dict[str, Tensor], buffers: dict[str, BatchNormStats]):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    @classmethod
    def initialize(cls, config: EncoderConfig, rng: np.random.Generator, with_regressor: bool = True) -> "ModelParams":
        t: dict[str, Tensor] = {}

        def linear(prefix, fan_in, fan_out, w="w", b="b"):
            t[f"{prefix}.{w}"] = Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)
            t[f"{prefix}.{b}"] = Tensor(np.zeros(fan_out), requires_grad=True)

        h = config.hidden_dim
        for k in range(config.num_layers):
            fan_in = config.feature_dim if k == 0 else h
            linear(f"gin.{k}", fan_in, h, "w1", "b1")
            linear(f"gin.{k}", h, h, "w2", "b2")
        linear("proj", h, h, "w1", "b1")
        linear("proj", h, config.projection_dim, "w2", "b2")
        buffers: dict[str, BatchNormStats] = {}
        if with_regressor:
            dims = regressor_dims(config)
            for k in range(REGRESSOR_LAYERS):
                linear(f"reg.{k}", dims[k], dims[k + 1])
                if k < REGRESSOR_LAYERS - 1:
                    t[f"reg.bn{k}.gamma"] = Tensor(np.ones(dims[k + 1]), requires_grad=True)
                    t[f"reg.bn{k}.beta"] = Tensor(np.zeros(dims[k + 1]), requires_grad=True)
                    buffers[f"reg.bn{k}"] = BatchNormStats.fresh(dims[k + 1])
        return cls(config, t, buffers)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def encoder_params(self) -> dict[str, Tensor]:
        """GIN layers and projection head, the parameters the contrastive loss trains."""
        return {k: v for k, v in self.tensors.items() if k.startswith(("gin.", "proj."))}

    def regressor_params(self) -> dict[str, Tensor]:
        return self.group("reg")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every tensor and buffer, in a stable order."""
        out = {k: v.values for k, v in self.tensors.items()}
        for k, s in self.buffers.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Rebuild from :meth:`state_arrays` output, checking names and shapes against ``config``."""
        template = cls.initialize(config, np.random.default_rng(0), with_regressor=any(k.startswith("reg.") for k in arrays))
        expected = template.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
        for name, arr in expected.items():
            got = np.asarray(arrays[name])
            if got.shape != arr.shape:
                raise ShapeError(f"parameter {name!r} has shape {got.shape}, config expects {arr.shape}")
            arr[...] = got
        return template


def regressor_dims(config: EncoderConfig) -> list[int]:
    h = config.hidden_dim
    return [2 * config.projection_dim] + [h] * (REGRESSOR_LAYERS - 1) + [1]


def gin_layer(h_prev: Tensor, batch: BatchedGraphs, params: ModelParams, layer: int) -> Tensor:
    """``relu(MLP((1 + eps) * h_n + sum of neighbor rows))`` with a 2-layer relu MLP."""
    if h_prev.shape[0] != batch.num_nodes:
        raise ShapeError(f"gin_layer: {h_prev.shape[0]} rows for {batch.num_nodes} nodes")
    w1 = params[f"gin.{layer}.w1"]
    if h_prev.shape[1] != w1.shape[0]:
        raise ShapeError(f"gin_layer {layer}: input width {h_prev.shape[1]}, weights expect {w1.shape[0]}")
    agg = ad.segment_sum(ad.take_rows(h_prev, batch.src), batch.dst, batch.num_nodes)
    eps = params.config.gin_epsilon
    combined = agg + (h_prev if eps == 0 else ad.scale(h_prev, 1.0 + eps))
    hidden = ad.relu(combined @ w1 + params[f"gin.{layer}.b1"])
    return ad.relu(hidden @ params[f"gin.{layer}.w2"] + params[f"gin.{layer}.b2"])


def node_embeddings(batch: BatchedGraphs, params: ModelParams) -> Tensor:
    h = Tensor(batch.features)
    for k in range(params.config.num_layers):
        h = gin_layer(h, batch, params, k)
    return h


def readout_sum(h: Tensor, batch: BatchedGraphs) -> Tensor:
    if h.shape[0] != batch.num_nodes:
        raise ShapeError(f"readout_sum: {h.shape[0]} rows for {batch.num_nodes} nodes")
    return ad.segment_sum(h, batch.graph_ids, batch.num_graphs)


def graph_embeddings(batch: BatchedGraphs, params: ModelParams) -> Tensor:
    if batch.features.shape[1] != params.config.feature_dim:
        raise ConfigError(
            f"batch feature_dim {batch.features.shape[1]} != encoder feature_dim {params.config.feature_dim}"
        )
    return readout_sum(node_embeddings(batch, params), batch)


def layerwise_embeddings(batch: BatchedGraphs, params: ModelParams) -> Tensor:
    """Sum readouts of every GIN layer, concatenated; width ``num_layers * hidden_dim``."""
    if batch.features.shape[1] != params.config.feature_dim:
        raise ConfigError(
            f"batch feature_dim {batch.features.shape[1]} != encoder feature_dim {params.config.feature_dim}"
        )
    h = Tensor(batch.features)
    pooled = []
    for k in range(params.config.num_layers):
        h = gin_layer(h, batch, params, k)
        pooled.append(readout_sum(h, batch))
    return ad.concatenate(pooled, axis=1)


def project(graph_emb: Tensor, params: ModelParams) -> Tensor:
    w1 = params["proj.w1"]
    if graph_emb.values.ndim != 2 or graph_emb.shape[1] != w1.shape[0]:
        raise ShapeError(f"project: input shape {graph_emb.shape}, head expects {w1.shape[0]} columns")
    hidden = ad.relu(graph_emb @ w1 + params["proj.b1"])
    return ad.l2_normalize_rows(hidden @ params["proj.w2"] + params["proj.b2"])


def encode(batch: BatchedGraphs, params: ModelParams) -> Tensor:
    """Normalized projections, one row per graph in ``batch``.

    The encoder has no stochastic or statistics-bearing layers, so train and
    eval mode coincide here.
    """
    return project(graph_embeddings(batch, params), params)


def regressor_score(
    z1: Tensor,
    z2: Tensor,
    params: ModelParams,
    training: bool,
    frozen: bool = False,
    update_stats: bool = True,
) -> Tensor:
    """Similarity in (0, 1) for each row pair ``(z1_i, z2_i)``; returns shape ``(P,)``.

    ``frozen`` swaps the learnable leaves for constants so no gradient reaches
    the regressor while gradients still flow into ``z1`` and ``z2``.
    """
    width = 2 * params.config.projection_dim
    if z1.shape != z2.shape or z1.values.ndim != 2 or 2 * z1.shape[1] != width:
        raise ShapeError(f"regressor_score: pair shapes {z1.shape} and {z2.shape}, expected (P, {width // 2})")

    def p(name):
        t = params[name]
        return Tensor(t.values) if frozen else t

    x = ad.concatenate([z1, z2], axis=1)
    for k in range(REGRESSOR_LAYERS):
        x = x @ p(f"reg.{k}.w") + p(f"reg.{k}.b")
        if k < REGRESSOR_LAYERS - 1:
            x = ad.batch_norm(
                x,
                p(f"reg.bn{k}.gamma"),
                p(f"reg.bn{k}.beta"),
                params.buffers[f"reg.bn{k}"],
                training=training,
                update_stats=update_stats,
            )
            x = ad.relu(x)
    return ad.sigmoid(ad.reduce_sum(x, axis=1))
