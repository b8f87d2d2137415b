"""Bi-level training loop, embedding extraction, ablations and the view-similarity study."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .contrastive import (
    LossBreakdown,
    breakdown,
    check_lambdas,
    cosine_similarity,
    loss_gg,
    loss_gl,
    loss_ll,
    regressor_cost_psi,
    total_loss,
)
from .encoder import EncoderConfig, ModelParams, collate, encode, graph_embeddings, layerwise_embeddings
from .errors import ConfigError
from .graph import Graph, GraphDataset
from .probe import linear_probe_cv
from .sampler import check_ratios, derive_rng, make_views, sample_subgraph

log = logging.getLogger(__name__)

# Stream tags keep the derived rngs of different purposes independent.
_INIT, _EPOCH, _VIEWS, _NEGATIVES, _SIMILARITY, _PROBE_INIT = 1, 2, 3, 4, 5, 6

EMBED_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.1
    g_ratio: float = 0.8
    l_ratio: float = 0.2
    batch_size: int = 32
    epochs: int = 20
    num_layers: int = 3
    hidden_dim: int = 32
    projection_dim: int = 32
    gin_epsilon: float = 0.0
    lr_encoder: float = 0.001
    lr_regressor: float = 0.001
    regressor_steps_per_batch: int = 1
    seed: int = 0
    # Ablation switch for the global-global term; every other term is dropped via its lambda.
    include_gg: bool = True

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        check_lambdas(self.lambda1, self.lambda2)
        check_ratios(self.g_ratio, self.l_ratio)
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("lr_encoder", "lr_regressor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.regressor_steps_per_batch < 1:
            raise ConfigError("regressor_steps_per_batch must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not (self.include_gg or self.lambda1 > 0 or self.lambda2 > 0):
            raise ConfigError("all loss terms are disabled")

    def encoder_config(self, feature_dim: int) -> EncoderConfig:
        return EncoderConfig(
            feature_dim=feature_dim,
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            projection_dim=self.projection_dim,
            gin_epsilon=self.gin_epsilon,
        )


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    step: int
    l_gg: float
    l_gl: float
    l_ll: float
    psi: float
    total: float


@dataclass
class MetricsTrace:
    records: list[MetricsRecord] = field(default_factory=list)

    def append(self, epoch: int, step: int, losses: LossBreakdown) -> None:
        self.records.append(
            MetricsRecord(epoch, step, losses.l_gg, losses.l_gl, losses.l_ll, losses.psi, losses.total)
        )

    def epoch_mean(self, epoch: int, attr: str = "total") -> float:
        vals = [getattr(r, attr) for r in self.records if r.epoch == epoch]
        return float(np.mean(vals))

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    labels: np.ndarray
    dataset_name: str


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, losses: LossBreakdown, trace: MetricsTrace):
        super().__init__(f"non-finite loss at epoch {epoch} step {step}: {losses}")
        self.epoch = epoch
        self.step = step
        self.losses = losses
        self.trace = trace


def epoch_batches(num_graphs: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled minibatches for one epoch; a tail shorter than 2 graphs is dropped."""
    order = derive_rng(seed, _EPOCH, epoch).permutation(num_graphs)
    batches = [order[i : i + batch_size] for i in range(0, num_graphs, batch_size)]
    return [b for b in batches if b.size >= 2]


def sample_batch_views(graphs: Sequence[Graph], indices, config: TrainConfig, epoch: int):
    """Views per graph, each graph using its own stream derived from (seed, epoch, index)."""
    g1, g2, l1, l2 = [], [], [], []
    for i in indices:
        rng = derive_rng(config.seed, _VIEWS, epoch, int(i))
        (a, b), (c, d) = make_views(graphs[int(i)], config.g_ratio, config.l_ratio, rng, source_index=int(i))
        g1.append(a.graph)
        g2.append(b.graph)
        l1.append(c.graph)
        l2.append(d.graph)
    return g1, g2, l1, l2


def encode_views(views, params: ModelParams) -> list[Tensor]:
    """Encode the four view lists in one forward pass and split the rows back out."""
    size = len(views[0])
    z = encode(collate([g for group in views for g in group]), params)
    return [ad.take_rows(z, np.arange(k * size, (k + 1) * size)) for k in range(4)]


def regressor_phase(zl1: Tensor, zl2: Tensor, params: ModelParams, opt: AdamState, rng) -> float:
    """One ascent step of the regressor on psi; returns psi before the update."""
    psi = regressor_cost_psi(zl1, zl2, params, rng, training=True)
    ad.scale(psi, -1.0).backward()
    adam_step(params.regressor_params(), opt)
    return psi.item()


def encoder_losses(zs: Sequence[Tensor], params: ModelParams, config: TrainConfig):
    zg1, zg2, zl1, zl2 = zs
    l_gg = loss_gg(zg1, zg2, config.tau)
    l_gl = loss_gl(zg1, zg2, zl1, zl2, config.tau)
    l_ll = loss_ll(zl1, zl2, params)
    total = total_loss(l_gg, l_gl, l_ll, config.lambda1, config.lambda2, 1.0 if config.include_gg else 0.0)
    return l_gg, l_gl, l_ll, total


def train(
    dataset: GraphDataset,
    config: TrainConfig,
    on_step: Callable[[MetricsRecord], None] | None = None,
) -> tuple[ModelParams, MetricsTrace]:
    config.validate()
    if len(dataset) < 2:
        raise ConfigError("training needs at least 2 graphs")
    params = ModelParams.initialize(config.encoder_config(dataset.feature_dim), derive_rng(config.seed, _INIT))
    enc_opt = AdamState(lr=config.lr_encoder)
    reg_opt = AdamState(lr=config.lr_regressor)
    trace = MetricsTrace()
    gg_weight = 1.0 if config.include_gg else 0.0

    for epoch in range(config.epochs):
        for step, idx in enumerate(epoch_batches(len(dataset), config.batch_size, config.seed, epoch)):
            views = sample_batch_views(dataset.graphs, idx, config, epoch)
            zs = encode_views(views, params)

            neg_rng = derive_rng(config.seed, _NEGATIVES, epoch, step)
            for _ in range(config.regressor_steps_per_batch):
                psi = regressor_phase(zs[2], zs[3], params, reg_opt, neg_rng)

            # The encoder has not moved since the forward pass, so zs is still current.
            l_gg, l_gl, l_ll, total = encoder_losses(zs, params, config)
            losses = breakdown(l_gg.item(), l_gl.item(), l_ll.item(), psi, config.lambda1, config.lambda2, gg_weight)
            if not (losses.is_finite() and math.isfinite(total.item())):
                raise NonFiniteLossError(epoch, step, losses, trace)
            total.backward()
            adam_step(params.encoder_params(), enc_opt)
            trace.append(epoch, step, losses)
            if on_step is not None:
                on_step(trace.records[-1])
        log.info("epoch %d mean total loss %.5f", epoch, trace.epoch_mean(epoch))
    return params, trace


def embed_graphs(graphs: Sequence[Graph], params: ModelParams) -> np.ndarray:
    """Pre-projection readout embeddings, one row per graph."""
    rows = []
    for start in range(0, len(graphs), EMBED_CHUNK):
        chunk = graphs[start : start + EMBED_CHUNK]
        rows.append(graph_embeddings(collate(chunk), params).values)
    return np.concatenate(rows, axis=0)


def embed_dataset(dataset: GraphDataset, params: ModelParams) -> EmbeddingMatrix:
    if dataset.feature_dim != params.config.feature_dim:
        raise ConfigError(
            f"dataset feature_dim {dataset.feature_dim} does not match model feature_dim {params.config.feature_dim}"
        )
    return EmbeddingMatrix(embed_graphs(dataset.graphs, params), dataset.labels, dataset.name)


# --- supervised probe network for the view-similarity study -----------------


@dataclass(frozen=True)
class ProbeNetConfig:
    num_layers: int = 5
    hidden_dim: int = 32
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 32


def train_supervised_gin(dataset: GraphDataset, probe: ProbeNetConfig, seed: int) -> ModelParams:
    """Supervised GIN with a linear cross-entropy head; returns the GIN part only.

    The head reads the concatenated per-layer readouts, as does ``view_similarity``.
    """
    if not dataset.has_labels():
        raise ConfigError("the similarity study needs a labeled dataset")
    cfg = EncoderConfig(
        feature_dim=dataset.feature_dim, num_layers=probe.num_layers, hidden_dim=probe.hidden_dim,
        projection_dim=probe.hidden_dim,
    )
    rng = derive_rng(seed, _PROBE_INIT)
    params = ModelParams.initialize(cfg, rng, with_regressor=False)
    width = probe.num_layers * probe.hidden_dim
    limit = math.sqrt(6.0 / (width + dataset.num_classes))
    head_w = Tensor(rng.uniform(-limit, limit, size=(width, dataset.num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(dataset.num_classes), requires_grad=True)
    trainable = {**params.group("gin"), "head.w": head_w, "head.b": head_b}
    opt = AdamState(lr=probe.lr)
    labels = dataset.labels
    for epoch in range(probe.epochs):
        for idx in epoch_batches(len(dataset), probe.batch_size, seed, epoch):
            batch = collate([dataset.graphs[int(i)] for i in idx])
            logits = layerwise_embeddings(batch, params) @ head_w + head_b
            onehot = np.zeros(logits.shape)
            onehot[np.arange(idx.size), labels[idx]] = 1.0
            loss = ad.mean(ad.logsumexp_rows(logits) - ad.reduce_sum(logits * onehot, axis=1))
            loss.backward()
            adam_step(trainable, opt)
    return params


def view_similarity(graphs: Sequence[Graph], params: ModelParams, ratio: float, rng) -> np.ndarray:
    """Cosine similarity between embeddings of two random views of each graph."""
    first, second = [], []
    for g in graphs:
        adj = g.neighbors()
        first.append(sample_subgraph(g, ratio, rng, adjacency=adj).graph)
        second.append(sample_subgraph(g, ratio, rng, adjacency=adj).graph)
    a = layerwise_embeddings(collate(first), params).values
    b = layerwise_embeddings(collate(second), params).values
    return np.array([cosine_similarity(x, y) for x, y in zip(a, b)])


def similarity_experiment(
    dataset: GraphDataset,
    ratios: Iterable[float],
    probe: ProbeNetConfig = ProbeNetConfig(),
    seed: int = 0,
    params: ModelParams | None = None,
) -> list[tuple[float, float, float]]:
    """(ratio, mean, variance) of same-graph view similarity under a supervised GIN."""
    ratios = [float(r) for r in ratios]
    for r in ratios:
        if not 0 < r <= 1:
            raise ConfigError(f"ratio must be in (0, 1], got {r}")
    if params is None:
        params = train_supervised_gin(dataset, probe, seed)
    out = []
    for k, r in enumerate(ratios):
        sims = view_similarity(dataset.graphs, params, r, derive_rng(seed, _SIMILARITY, k))
        out.append((r, float(sims.mean()), float(sims.var())))
    return out


# --- ablations ----------------------------------------------------------------

TERMS = ("gg", "gl", "ll")


def variant_name(drop: Iterable[str]) -> str:
    drop = sorted(set(drop))
    return "full" if not drop else "w/o " + "+".join(drop)


def ablated_config(config: TrainConfig, drop: Iterable[str]) -> TrainConfig:
    drop = set(drop)
    unknown = drop - set(TERMS)
    if unknown:
        raise ConfigError(f"unknown loss terms {sorted(unknown)}; expected a subset of {TERMS}")
    if drop == set(TERMS):
        raise ConfigError("cannot drop every loss term")
    changes = {}
    if "gg" in drop:
        changes["include_gg"] = False
    if "gl" in drop:
        changes["lambda1"] = 0.0
    if "ll" in drop:
        changes["lambda2"] = 0.0
    return dataclasses.replace(config, **changes)


@dataclass
class AblationResult:
    variant: str
    drop: tuple[str, ...]
    accuracy_mean: float
    accuracy_std: float


def ablate(
    dataset: GraphDataset,
    config: TrainConfig,
    variants: Sequence[Iterable[str]] = ((), ("gg",), ("gl",), ("ll",)),
    folds: int = 10,
    label_fraction: float = 1.0,
) -> list[AblationResult]:
    results = []
    for drop in variants:
        cfg = ablated_config(config, drop)
        params, _ = train(dataset, cfg)
        mean, std = linear_probe_cv(embed_dataset(dataset, params), folds=folds, label_fraction=label_fraction, seed=config.seed)
        results.append(AblationResult(variant_name(drop), tuple(sorted(set(drop))), mean, std))
    return results
