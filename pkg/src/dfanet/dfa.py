"""Dynamic feature aggregation layer.

Each layer rebuilds a kNN graph from its own input features, describes every
edge ``(i, j)`` by an encoded relative position and a semantic feature pair,
maps the edge through a shared MLP and reduces over the neighbours.

Shapes are channels-last; the batched forms are ``[B, N, C]`` for points and
``[B, N, k, C]`` for edges.  Unbatched ``[N, C]`` inputs are accepted by
:func:`dfa_forward` and the encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    broadcast_to,
    concat,
    linear,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    safe_norm,
    softmax,
    sub,
)
from .knn import FEATURE, SPATIAL, NeighborGraph, build_graph, gather_neighbors
from .nn import Linear, LinearBNAct, Module

AGGREGATIONS = ("max", "sum", "mean", "attn")
_ALIASES = {"attention-sum": "attn", "attention": "attn"}
RAW_POSITION_DIM = 10


@dataclass
class DfaConfig:
    d_in: int
    d_out: int = 64
    k: int = 20
    pos_dim: int = 64
    aggregation: str = "max"
    use_position_encoding: bool = True
    graph_domain: str = FEATURE

    def __post_init__(self):
        self.aggregation = _ALIASES.get(self.aggregation, self.aggregation)
        if self.d_in < 1 or self.d_out < 1 or self.k < 1:
            raise ValueError(f"invalid DFA dimensions: {self}")
        if self.use_position_encoding and self.pos_dim < 1:
            raise ValueError("pos_dim must be positive when position encoding is on")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")
        if self.graph_domain not in (FEATURE, SPATIAL):
            raise ValueError(f"unknown graph domain {self.graph_domain!r}")

    @property
    def edge_in(self) -> int:
        return 2 * self.d_in + (self.pos_dim if self.use_position_encoding else 0)


class DfaLayer(Module):
    """Learnable parameters of one DFA layer."""

    def __init__(self, config: DfaConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.pos_mlp = (LinearBNAct(RAW_POSITION_DIM, config.pos_dim, rng, dtype)
                        if config.use_position_encoding else None)
        self.edge_mlp = LinearBNAct(config.edge_in, config.d_out, rng, dtype)
        self.attn = (Linear(config.d_out, 1, rng, dtype, bias=False)
                     if config.aggregation == "attn" else None)

    def __call__(self, F: Tensor, X: Tensor, training: bool) -> Tensor:
        return dfa_forward(F, X, self.config, self, training)


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape), True
    return t, False


def _centers(F: Tensor, k: int) -> Tensor:
    B, N, D = F.shape
    return broadcast_to(reshape(F, (B, N, 1, D)), (B, N, k, D))


def _check_graph(t: Tensor, graph: NeighborGraph) -> None:
    if graph.indices.shape[-2] != t.shape[-2]:
        raise ValueError(f"graph has {graph.indices.shape[-2]} rows but input has {t.shape[-2]} points")


def semantic_feature_encode(F: Tensor, graph: NeighborGraph) -> Tensor:
    """Per edge: the centre feature followed by (centre - neighbour)."""
    _check_graph(F, graph)
    Fb, squeeze = _batched(F)
    nb = gather_neighbors(Fb, graph)
    center = _centers(Fb, graph.indices.shape[-1])
    out = concat([center, sub(center, nb)], axis=-1)
    return reshape(out, out.shape[1:]) if squeeze else out


def relative_position_raw(X: Tensor, graph: NeighborGraph) -> Tensor:
    """10-channel edge vector: x_i, x_j, x_i - x_j and |x_i - x_j|."""
    if X is None:
        raise ValueError("relative position encoding needs point coordinates")
    _check_graph(X, graph)
    Xb, squeeze = _batched(X)
    if Xb.shape[-1] != 3:
        raise ValueError(f"coordinates must have 3 channels, got {Xb.shape}")
    nb = gather_neighbors(Xb, graph)
    center = _centers(Xb, graph.indices.shape[-1])
    rel = sub(center, nb)
    out = concat([center, nb, rel, safe_norm(rel, axis=-1)], axis=-1)
    return reshape(out, out.shape[1:]) if squeeze else out


def relative_position_encode(X: Tensor, graph: NeighborGraph, layer: DfaLayer,
                             training: bool) -> Tensor:
    return layer.pos_mlp(relative_position_raw(X, graph), training)


def edge_feature(h_x: Tensor | None, h_f: Tensor, layer: DfaLayer, training: bool) -> Tensor:
    cfg = layer.config
    if (h_x is not None) != cfg.use_position_encoding:
        raise ValueError("position encoding presence does not match the layer configuration")
    h = h_f if h_x is None else concat([h_x, h_f], axis=-1)
    if h.shape[-1] != layer.edge_mlp.d_in:
        raise ValueError(f"edge input width {h.shape[-1]} does not match edge MLP width {layer.edge_mlp.d_in}")
    return layer.edge_mlp(h, training)


def attention_weights(h: Tensor, scorer: Linear) -> Tensor:
    """Softmax over the neighbour axis of one learned score per edge."""
    return softmax(linear(h, scorer.weight), axis=-2)


def aggregate(h: Tensor, kind: str, scorer: Linear | None = None) -> Tensor:
    """Reduce ``[..., N, k, M]`` edge features over the neighbour axis."""
    axis = h.ndim - 2
    if kind == "max":
        return reduce_max(h, axis)
    if kind == "sum":
        return reduce_sum(h, axis=axis)
    if kind == "mean":
        return reduce_mean(h, axis=axis)
    if kind == "attn":
        if scorer is None:
            raise ValueError("attention aggregation needs a scorer")
        return reduce_sum(mul(h, attention_weights(h, scorer)), axis=axis)
    raise ValueError(f"unknown aggregation {kind!r}; expected one of {AGGREGATIONS}")


def layer_graph(F: Tensor, X: Tensor, config: DfaConfig) -> NeighborGraph:
    src = F if config.graph_domain == FEATURE else X
    k = min(config.k, src.shape[-2])
    return build_graph(src.data, k, config.graph_domain)


def dfa_forward(F: Tensor, X: Tensor, config: DfaConfig, layer: DfaLayer, training: bool) -> Tensor:
    """One DFA layer: ``[.., N, D]`` features and ``[.., N, 3]`` coords to ``[.., N, M]``.

    When ``k`` exceeds the number of points every point is used.
    """
    if F.shape[-1] != config.d_in:
        raise ValueError(f"layer expects {config.d_in} input channels, got {F.shape[-1]}")
    Fb, squeeze = _batched(F)
    Xb, _ = _batched(X)
    graph = layer_graph(Fb, Xb, config)
    h_f = semantic_feature_encode(Fb, graph)
    h_x = relative_position_encode(Xb, graph, layer, training) if config.use_position_encoding else None
    out = aggregate(edge_feature(h_x, h_f, layer, training), config.aggregation, layer.attn)
    return reshape(out, out.shape[1:]) if squeeze else out
