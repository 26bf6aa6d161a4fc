"""Classification and segmentation networks built from DFA layers.

Both networks align the input with a learned 3x3 transform, stack DFA
layers (each rebuilding its graph from the previous layer's output),
concatenate the per-layer local features with a low-dimensional
PointNet-style global feature and lift the result to ``embed_dim`` before
max pooling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    broadcast_to,
    concat,
    dropout,
    matmul,
    reduce_max,
    reshape,
    take,
)
from .dfa import DfaConfig, DfaLayer
from .knn import FEATURE
from .nn import Linear, LinearBNAct, Module

CLS, PARTSEG, SEMSEG = "cls", "partseg", "semseg"
_TASK_ALIASES = {
    "classification": CLS,
    "part-segmentation": PARTSEG,
    "semantic-segmentation": SEMSEG,
}


def _default_dfa_widths(task: str) -> tuple[int, ...]:
    return (64, 64, 64, 64) if task == CLS else (64, 64, 64)


def _default_head(task: str) -> tuple[int, ...]:
    return (512, 256) if task == CLS else (512, 256, 128)


@dataclass
class ModelConfig:
    """Architecture description; every width is given at ``width_scale == 1``."""

    task: str = CLS
    num_points: int = 1024
    num_classes: int = 40
    num_parts: int = 50
    num_categories: int = 16
    input_dim: int = 3
    k: int = 20
    dfa_widths: Optional[tuple[int, ...]] = None
    pos_dim: int = 64
    global_branch_dim: int = 64
    embed_dim: int = 1024
    head_widths: Optional[tuple[int, ...]] = None
    category_dim: int = 64
    tnet_point_widths: tuple[int, ...] = (64, 128, 256)
    tnet_fc_widths: tuple[int, ...] = (128, 64)
    dropout: float = 0.5
    aggregation: str = "max"
    graph_domain: str = FEATURE
    use_position_encoding: bool = True
    use_low_dim_global: bool = True
    use_category_vector: Optional[bool] = None
    dfa_overrides: tuple[dict, ...] = field(default_factory=tuple)
    width_scale: float = 1.0
    precision: int = 32

    def __post_init__(self):
        self.task = _TASK_ALIASES.get(self.task, self.task)
        if self.task not in (CLS, PARTSEG, SEMSEG):
            raise ValueError(f"unknown task {self.task!r}")
        if self.dfa_widths is None:
            self.dfa_widths = _default_dfa_widths(self.task)
        if self.head_widths is None:
            self.head_widths = _default_head(self.task)
        if self.use_category_vector is None:
            self.use_category_vector = self.task == PARTSEG
        self.dfa_widths = tuple(self.dfa_widths)
        self.head_widths = tuple(self.head_widths)
        self.tnet_point_widths = tuple(self.tnet_point_widths)
        self.tnet_fc_widths = tuple(self.tnet_fc_widths)
        self.dfa_overrides = tuple(dict(o) for o in self.dfa_overrides)
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if self.input_dim < 3:
            raise ValueError("input_dim must include the 3 coordinates")
        if self.task == SEMSEG and self.use_category_vector:
            raise ValueError("semantic segmentation takes no category vector")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def w(self, width: int) -> int:
        """Apply the width scale to an internal layer width."""
        return max(1, int(round(width * self.width_scale)))

    @property
    def local_width(self) -> int:
        return sum(self.w(d) for d in self.dfa_widths)

    @property
    def concat_width(self) -> int:
        g = self.w(self.global_branch_dim) if self.use_low_dim_global else 0
        return self.local_width + g

    @property
    def global_width(self) -> int:
        extra = self.w(self.category_dim) if self.use_category_vector else 0
        return self.w(self.embed_dim) + extra

    @property
    def num_outputs(self) -> int:
        return self.num_classes if self.task == CLS else self.num_parts

    def dfa_configs(self) -> list[DfaConfig]:
        out = []
        d_in = self.input_dim
        for i, width in enumerate(self.dfa_widths):
            kw = dict(d_in=d_in, d_out=self.w(width), k=self.k, pos_dim=self.w(self.pos_dim),
                      aggregation=self.aggregation, use_position_encoding=self.use_position_encoding,
                      graph_domain=self.graph_domain)
            if i < len(self.dfa_overrides):
                kw.update(self.dfa_overrides[i])
            cfg = DfaConfig(**kw)
            out.append(cfg)
            d_in = cfg.d_out
        return out

    def to_json(self) -> str:
        """Canonical text form (sorted keys, no whitespace)."""
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


class SpatialTransform(Module):
    """Predicts a 3x3 matrix from the cloud; starts out as the identity."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dt = config.dtype
        widths = [3] + [config.w(c) for c in config.tnet_point_widths]
        self.point_mlp = [LinearBNAct(a, b, rng, dt) for a, b in zip(widths, widths[1:])]
        fc = [widths[-1]] + [config.w(c) for c in config.tnet_fc_widths]
        self.fc = [LinearBNAct(a, b, rng, dt) for a, b in zip(fc, fc[1:])]
        self.out = Linear(fc[-1], 9, rng, dt)
        self.out.weight.data[:] = 0.0
        self.out.bias.data[:] = np.eye(3, dtype=dt).ravel()

    def __call__(self, X: Tensor, training: bool) -> tuple[Tensor, Tensor]:
        h = X
        for layer in self.point_mlp:
            h = layer(h, training)
        h = reduce_max(h, axis=1)
        for layer in self.fc:
            h = layer(h, training)
        T = reshape(self.out(h), (X.shape[0], 3, 3))
        return matmul(X, T), T


class GlobalBranch(Module):
    """Shared per-point MLP followed by a channelwise max over the points."""

    def __init__(self, d_in: int, width: int, rng: np.random.Generator, dtype):
        self.mlp = LinearBNAct(d_in, width, rng, dtype)

    def __call__(self, F0: Tensor, training: bool) -> Tensor:
        return reduce_max(self.mlp(F0, training), axis=1)


def _tile_points(g: Tensor, n: int) -> Tensor:
    B, C = g.shape
    return broadcast_to(reshape(g, (B, 1, C)), (B, n, C))


class _Backbone(Module):
    """Transform, DFA stack and local/global fusion shared by both networks."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        dt = config.dtype
        self.transform = SpatialTransform(config, rng)
        self.dfa = [DfaLayer(c, rng, dt) for c in config.dfa_configs()]
        self.global_branch = (GlobalBranch(config.input_dim, config.w(config.global_branch_dim), rng, dt)
                              if config.use_low_dim_global else None)
        self.embed = LinearBNAct(config.concat_width, config.w(config.embed_dim), rng, dt)

    def _prepare(self, X) -> tuple[Tensor, bool]:
        X = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=self.config.dtype))
        if X.ndim == 2:
            X = reshape(X, (1,) + X.shape)
            squeeze = True
        else:
            squeeze = False
        if X.shape[-1] != self.config.input_dim:
            raise ValueError(f"expected {self.config.input_dim} input channels, got {X.shape[-1]}")
        return X, squeeze

    def features(self, X: Tensor, training: bool) -> tuple[list[Tensor], Tensor, Tensor]:
        """Returns (per-layer local features, pooled global feature, transform)."""
        n = X.shape[1]
        if self.config.input_dim == 3:
            coords, T = self.transform(X, training)
            F0 = coords
        else:
            coords, T = self.transform(take(X, np.arange(3), axis=-1), training)
            F0 = concat([coords, take(X, np.arange(3, X.shape[-1]), axis=-1)], axis=-1)
        locals_ = []
        f = F0
        for layer in self.dfa:
            f = layer(f, coords, training)
            locals_.append(f)
        parts = list(locals_)
        if self.global_branch is not None:
            parts.append(_tile_points(self.global_branch(F0, training), n))
        pooled = reduce_max(self.embed(concat(parts, axis=-1), training), axis=1)
        return locals_, pooled, T


class DfaClassifier(_Backbone):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        dt = config.dtype
        widths = [config.w(config.embed_dim)] + [config.w(c) for c in config.head_widths]
        self.head = [LinearBNAct(a, b, rng, dt) for a, b in zip(widths, widths[1:])]
        self.out = Linear(widths[-1], config.num_classes, rng, dt)

    def __call__(self, X, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``[B, num_classes]`` for clouds ``[B, N, input_dim]`` (or ``[num_classes]``)."""
        X, squeeze = self._prepare(X)
        _, h, _ = self.features(X, training)
        for layer in self.head:
            h = dropout(layer(h, training), self.config.dropout, training, rng)
        logits = self.out(h)
        return reshape(logits, logits.shape[1:]) if squeeze else logits


class DfaSegmenter(_Backbone):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        dt = config.dtype
        self.category = (Linear(config.num_categories, config.w(config.category_dim), rng, dt)
                         if config.use_category_vector else None)
        widths = [config.global_width + config.local_width] + [config.w(c) for c in config.head_widths]
        self.head = [LinearBNAct(a, b, rng, dt) for a, b in zip(widths, widths[1:])]
        self.out = Linear(widths[-1], config.num_parts, rng, dt)

    def one_hot(self, categories, batch: int) -> np.ndarray:
        cats = np.asarray(categories)
        if cats.ndim == 2:
            return cats.astype(self.config.dtype)
        cats = np.broadcast_to(cats.reshape(-1), (batch,))
        if cats.min() < 0 or cats.max() >= self.config.num_categories:
            raise ValueError(f"category index out of range [0, {self.config.num_categories})")
        oh = np.zeros((batch, self.config.num_categories), dtype=self.config.dtype)
        oh[np.arange(batch), cats] = 1.0
        return oh

    def __call__(self, X, categories=None, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Per-point logits ``[B, N, num_parts]``.

        ``categories`` are integer category ids (or one-hot rows) and must be
        given exactly when the model uses a category vector.
        """
        X, squeeze = self._prepare(X)
        if self.category is None and categories is not None:
            raise ValueError("this segmenter takes no category vector")
        if self.category is not None and categories is None:
            raise ValueError("part segmentation needs the object category")
        B, n = X.shape[0], X.shape[1]
        locals_, g, _ = self.features(X, training)
        if self.category is not None:
            g = concat([g, self.category(Tensor(self.one_hot(categories, B)))], axis=-1)
        h = concat([_tile_points(g, n)] + locals_, axis=-1)
        last = len(self.head) - 1
        for i, layer in enumerate(self.head):
            h = layer(h, training)
            if i < last:
                h = dropout(h, self.config.dropout, training, rng)
        logits = self.out(h)
        return reshape(logits, logits.shape[1:]) if squeeze else logits


def build_model(config: ModelConfig, seed: int = 0) -> _Backbone:
    rng = np.random.default_rng(seed)
    return DfaClassifier(config, rng) if config.task == CLS else DfaSegmenter(config, rng)


def count_parameters(config: ModelConfig) -> int:
    """Trainable scalars (weights, biases, BN scale/shift); running stats excluded."""
    return build_model(config).num_parameters()


def _linear_flops(layer, rows: int) -> int:
    lin = layer.linear if isinstance(layer, LinearBNAct) else layer
    return 2 * rows * lin.d_in * lin.d_out


def estimate_flops(config: ModelConfig, num_points: int | None = None) -> int:
    """Analytic FLOPs for one cloud.

    Counts ``2 * rows * d_in * d_out`` for every linear map, where ``rows`` is
    the number of points, edges (``N * k``) or 1 for per-cloud layers, plus
    ``N^2 * D`` per DFA layer for the distance matrix of its graph and
    ``2 * N * 9`` for applying the 3x3 transform.  Normalisation,
    activations and pooling are not counted.
    """
    n = num_points if num_points is not None else config.num_points
    model = build_model(config.with_(precision=32))
    total = 0
    t = model.transform
    total += sum(_linear_flops(layer, n) for layer in t.point_mlp)
    total += sum(_linear_flops(layer, 1) for layer in t.fc) + _linear_flops(t.out, 1)
    total += 2 * n * 9
    for layer in model.dfa:
        c = layer.config
        edges = n * min(c.k, n)
        graph_dim = c.d_in if c.graph_domain == FEATURE else 3
        total += n * n * graph_dim
        if layer.pos_mlp is not None:
            total += _linear_flops(layer.pos_mlp, edges)
        total += _linear_flops(layer.edge_mlp, edges)
        if layer.attn is not None:
            total += _linear_flops(layer.attn, edges)
    if model.global_branch is not None:
        total += _linear_flops(model.global_branch.mlp, n)
    total += _linear_flops(model.embed, n)
    head_rows = 1 if config.task == CLS else n
    total += sum(_linear_flops(layer, head_rows) for layer in model.head)
    total += _linear_flops(model.out, head_rows)
    if getattr(model, "category", None) is not None:
        total += _linear_flops(model.category, 1)
    return int(total)
