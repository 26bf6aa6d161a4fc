"""k-nearest-neighbour graphs over point features.

Graphs are dense ``[N, k]`` (or batched ``[B, N, k]``) index tables.  Slot 0
of every row is the point itself; the remaining ``k - 1`` slots hold the
nearest other points ordered by (squared distance, index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gather_rows, reshape

FEATURE = "feature"
SPATIAL = "spatial"

# rows of the distance matrix computed per block; bounds the [rows, N, D] temporary
_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True)
class NeighborGraph:
    indices: np.ndarray  # [N, k] or [B, N, k], int64
    k: int
    domain: str = FEATURE

    @property
    def batched(self) -> bool:
        return self.indices.ndim == 3


class NonFiniteError(ValueError):
    """Features contain NaN or infinity."""


def _check_finite(F: np.ndarray) -> None:
    bad = ~np.isfinite(F)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite feature value at index {where}")


def pairwise_sq_dist(F: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between all rows of ``F``.

    Computed by direct subtraction (not the ``|a|^2 + |b|^2 - 2ab``
    expansion) so equal rows give exactly equal distances, which keeps the
    index tie rule meaningful.  Accepts ``[N, D]`` or ``[B, N, D]``.
    """
    F = np.asarray(F)
    if F.ndim not in (2, 3) or F.shape[-2] < 1 or F.shape[-1] < 1:
        raise ValueError(f"expected [N, D] or [B, N, D] features, got shape {F.shape}")
    _check_finite(F)
    batched = F.ndim == 3
    Fb = F if batched else F[None]
    B, N, D = Fb.shape
    out = np.empty((B, N, N), dtype=F.dtype)
    rows = max(1, _BLOCK_ELEMS // max(1, N * D))
    for b in range(B):
        fb = Fb[b]
        for start in range(0, N, rows):
            diff = fb[start:start + rows, None, :] - fb[None, :, :]
            out[b, start:start + rows] = np.einsum("ijd,ijd->ij", diff, diff)
    idx = np.arange(N)
    out[:, idx, idx] = 0.0
    return out if batched else out[0]


def knn_select(dist: np.ndarray, k: int, domain: str = FEATURE) -> NeighborGraph:
    """Self first, then the ``k - 1`` closest other points (ties: lower index)."""
    dist = np.asarray(dist)
    N = dist.shape[-1]
    if not 1 <= k <= N:
        raise ValueError(f"k={k} must satisfy 1 <= k <= N={N}")
    key = dist.copy()
    idx = np.arange(N)
    key[..., idx, idx] = -np.inf
    if k == N:
        order = np.argsort(key, axis=-1, kind="stable")
        return NeighborGraph(order.astype(np.int64), k, domain)
    # keep everything strictly below the k-th smallest value, then fill the
    # remaining slots with the lowest-index ties at that value
    kth = np.partition(key, k - 1, axis=-1)[..., k - 1:k]
    below = key < kth
    need = k - below.sum(axis=-1, keepdims=True)
    tie = key == kth
    keep = below | (tie & (np.cumsum(tie, axis=-1) <= need))
    cand = (np.flatnonzero(keep) % N).reshape(key.shape[:-1] + (k,))
    # candidates are in ascending index order, so a stable sort by distance
    # applies the lower-index tie rule
    sub = np.take_along_axis(key, cand, axis=-1)
    order = np.take_along_axis(cand, np.argsort(sub, axis=-1, kind="stable"), axis=-1)
    return NeighborGraph(order.astype(np.int64), k, domain)


def build_graph(F: np.ndarray, k: int, domain: str = FEATURE) -> NeighborGraph:
    return knn_select(pairwise_sq_dist(F), k, domain)


def gather_neighbors(F: Tensor, graph: NeighborGraph) -> Tensor:
    """``out[..., i, m, :] = F[..., graph.indices[..., i, m], :]`` (differentiable)."""
    idx = graph.indices
    batched = F.ndim == 3
    N = F.shape[-2]
    if idx.shape[-2] != N:
        raise ValueError(f"graph has {idx.shape[-2]} rows but features have {N} points")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError(f"neighbour index out of range [0, {N})")
    if batched:
        return gather_rows(F, idx if idx.ndim == 3 else np.broadcast_to(idx, (F.shape[0],) + idx.shape))
    out = gather_rows(reshape(F, (1,) + F.shape), idx[None] if idx.ndim == 2 else idx)
    return reshape(out, out.shape[1:])
