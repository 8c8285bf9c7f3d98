"""Criss-cross spatio-temporal attention shared by the primary and auxiliary tasks.

Tokens are arranged on a (frame, position) grid of shape ``(..., 3, N + K, D)``
where the K keypoint tokens are replicated into every frame. The spatial block
attends along positions within a frame; the temporal block attends along the
three frames of one position. Pathway A runs spatial then temporal, pathway B
temporal then spatial; their outputs are concatenated on channels and fused.
"""
from __future__ import annotations

import numpy as np

from .nn import Block, Linear, Module, param
from .tensor import Tensor, broadcast_to, concat


class CrissCross(Module):
    def __init__(self, dim: int, heads: int, depth: int, mlp_ratio: float, rng: np.random.Generator):
        self.spatial = [Block(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.temporal = [Block(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        # near-identity init: untrained fusion averages the two pathways
        eye = np.eye(dim)
        self.fuse = Linear(2 * dim, dim, rng)
        self.fuse.weight = param(np.vstack([eye, eye]) / 2 + rng.normal(0.0, 0.02, size=(2 * dim, dim)))

    def spatial_attention(self, grid: Tensor, layer: int = 0) -> Tensor:
        return self.spatial[layer](grid)

    def temporal_attention(self, grid: Tensor, layer: int = 0) -> Tensor:
        nd = grid.ndim
        axes = list(range(nd))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        out = self.temporal[layer](grid.transpose(*axes))
        return out.transpose(*axes)

    def _spatial_stack(self, grid: Tensor) -> Tensor:
        for i in range(len(self.spatial)):
            grid = self.spatial_attention(grid, i)
        return grid

    def _temporal_stack(self, grid: Tensor) -> Tensor:
        for i in range(len(self.temporal)):
            grid = self.temporal_attention(grid, i)
        return grid

    def __call__(self, features: Tensor, keypoints: Tensor) -> tuple[Tensor, Tensor]:
        """(…, 3N, D) feature tokens and (K, D) or (…, K, D) keypoint tokens -> (F', F_k')."""
        grid = to_grid(features, keypoints)
        a = self._temporal_stack(self._spatial_stack(grid))
        b = self._spatial_stack(self._temporal_stack(grid))
        fused = self.fuse(concat([a, b], axis=-1))
        return from_grid(fused, features.shape[-2] // 3)


def to_grid(features: Tensor, keypoints: Tensor) -> Tensor:
    *lead, rows, d = features.shape
    if rows % 3:
        raise ValueError(f"feature rows {rows} are not a multiple of 3 frames")
    n = rows // 3
    k = keypoints.shape[-2]
    frames = features.reshape(*lead, 3, n, d)
    kp = keypoints.reshape(*keypoints.shape[:-2], 1, k, d)
    kp = broadcast_to(kp, (*lead, 3, k, d))
    return concat([frames, kp], axis=-2)


def from_grid(grid: Tensor, n: int) -> tuple[Tensor, Tensor]:
    *lead, t, rows, d = grid.shape
    feats = grid[(..., slice(0, n), slice(None))].reshape(*lead, t * n, d)
    kp = grid[(..., slice(n, rows), slice(None))].mean(axis=-3)
    return feats, kp


def criss_cross_forward(net: CrissCross, X: Tensor, n_feature_rows: int) -> tuple[Tensor, Tensor]:
    """Split a concatenated task input ``X = F ⊕ F_k`` and run the network."""
    feats = X[(..., slice(0, n_feature_rows), slice(None))]
    kp = X[(..., slice(n_feature_rows, X.shape[-2]), slice(None))]
    return net(feats, kp)
