"""Keypoint-token detection head, heatmap losses and argmax decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import ShapeError, Tensor, as_tensor, gelu


@dataclass
class HeatmapSet:
    maps: np.ndarray  # (K, H', W')
    is_ground_truth: bool = False


class DetectionHead(Module):
    """Keypoint tokens cross-attend to the fine tokens; a shared MLP maps each to a heatmap."""

    def __init__(self, dim: int, heads: int, heatmap_height: int, heatmap_width: int,
                 hidden: int, rng: np.random.Generator):
        self.hw = (heatmap_height, heatmap_width)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, heads, rng)
        self.norm_out = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, heatmap_height * heatmap_width, rng)

    def __call__(self, fine: Tensor, keypoints: Tensor) -> Tensor:
        """(…, M, D) fine tokens, (…, K, D) keypoint tokens -> (…, K, H', W') heatmaps."""
        q = keypoints + self.cross(self.norm_q(keypoints), context=self.norm_kv(fine))
        logits = self.fc2(gelu(self.fc1(self.norm_out(q))))
        return logits.reshape(*logits.shape[:-1], *self.hw)


def decode_heatmaps(fine, keypoints, head: DetectionHead) -> HeatmapSet:
    return HeatmapSet(head(as_tensor(fine), as_tensor(keypoints)).data)


def heatmap_loss(pred, target) -> Tensor:
    """Mean squared error over every heatmap entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def total_loss(l_heatmap, l_mask, l_denoise, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return as_tensor(l_heatmap) + lam * (as_tensor(l_mask) + as_tensor(l_denoise))


def argmax_decode(maps) -> np.ndarray:
    """(…, K, H, W) -> (…, K, 2) integer (row, col) of each map's first maximum."""
    maps = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    *lead, h, w = maps.shape
    flat = maps.reshape(*lead, h * w).argmax(axis=-1)
    return np.stack([flat // w, flat % w], axis=-1)
