"""The assembled pose model: embedder, shared criss-cross network, FTE and head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ccstan import CrissCross
from .config import ExperimentConfig
from .corruption import batch_recon_loss
from .embedder import PatchEmbedder
from .fte import Choices, FineTokenEnhancer
from .head import DetectionHead, heatmap_loss, total_loss
from .nn import Module
from .tensor import Tensor, no_grad, precision


@dataclass
class AuxInputs:
    """Row-wise corruption for one batch: keep flags (B, 3N, 1) and noise offsets (B, 3N, D)."""

    mask_keep: np.ndarray | None = None
    noise_keep: np.ndarray | None = None
    noise_offset: np.ndarray | None = None


@dataclass
class Output:
    heatmaps: Tensor
    features: Tensor  # F_v, the clip's initial tokens
    choices: Choices | None
    mask_recon: Tensor | None = None
    noise_recon: Tensor | None = None


@dataclass
class Losses:
    total: Tensor
    heatmap: Tensor
    mask: Tensor
    denoise: Tensor


class CMPose(Module):
    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        self.cfg = cfg
        with precision(cfg.dtype):
            self._build(cfg, rng)

    def _build(self, cfg: ExperimentConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.embed = PatchEmbedder(cfg.image_height, cfg.image_width, cfg.patch_size, d, cfg.num_keypoints, rng)
        self.net = CrissCross(d, cfg.heads, cfg.depth, cfg.mlp_ratio, rng)
        self.fte = FineTokenEnhancer(d, cfg.num_keypoints, cfg.causal_per_keypoint, cfg.num_clusters, cfg.knn_k, rng)
        self.head = DetectionHead(d, cfg.heads, cfg.heatmap_height, cfg.heatmap_width, cfg.head_hidden, rng)

    def primary(self, features: Tensor, choices: Choices | None = None) -> tuple[Tensor, Choices | None]:
        refined, kp = self.net(features, self.embed.keypoints)
        if self.cfg.use_fte:
            fine, choices = self.fte(refined, kp, self.cfg.use_noncausal_tokens, choices)
        else:
            fine = self.fte.temporal_fuse(refined)
        return self.head(fine, kp), choices

    def __call__(self, frames: np.ndarray, aux: AuxInputs | None = None,
                 choices: Choices | None = None) -> Output:
        with precision(self.cfg.dtype):
            return self._forward(frames, aux, choices)

    def _forward(self, frames, aux, choices) -> Output:
        features = self.embed(frames).feature_tokens
        heat, choices = self.primary(features, choices)
        out = Output(heat, features, choices)
        if aux is not None and aux.mask_keep is not None:
            out.mask_recon, _ = self.net(features * aux.mask_keep, self.embed.keypoints)
        if aux is not None and aux.noise_offset is not None:
            out.noise_recon, _ = self.net(features + aux.noise_offset, self.embed.keypoints)
        return out

    def predict(self, frames: np.ndarray) -> np.ndarray:
        """Primary branch only; no corruption is ever constructed."""
        with no_grad():
            return self(frames).heatmaps.data


def compute_losses(out: Output, gt_heatmaps: np.ndarray, aux: AuxInputs | None, lam: float,
                   recon_target: np.ndarray | None = None) -> Losses:
    """Total loss with reconstruction targets held fixed (no gradient into the target tokens)."""
    with precision(out.heatmaps.data.dtype):
        return _losses(out, gt_heatmaps, aux, lam, recon_target)


def _losses(out, gt_heatmaps, aux, lam, recon_target) -> Losses:
    l_h = heatmap_loss(out.heatmaps, gt_heatmaps)
    target = out.features.data if recon_target is None else recon_target
    zero = Tensor(0.0)
    l_m = batch_recon_loss(out.mask_recon, target, aux.mask_keep) if out.mask_recon is not None else zero
    l_n = batch_recon_loss(out.noise_recon, target, aux.noise_keep) if out.noise_recon is not None else zero
    return Losses(total_loss(l_h, l_m, l_n, lam), l_h, l_m, l_n)
