"""Linear patch embedding of 3-frame clips plus learnable keypoint tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, Module, param
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class VideoClip:
    frames: np.ndarray  # (3, H, W), values in [0, 1]
    person_id: int = 0
    keyframe_index: int = 1

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] != 3:
            raise ValueError(f"a clip holds exactly 3 frames of shape (H, W), got {self.frames.shape}")


@dataclass
class TokenBatch:
    feature_tokens: Tensor  # (..., 3N, D), frame-major
    keypoint_tokens: Tensor  # (..., K, D)
    N: int

    @property
    def D(self) -> int:
        return self.feature_tokens.shape[-1]

    @property
    def K(self) -> int:
        return self.keypoint_tokens.shape[-2]


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(..., 3, H, W) -> (..., 3 * N, patch * patch), frame-major, row-major patches."""
    *lead, t, h, w = frames.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = frames.reshape(*lead, t, gh, patch, gw, patch)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 1, n + 3, n + 2, n + 4)
    return x.reshape(*lead, t * gh * gw, patch * patch)


def sincos_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """(rows * cols, dim) positional code: half the channels encode the row, half the column."""
    quarter = dim // 4
    freq = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    parts = []
    for coord in (r.reshape(-1), c.reshape(-1)):
        ang = coord[:, None] * freq[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    code = np.concatenate(parts, axis=1)
    out = np.zeros((rows * cols, dim))
    out[:, :code.shape[1]] = code
    return out


def init_keypoint_tokens(K: int, D: int, rng: np.random.Generator) -> Tensor:
    if K < 1 or D < 1:
        raise ConfigError(f"need K, D >= 1, got K={K}, D={D}")
    return param(rng.normal(0.0, 0.02, size=(K, D)))


class PatchEmbedder(Module):
    def __init__(self, image_height: int, image_width: int, patch_size: int, embed_dim: int,
                 num_keypoints: int, rng: np.random.Generator):
        if image_height % patch_size or image_width % patch_size:
            raise ConfigError(
                f"image {image_height}x{image_width} is not divisible by patch size {patch_size}"
            )
        self.patch_size = patch_size
        self.N = (image_height // patch_size) * (image_width // patch_size)
        self.proj = Linear(patch_size * patch_size, embed_dim, rng, std=1.0 / patch_size)
        # learnable, initialised to a 2D sine-cosine grid code
        self.pos = param(sincos_2d(image_height // patch_size, image_width // patch_size, embed_dim))
        self.time = param(rng.normal(0.0, 0.02, size=(3, 1, embed_dim)))
        self.keypoints = init_keypoint_tokens(num_keypoints, embed_dim, rng)

    def __call__(self, frames) -> TokenBatch:
        """Embed a ``VideoClip`` or a stacked ``(B, 3, H, W)`` array of frames."""
        if isinstance(frames, VideoClip):
            frames = frames.frames
        frames = np.asarray(frames, dtype=np.float64)
        patches = patchify(frames, self.patch_size)
        lead = patches.shape[:-2]
        d = self.pos.shape[-1]
        tokens = self.proj(Tensor(patches))
        tokens = tokens.reshape(*lead, 3, self.N, d) + self.pos + self.time
        tokens = tokens.reshape(*lead, 3 * self.N, d)
        return TokenBatch(tokens, self.keypoints, self.N)


def patchify_embed(clip: VideoClip, embedder: PatchEmbedder) -> TokenBatch:
    return embedder(clip)
