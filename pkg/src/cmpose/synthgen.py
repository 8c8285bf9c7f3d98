"""Synthetic stick-figure clips with ground-truth heatmaps.

Every sample is a pure function of ``(dataset_seed + index, tag)``: the
skeleton, background noise and corruption draw from independent child
streams of that seed, so clean and corrupted variants of one index share
the same figure and ground truth.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .embedder import VideoClip

JOINTS = (
    "head_top", "nose", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
PARENT = (1, 2, -1, 2, 2, 3, 4, 5, 6, 2, 2, 9, 10, 11, 12)
BONES = tuple((p, j) for j, p in enumerate(PARENT) if p >= 0)
TEMPLATE = np.array([
    (0.0, -19.0), (0.0, -15.0), (0.0, -11.0), (-6.0, -10.0), (6.0, -10.0),
    (-8.0, -3.0), (8.0, -3.0), (-9.0, 4.0), (9.0, 4.0), (-4.0, 3.0), (4.0, 3.0),
    (-4.5, 11.0), (4.5, 11.0), (-5.0, 19.0), (5.0, 19.0),
])
# per-joint blob brightness gives each joint a distinguishable signature
JOINT_LEVEL = np.linspace(0.6, 1.0, len(JOINTS))
BONE_LEVEL = 0.45
BACKGROUND_MEAN = 0.1
BACKGROUND_STD = 0.05
TAGS = ("clean", "occlude", "blur")
TAG_CODE = {t: i for i, t in enumerate(TAGS)}

MAGIC = b"CMSYN1"
VERSION = 1


def _depth_order() -> list[int]:
    order, pending = [], [2]
    while pending:
        j = pending.pop(0)
        order.append(j)
        pending.extend(c for c, p in enumerate(PARENT) if p == j)
    return order


_ORDER = _depth_order()


@dataclass
class SkeletonSequence:
    keypoints: np.ndarray  # (3, K, 2) as (x, y) pixels
    height: int
    width: int

    @property
    def bbox_diag(self) -> float:
        return bbox_diag(self.keypoints[1])


@dataclass
class Sample:
    clip: VideoClip
    gt_keypoints: np.ndarray  # (K, 2) keyframe (x, y)
    corruption_tag: str


def bbox_diag(keypoints: np.ndarray) -> float:
    span = keypoints.max(axis=0) - keypoints.min(axis=0)
    return float(np.hypot(span[0], span[1]))


def _rotate(v: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _pose(bend: np.ndarray, scale: float) -> np.ndarray:
    """Forward kinematics: each bone is the template bone rotated by its cumulative bend."""
    pts = np.zeros_like(TEMPLATE)
    total = np.zeros(len(PARENT))
    for j in _ORDER:
        p = PARENT[j]
        if p < 0:
            continue
        total[j] = total[p] + bend[j]
        pts[j] = pts[p] + scale * _rotate(TEMPLATE[j] - TEMPLATE[p], total[j])
    return pts


def sample_sequence(rng: np.random.Generator, height: int = 64, width: int = 48) -> SkeletonSequence:
    limb_sd = np.where(np.isin(np.arange(len(PARENT)), [0, 1]), 0.1, 0.3)
    bend = rng.normal(0.0, limb_sd)
    scale = rng.uniform(0.8, 1.05)
    frames = []
    for _ in range(3):
        jitter = rng.normal(0.0, 0.04, size=len(PARENT))
        frames.append(_pose(bend + jitter, scale))
    pts = np.stack(frames)  # (3, K, 2), relative to the neck

    velocity = rng.normal(0.0, 1.5, size=2)
    pts = pts + (np.arange(3) - 1)[:, None, None] * velocity

    margin = 2.0
    lo, hi = pts.reshape(-1, 2).min(axis=0), pts.reshape(-1, 2).max(axis=0)
    room = np.array([width - 1 - 2 * margin, height - 1 - 2 * margin])
    shrink = min(1.0, float(np.min(room / np.maximum(hi - lo, 1e-9))))
    if shrink < 1.0:
        mid = (lo + hi) / 2
        pts = mid + (pts - mid) * shrink
        lo, hi = pts.reshape(-1, 2).min(axis=0), pts.reshape(-1, 2).max(axis=0)
    # place the whole 3-frame trajectory inside the image
    slack = room - (hi - lo)
    offset = margin - lo + rng.uniform(0.0, 1.0, size=2) * np.maximum(slack, 0.0)
    return SkeletonSequence(pts + offset, height, width)


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_frame(keypoints: np.ndarray, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    img = BACKGROUND_MEAN + rng.normal(0.0, BACKGROUND_STD, size=(height, width))
    if len(keypoints) == len(JOINTS):
        for p, j in BONES:
            d = _segment_distance(px, py, keypoints[p], keypoints[j])
            img = np.maximum(img, BONE_LEVEL * np.clip(1.5 - d, 0.0, 1.0))
    for j, (x, y) in enumerate(keypoints):
        blob = JOINT_LEVEL[j % len(JOINT_LEVEL)] * np.exp(-((px - x) ** 2 + (py - y) ** 2) / 2.0)
        img = np.maximum(img, blob)
    return np.clip(img, 0.0, 1.0)


def render(seq: SkeletonSequence, rng: np.random.Generator) -> VideoClip:
    frames = np.stack([render_frame(seq.keypoints[f], seq.height, seq.width, rng) for f in range(3)])
    return VideoClip(frames)


def corrupt_video(clip: VideoClip, tag: str, rng: np.random.Generator,
                  keypoints: np.ndarray | None = None) -> VideoClip:
    if tag == "clean" or tag == "none":
        return VideoClip(clip.frames.copy(), clip.person_id)
    frames = clip.frames.copy()
    _, h, w = frames.shape
    if tag == "occlude":
        top, left, rh, rw = occlusion_box(h, w, rng, keypoints)
        frames[1, top:top + rh, left:left + rw] = BACKGROUND_MEAN
    elif tag == "blur":
        frames = np.stack([gaussian_filter(f, sigma=2.0, mode="reflect") for f in frames])
    else:
        raise ValueError(f"unknown corruption tag {tag!r}")
    return VideoClip(frames, clip.person_id)


def occlusion_box(h: int, w: int, rng: np.random.Generator,
                  keypoints: np.ndarray | None = None) -> tuple[int, int, int, int]:
    """A rectangle covering 10-25% of the frame, centred on a random joint when given."""
    frac = rng.uniform(0.10, 0.25)
    aspect = rng.uniform(0.6, 1.6)
    area = frac * h * w
    rh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
    rw = int(np.clip(round(area / rh), 1, w))
    if keypoints is not None:
        cx, cy = keypoints[rng.integers(len(keypoints))]
    else:
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    top = int(np.clip(round(cy - rh / 2), 0, h - rh))
    left = int(np.clip(round(cx - rw / 2), 0, w - rw))
    return top, left, rh, rw


def make_gt_heatmaps(keypoints: np.ndarray, image_hw: tuple[int, int], heatmap_hw: tuple[int, int],
                     sigma: float = 2.0) -> np.ndarray:
    """(…, K, 2) keyframe (x, y) -> (…, K, H', W') Gaussians peaking at 1 on the scaled pixel."""
    keypoints = np.asarray(keypoints, dtype=np.float64)
    hh, hw = heatmap_hw
    centre = heatmap_pixel(keypoints, image_hw, heatmap_hw)
    ys = np.arange(hh, dtype=np.float64)
    xs = np.arange(hw, dtype=np.float64)
    gy = np.exp(-((ys - centre[..., 1:2]) ** 2) / (2 * sigma**2))
    gx = np.exp(-((xs - centre[..., 0:1]) ** 2) / (2 * sigma**2))
    return gy[..., :, None] * gx[..., None, :]


def heatmap_pixel(keypoints: np.ndarray, image_hw: tuple[int, int], heatmap_hw: tuple[int, int]) -> np.ndarray:
    """Integer (x, y) heatmap pixel of each keypoint."""
    sx = heatmap_hw[1] / image_hw[1]
    sy = heatmap_hw[0] / image_hw[0]
    x = np.clip(np.round(keypoints[..., 0] * sx), 0, heatmap_hw[1] - 1)
    y = np.clip(np.round(keypoints[..., 1] * sy), 0, heatmap_hw[0] - 1)
    return np.stack([x, y], axis=-1)


# datasets -----------------------------------------------------------------


def parse_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        if not part.strip():
            continue
        tag, _, weight = part.partition(":")
        tag = tag.strip()
        if tag not in TAG_CODE:
            raise ValueError(f"unknown corruption tag {tag!r} in mix {text!r}")
        mix[tag] = float(weight) if weight else 1.0
    total = sum(mix.values())
    if not mix or total <= 0:
        raise ValueError(f"empty corruption mix {text!r}")
    return {t: w / total for t, w in mix.items()}


def make_sample(seed: int, tag: str | None = None, mix: dict[str, float] | None = None,
                height: int = 64, width: int = 48) -> Sample:
    seq_ss, render_ss, tag_ss, corrupt_ss = np.random.SeedSequence(seed).spawn(4)
    seq = sample_sequence(np.random.default_rng(seq_ss), height, width)
    clip = render(seq, np.random.default_rng(render_ss))
    if tag is None:
        tags = list((mix or {"clean": 1.0}).items())
        tag = tags[np.random.default_rng(tag_ss).choice(len(tags), p=[w for _, w in tags])][0]
    clip = corrupt_video(clip, tag, np.random.default_rng(corrupt_ss), seq.keypoints[1])
    return Sample(clip, seq.keypoints[1].copy(), tag)


@dataclass
class Dataset:
    frames: np.ndarray  # (M, 3, H, W) float32
    keypoints: np.ndarray  # (M, K, 2) float32
    tags: np.ndarray  # (M,) uint8 codes
    seed: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def tag_names(self) -> np.ndarray:
        return np.array(TAGS)[self.tags]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.keypoints[idx], self.tags[idx], self.seed)


def generate_dataset(seed: int, count: int, mix: dict[str, float] | str = "clean:1",
                     paired: bool = False, height: int = 64, width: int = 48) -> Dataset:
    """``count`` samples; with ``paired`` every index is emitted once per tag in the mix."""
    if isinstance(mix, str):
        mix = parse_mix(mix)
    frames, kps, tags = [], [], []
    for i in range(count):
        variants = list(mix) if paired else [None]
        for tag in variants:
            s = make_sample(seed + i, tag, mix, height, width)
            frames.append(s.clip.frames)
            kps.append(s.gt_keypoints)
            tags.append(TAG_CODE[s.corruption_tag])
    return Dataset(
        np.asarray(frames, dtype=np.float32),
        np.asarray(kps, dtype=np.float32),
        np.asarray(tags, dtype=np.uint8),
        seed,
    )


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    m, _, h, w = ds.frames.shape
    k = ds.keypoints.shape[1]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIHHHq", VERSION, m, h, w, k, ds.seed))
        for i in range(m):
            fh.write(ds.frames[i].astype("<f4").tobytes())
            fh.write(ds.keypoints[i].astype("<f4").tobytes())
            fh.write(struct.pack("<B", int(ds.tags[i])))
    with open(index_path(path), "w") as fh:
        for i in range(m):
            kp = ds.keypoints[i].astype(np.float64)
            rec = {"index": i, "tag": TAGS[ds.tags[i]], "keypoints": kp.tolist(), "bbox_diag": bbox_diag(kp)}
            fh.write(json.dumps(rec) + "\n")


def index_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".jsonl")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if raw[:6] != MAGIC:
        raise ValueError(f"{path} is not a synthetic dataset file (bad magic)")
    version, m, h, w, k, seed = struct.unpack_from("<HIHHHq", raw, 6)
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    rec = np.dtype([("frames", "<f4", (3, h, w)), ("kp", "<f4", (k, 2)), ("tag", "u1")])
    body = np.frombuffer(raw, dtype=rec, count=m, offset=6 + struct.calcsize("<HIHHHq"))
    return Dataset(body["frames"].astype(np.float32), body["kp"].astype(np.float32),
                   body["tag"].astype(np.uint8), seed)
