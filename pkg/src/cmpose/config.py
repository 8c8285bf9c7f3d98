"""Experiment configuration: one flat dataclass, plain-text ``key = value`` files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .embedder import ConfigError

# file keys that are not valid Python identifiers
_ALIASES = {"lambda": "lambda_"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass
class ExperimentConfig:
    # embedder
    image_height: int = 64
    image_width: int = 48
    patch_size: int = 8
    embed_dim: int = 64
    num_keypoints: int = 15
    # corruption
    mask_ratio: float = 0.45
    noise_ratio: float = 0.45
    noise_sigma: float = 0.5
    corruption_seed_base: int = 1_000_000
    # criss-cross network
    depth: int = 1
    heads: int = 4
    mlp_ratio: float = 2.0
    # fine token enhancement
    causal_per_keypoint: int = 1
    num_clusters: int = 8
    knn_k: int = 5
    # head and losses
    heatmap_height: int = 64
    heatmap_width: int = 48
    head_hidden: int = 128
    gt_sigma: float = 2.0
    lambda_: float = 1.0
    # optimisation
    epochs: int = 8
    batch_size: int = 16
    lr: float = 2e-3
    lr_decay_epochs: tuple[int, ...] = (5, 7)
    lr_decay_factor: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    dtype: str = "float32"  # compute precision; gradient checks use float64
    # ablation flags
    use_mask_task: bool = True
    use_denoise_task: bool = True
    use_fte: bool = True
    use_noncausal_tokens: bool = True
    # data
    train_path: str = ""
    val_path: str = ""
    train_count: int = 2000
    val_count: int = 200
    data_seed: int = 0
    val_seed: int = 500_000
    corruption_mix: str = "clean:0.6,occlude:0.2,blur:0.2"
    probe_count: int = 256
    eval_batch_size: int = 64

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.validate()

    def validate(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("image size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        for key in ("mask_ratio", "noise_ratio"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lambda_ < 0:
            raise ConfigError("lambda must be non-negative")
        if self.causal_per_keypoint * self.num_keypoints > self.tokens_per_frame:
            raise ConfigError("causal_per_keypoint * num_keypoints exceeds tokens per frame")
        if min(self.epochs, self.train_count, self.val_count) < 0 or self.batch_size < 1:
            raise ConfigError("counts must be non-negative and batch_size positive")

    @property
    def tokens_per_frame(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def schedule(self) -> list[tuple[int, float]]:
        sched = [(0, self.lr)]
        for i, e in enumerate(self.lr_decay_epochs):
            sched.append((e, self.lr * self.lr_decay_factor ** (i + 1)))
        return sched

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[_REVERSE.get(f.name, f.name)] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = _ALIASES.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(known[name], value)
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return tuple(value) if f.type in ("tuple[int, ...]",) else value
    text = value.strip()
    kind = f.type
    try:
        if kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {f.name} ({kind})") from None
    return text


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key = value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    pairs = parse_pairs(Path(path).read_text().splitlines()) if path else {}
    pairs.update(parse_pairs(overrides or []))
    return ExperimentConfig.from_dict(pairs)
