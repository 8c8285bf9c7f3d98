"""Token masking and noising for the two reconstruction tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedder import ConfigError
from .tensor import ContractError, Tensor, as_tensor


@dataclass(frozen=True)
class CorruptionPlan:
    kind: str
    n_tokens: int
    corrupted_indices: np.ndarray  # sorted, unique
    noise_draws: np.ndarray | None  # (|M|, D) for kind == "noise"
    seed: int

    @property
    def flag(self) -> np.ndarray:
        """1 for untouched rows, 0 for corrupted rows."""
        f = np.ones(self.n_tokens, dtype=np.int8)
        f[self.corrupted_indices] = 0
        return f


def corruption_count(n_tokens: int, ratio: float) -> int:
    # round-half-even, matching Python's round()
    return int(round(n_tokens * ratio))


def plan_corruption(n_tokens: int, ratio: float, kind: str, sigma: float = 0.5, seed: int = 0,
                    dim: int | None = None) -> CorruptionPlan:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"corruption ratio must lie in [0, 1], got {ratio}")
    if kind not in ("mask", "noise"):
        raise ConfigError(f"unknown corruption kind {kind!r}")
    if kind == "noise" and (sigma <= 0 or dim is None):
        raise ConfigError("noise plans need sigma > 0 and the embedding dim")
    rng = np.random.default_rng(seed)
    count = corruption_count(n_tokens, ratio)
    idx = np.sort(rng.choice(n_tokens, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    draws = rng.normal(0.0, sigma, size=(count, dim)) if kind == "noise" else None
    return CorruptionPlan(kind, n_tokens, idx.astype(np.int64), draws, seed)


def _check(tokens: Tensor, plan: CorruptionPlan, kind: str):
    if plan.kind != kind:
        raise ContractError(f"expected a {kind} plan, got {plan.kind}")
    if tokens.shape[-2] != plan.n_tokens:
        raise ContractError(f"plan covers {plan.n_tokens} rows, tokens have {tokens.shape[-2]}")
    idx = plan.corrupted_indices
    if idx.size and (idx.min() < 0 or idx.max() >= plan.n_tokens):
        raise ContractError("corrupted index out of range")


def apply_mask(tokens, plan: CorruptionPlan) -> Tensor:
    tokens = as_tensor(tokens)
    _check(tokens, plan, "mask")
    keep = plan.flag.astype(np.float64)[:, None]
    return tokens * keep


def apply_noise(tokens, plan: CorruptionPlan) -> Tensor:
    tokens = as_tensor(tokens)
    _check(tokens, plan, "noise")
    offset = np.zeros(tokens.shape[-2:])
    offset[plan.corrupted_indices] = plan.noise_draws
    return tokens + offset


def recon_loss(reconstructed, original, plan: CorruptionPlan) -> Tensor:
    """Mean over corrupted rows of the squared L2 row error; 0 when nothing is corrupted."""
    reconstructed, original = as_tensor(reconstructed), as_tensor(original)
    if reconstructed.shape != original.shape:
        raise ContractError(f"shape mismatch {reconstructed.shape} vs {original.shape}")
    count = plan.corrupted_indices.size
    if count == 0:
        return Tensor(0.0)
    sel = (1 - plan.flag).astype(np.float64)[:, None]
    diff = (reconstructed - original) * sel
    return (diff * diff).sum() * (1.0 / count)


# batched forms used by training ----------------------------------------


def stack_plans(plans: list[CorruptionPlan], dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row keep flags (B, 3N, 1) and additive offsets (B, 3N, D) for a batch of plans."""
    n = plans[0].n_tokens
    keep = np.ones((len(plans), n, 1))
    offset = np.zeros((len(plans), n, dim))
    for b, plan in enumerate(plans):
        keep[b, plan.corrupted_indices, 0] = 0.0
        if plan.kind == "noise" and plan.corrupted_indices.size:
            offset[b, plan.corrupted_indices] = plan.noise_draws
    return keep, offset


def batch_recon_loss(reconstructed: Tensor, original, keep: np.ndarray) -> Tensor:
    """Batch mean of per-sample ``recon_loss`` given (B, 3N, 1) keep flags."""
    sel = 1.0 - keep
    counts = sel.sum(axis=(1, 2))
    if not counts.any():
        return Tensor(0.0)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None, None] / len(counts)
    diff = (reconstructed - original) * sel
    return (diff * diff * weights).sum()
