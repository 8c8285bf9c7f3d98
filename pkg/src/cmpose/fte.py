"""Fine token enhancement.

Temporal fusion of the refined clip tokens, keypoint-attention scoring,
causal/non-causal split, DPC-KNN clustering of the non-causal tokens and
importance-weighted merging. Index choices (top-n, centers, assignment) are
discrete and carry no gradient; token values, scores and merge weights do.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .embedder import ConfigError
from .nn import Linear, Module, param
from .tensor import ShapeError, Tensor, as_tensor, concat, gather_rows, softmax, take_along


@dataclass
class SelectionResult:
    causal_indices: np.ndarray  # in selection order, length n*K
    noncausal_indices: np.ndarray  # ascending
    n: int


@dataclass
class ClusterResult:
    rho: np.ndarray
    delta: np.ndarray
    score: np.ndarray
    center_indices: np.ndarray  # ranked by score, descending
    assignment: np.ndarray  # cluster slot (position in center_indices) per token


@dataclass
class Choices:
    """Per-sample discrete decisions, reusable to replay a forward pass exactly."""

    causal: np.ndarray  # (B, nK)
    noncausal: np.ndarray  # (B, m)
    assignment: np.ndarray  # (B, m) cluster slot per non-causal token
    num_clusters: int


def select_causal(scores: np.ndarray, n: int) -> SelectionResult:
    """Each keypoint in turn claims its n best tokens not yet claimed; ties go to lower index."""
    scores = np.asarray(scores)
    K, N = scores.shape
    if n * K > N:
        raise ConfigError(f"n*K = {n * K} causal tokens exceed the {N} available")
    taken = np.zeros(N, dtype=bool)
    chosen: list[int] = []
    for i in range(K):
        # stable sort on -score keeps lower indices first among equal scores
        order = np.argsort(-scores[i], kind="stable")
        picked = order[~taken[order]][:n]
        taken[picked] = True
        chosen.extend(int(j) for j in picked)
    return SelectionResult(np.array(chosen, dtype=np.int64), np.flatnonzero(~taken).astype(np.int64), n)


def dpc_knn(x: np.ndarray, k: int, L: int) -> ClusterResult:
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m == 0:
        empty = np.zeros(0)
        return ClusterResult(empty, empty, empty, np.zeros(0, np.int64), np.zeros(0, np.int64))
    k = max(0, min(k, m - 1))
    L = max(1, min(L, m))
    # accumulate in index order (numpy's unrolled reductions reorder sums of >= 8 terms),
    # so the result is reproducible bit-for-bit by a plain sequential implementation
    d2 = np.zeros((m, m))
    for c in range(x.shape[1]):
        diff = x[:, c, None] - x[None, :, c]
        d2 += diff * diff
    dist = np.sqrt(d2)

    others = d2.copy()
    np.fill_diagonal(others, np.inf)
    if k:
        nearest = np.sort(others, axis=1)[:, :k]
        total = np.zeros(m)
        for j in range(k):
            total += nearest[:, j]
        # libm exp rather than numpy's vectorised one, which can differ by an ulp between builds
        rho = np.array([math.exp(-t / k) for t in total])
    else:
        rho = np.ones(m)

    denser = rho[None, :] > rho[:, None]
    has_denser = denser.any(axis=1)
    to_denser = np.where(denser, dist, np.inf).min(axis=1)
    delta = np.where(has_denser, to_denser, dist.max(axis=1))

    score = rho * delta
    ranked = np.lexsort((np.arange(m), -score))
    centers = ranked[:L].astype(np.int64)
    # argmin over centers sorted by token index breaks distance ties by lower center index
    by_index = np.sort(centers)
    slot_of = {int(c): s for s, c in enumerate(centers)}
    nearest_center = by_index[np.argmin(dist[:, by_index], axis=1)]
    assignment = np.array([slot_of[int(c)] for c in nearest_center], dtype=np.int64)
    assignment[centers] = np.arange(L)
    return ClusterResult(rho, delta, score, centers, assignment)


IMPORTANCE_FLOOR = 1e-30


def merge_weights(importance: Tensor, assignment: np.ndarray, L: int) -> Tensor:
    """(…, m) importances -> (…, L, m) weights, renormalised to sum to 1 within each cluster."""
    assignment = np.asarray(assignment)
    member = (assignment[..., None, :] == np.arange(L)[:, None]).astype(np.float64)
    lead = importance.shape[:-1]
    # the floor keeps a cluster whose importances all underflow to 0 finite (uniform weights in
    # that limit); it is below one ulp of any importance that has not underflowed
    num = (importance.reshape(*lead, 1, importance.shape[-1]) + IMPORTANCE_FLOOR) * member
    den = num.sum(axis=-1, keepdims=True)
    return num / den


def merge_clusters(tokens, importance, assignment: np.ndarray, L: int) -> Tensor:
    """Importance-weighted sum of each cluster's tokens; tokens (…, m, D) -> (…, L, D)."""
    tokens, importance = as_tensor(tokens), as_tensor(importance)
    if L == 0 or tokens.shape[-2] == 0:
        return Tensor(np.zeros((*tokens.shape[:-2], 0, tokens.shape[-1])))
    return merge_weights(importance, assignment, L) @ tokens


def assemble_fine(causal, merged) -> Tensor:
    causal, merged = as_tensor(causal), as_tensor(merged)
    if causal.shape[-1] != merged.shape[-1]:
        raise ShapeError(f"token width mismatch: {causal.shape} vs {merged.shape}")
    if merged.shape[-2] == 0:
        return causal
    return concat([causal, merged], axis=-2)


class FineTokenEnhancer(Module):
    def __init__(self, dim: int, num_keypoints: int, n_per_keypoint: int, num_clusters: int,
                 knn_k: int, rng: np.random.Generator):
        self.fusion = Linear(3 * dim, dim, rng)
        eye = np.eye(dim)
        self.fusion.weight = param(np.vstack([eye, eye, eye]) / 3 + rng.normal(0.0, 0.02, size=(3 * dim, dim)))
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.n = n_per_keypoint
        self.num_clusters = num_clusters
        self.knn_k = knn_k
        self.K = num_keypoints

    def temporal_fuse(self, refined: Tensor) -> Tensor:
        *lead, rows, d = refined.shape
        if rows % 3:
            raise ShapeError(f"refined token rows {rows} are not a multiple of 3")
        n = rows // 3
        nl = len(lead)
        x = refined.reshape(*lead, 3, n, d).transpose(*range(nl), nl + 1, nl, nl + 2)
        return self.fusion(x.reshape(*lead, n, 3 * d))

    def keypoint_similarity(self, keypoints: Tensor, fused: Tensor) -> Tensor:
        d = fused.shape[-1]
        q = self.query(keypoints)
        k = self.key(fused)
        return softmax((q @ k.T) * (1.0 / np.sqrt(d)), axis=-1)

    def choose(self, scores: np.ndarray, fused: np.ndarray, use_noncausal: bool = True) -> Choices:
        B, _, N = scores.shape
        L_eff = min(self.num_clusters, N - self.n * self.K) if use_noncausal else 0
        causal, noncausal, assignment = [], [], []
        for b in range(B):
            sel = select_causal(scores[b], self.n)
            causal.append(sel.causal_indices)
            noncausal.append(sel.noncausal_indices)
            if L_eff > 0:
                assignment.append(dpc_knn(fused[b, sel.noncausal_indices], self.knn_k, L_eff).assignment)
            else:
                assignment.append(np.zeros(len(sel.noncausal_indices), dtype=np.int64))
        return Choices(np.stack(causal), np.stack(noncausal), np.stack(assignment), max(L_eff, 0))

    def __call__(self, refined: Tensor, keypoints: Tensor, use_noncausal: bool = True,
                 choices: Choices | None = None) -> tuple[Tensor, Choices]:
        """(B, 3N, D) refined tokens and (B, K, D) keypoint tokens -> fine tokens (B, nK + L, D)."""
        fused = self.temporal_fuse(refined)
        scores = self.keypoint_similarity(keypoints, fused)
        if choices is None:
            choices = self.choose(scores.data, fused.data, use_noncausal)
        causal_tokens = gather_rows(fused, choices.causal)
        if choices.num_clusters == 0:
            return causal_tokens, choices
        nc_tokens = gather_rows(fused, choices.noncausal)
        B, K, _ = scores.shape
        m = choices.noncausal.shape[1]
        nc_scores = take_along(scores, np.broadcast_to(choices.noncausal[:, None, :], (B, K, m)), axis=-1)
        importance = nc_scores.mean(axis=-2)
        merged = merge_clusters(nc_tokens, importance, choices.assignment, choices.num_clusters)
        return assemble_fine(causal_tokens, merged), choices
