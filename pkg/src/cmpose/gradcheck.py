"""Finite-difference gradient checks.

Two layers:

* an op suite that checks every differentiable primitive in isolation, so a
  broken backward rule is reported by name;
* a model check over a toy configuration that perturbs every parameter group
  along a random direction through the full training loss (primary heatmap
  loss plus both reconstruction losses).

Discrete decisions (causal selection, cluster assignment) and the
reconstruction target are frozen at the unperturbed point so the loss is a
smooth function of the parameters inside the finite-difference stencil.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .model import AuxInputs, CMPose, compute_losses
from .synthgen import make_gt_heatmaps
from .corruption import plan_corruption, stack_plans
from .tensor import Tensor

STEP = 1e-6
TOLERANCE = 1e-4
# directional derivatives below this (analytic and numeric) count as structurally zero
ZERO_FLOOR = 1e-7


def toy_config(**changes) -> ExperimentConfig:
    base = dict(
        image_height=4, image_width=6, patch_size=2, embed_dim=8, num_keypoints=3,
        heads=2, depth=1, mlp_ratio=2.0, causal_per_keypoint=1, num_clusters=2, knn_k=2,
        heatmap_height=4, heatmap_width=6, head_hidden=8, gt_sigma=1.0,
        mask_ratio=0.4, noise_ratio=0.4, noise_sigma=0.5, dtype="float64",
    )
    base.update(changes)
    return ExperimentConfig(**base)


@dataclass
class GroupResult:
    name: str
    rel_error: float
    max_abs_grad: float
    checked: int

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.rel_error <= tol


@dataclass
class Report:
    groups: list[GroupResult] = field(default_factory=list)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tolerance) for g in self.groups)

    @property
    def failures(self) -> list[str]:
        return [g.name for g in self.groups if not g.passed(self.tolerance)]

    @property
    def max_rel_error(self) -> float:
        return max((g.rel_error for g in self.groups), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            status = "ok  " if g.passed(self.tolerance) else "FAIL"
            out.append(f"{status} {g.name:<40s} rel_err={g.rel_error:.3e} |g|max={g.max_abs_grad:.3e} n={g.checked}")
        verdict = "PASS" if self.passed else "FAIL (" + ", ".join(self.failures) + ")"
        out.append(f"gradcheck {verdict}: max rel_err {self.max_rel_error:.3e} (tol {self.tolerance:g})")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale < ZERO_FLOOR:
        return 0.0 if diff < ZERO_FLOOR else float("inf")
    return float(diff / scale)


def _fd(fn, arr: np.ndarray, idx: tuple, step: float) -> float:
    old = arr[idx]
    arr[idx] = old + step
    up = fn()
    arr[idx] = old - step
    down = fn()
    arr[idx] = old
    return (up - down) / (2 * step)


# op suite -------------------------------------------------------------------


def _op_cases(rng: np.random.Generator):
    """(op name, input arrays, builder) triples; builder maps input Tensors to an output Tensor."""
    r = lambda *s: rng.normal(size=s)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    idx = rng.integers(0, 4, size=(2, 3))
    return [
        ("Add", [r(2, 3), r(3)], lambda a, b: a + b),
        ("Sub", [r(2, 3), r(2, 1)], lambda a, b: a - b),
        ("Mul", [r(2, 3), r(1, 3)], lambda a, b: a * b),
        ("Div", [r(2, 3), pos(2, 3)], lambda a, b: a / b),
        ("Neg", [r(2, 3)], lambda a: -a),
        ("PowScalar", [pos(2, 3)], lambda a: a ** 1.5),
        ("PowScalar(2)", [r(2, 3)], lambda a: a ** 2),
        ("Exp", [r(2, 3)], T.exp),
        ("Gelu", [r(3, 4)], T.gelu),
        ("Sum", [r(2, 3, 4)], lambda a: a.sum(axis=(0, 2), keepdims=True)),
        ("Reshape", [r(2, 6)], lambda a: a.reshape(3, 4)),
        ("Transpose", [r(2, 3, 4)], lambda a: a.transpose(2, 0, 1)),
        ("BroadcastTo", [r(1, 3)], lambda a: T.broadcast_to(a, (4, 3))),
        ("Concat", [r(2, 3), r(1, 3)], lambda a, b: T.concat([a, b], axis=0)),
        ("GetItem", [r(4, 3)], lambda a: a[np.array([0, 2, 2])]),
        ("TakeAlong", [r(2, 4, 3)], lambda a: T.gather_rows(a, idx)),
        ("MatMul", [r(2, 3, 4), r(4, 5)], T.matmul),
        ("MatMul(batched)", [r(2, 3, 4), r(2, 4, 2)], T.matmul),
        ("Softmax", [r(3, 5)], lambda a: T.softmax(a, axis=-1)),
        ("LayerNorm", [r(3, 6), pos(6), r(6)], T.layer_norm),
    ]


def check_ops(seed: int = 0, step: float = STEP) -> list[GroupResult]:
    with T.precision(np.float64):
        return _check_ops(seed, step)


def _check_ops(seed: int, step: float) -> list[GroupResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, arrays, build in _op_cases(rng):
        weights = rng.normal(size=build(*[Tensor(a) for a in arrays]).shape)
        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        (build(*inputs) * weights).sum().backward()

        def loss():
            return float(((build(*[Tensor(t.data) for t in inputs]).data) * weights).sum())

        errs, gmax = [], 0.0
        for t in inputs:
            num = np.zeros_like(t.data)
            for i in np.ndindex(t.shape):
                num[i] = _fd(loss, t.data, i, step)
            errs.append(relative_error(t.grad, num))
            gmax = max(gmax, float(np.abs(t.grad).max()))
        results.append(GroupResult(f"op:{name}", max(errs), gmax, sum(t.size for t in inputs)))
    return results


# model check ----------------------------------------------------------------


def _toy_problem(cfg: ExperimentConfig, seed: int, batch: int = 2):
    rng = np.random.default_rng(seed)
    model = CMPose(cfg, rng)
    # move away from the near-symmetric initialisation so every path carries signal
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
    frames = rng.uniform(0.0, 1.0, size=(batch, 3, cfg.image_height, cfg.image_width))
    kps = np.stack([rng.uniform([0, 0], [cfg.image_width - 1, cfg.image_height - 1], size=(cfg.num_keypoints, 2))
                    for _ in range(batch)])
    gt = make_gt_heatmaps(kps, (cfg.image_height, cfg.image_width), (cfg.heatmap_height, cfg.heatmap_width),
                          cfg.gt_sigma)
    n_tokens = 3 * cfg.tokens_per_frame
    masks = [plan_corruption(n_tokens, cfg.mask_ratio, "mask", seed=seed * 7 + b) for b in range(batch)]
    noises = [plan_corruption(n_tokens, cfg.noise_ratio, "noise", cfg.noise_sigma, seed * 7 + 100 + b, cfg.embed_dim)
              for b in range(batch)]
    aux = AuxInputs()
    aux.mask_keep, _ = stack_plans(masks, cfg.embed_dim)
    aux.noise_keep, aux.noise_offset = stack_plans(noises, cfg.embed_dim)
    return model, frames, gt, aux


def check_model(cfg: ExperimentConfig | None = None, seed: int = 0, step: float = STEP,
                lam: float = 0.01) -> list[GroupResult]:
    """Directional finite differences, one random direction per parameter group.

    The error of a group is ``|g.v - fd(v)| / (|g| |v|)``: the directional
    derivative mismatch relative to the largest derivative the group can have.
    ``lam`` keeps the reconstruction terms on the scale of the heatmap loss so
    their round-off does not swamp the small heatmap-path gradients.
    """
    cfg = cfg or toy_config()
    model, frames, gt, aux = _toy_problem(cfg, seed)
    out = model(frames, aux)
    choices = out.choices
    target = out.features.data.copy()
    compute_losses(out, gt, aux, lam, recon_target=target).total.backward()
    params = dict(model.named_parameters())

    def loss() -> float:
        with T.no_grad():
            o = model(frames, aux, choices=choices)
            return compute_losses(o, gt, aux, lam, recon_target=target).total.item()

    rng = np.random.default_rng(seed + 10_000)
    results = []
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = rng.normal(size=p.shape)
        base = p.data.copy()
        p.data = base + step * v
        up = loss()
        p.data = base - step * v
        down = loss()
        p.data = base
        numeric = (up - down) / (2 * step)
        analytic = float((grad * v).sum())
        scale = float(np.linalg.norm(grad) * np.linalg.norm(v))
        if max(scale, abs(numeric)) < ZERO_FLOOR:
            err = 0.0  # structurally zero gradient, e.g. a key bias under softmax shift invariance
        else:
            err = abs(analytic - numeric) / max(scale, abs(numeric))
        results.append(GroupResult(name, float(err), float(np.abs(grad).max()), p.size))
    return results


def gradcheck(seeds=range(20), cfg: ExperimentConfig | None = None, step: float = STEP, tol: float = TOLERANCE, include_ops: bool = True) -> Report:
    """Run the op suite and the model check; per group, keep the worst error over seeds."""
    t0 = time.perf_counter()
    worst: dict[str, GroupResult] = {}

    def keep(res: GroupResult):
        prev = worst.get(res.name)
        if prev is None or res.rel_error > prev.rel_error:
            checked = res.checked + (prev.checked if prev else 0)
            worst[res.name] = GroupResult(res.name, res.rel_error, res.max_abs_grad, checked)
        else:
            prev.checked += res.checked

    if include_ops:
        for r in check_ops(0, step):
            keep(r)
    for s in seeds:
        for r in check_model(cfg, int(s), step):
            keep(r)
    return Report(list(worst.values()), tol, time.perf_counter() - t0)
