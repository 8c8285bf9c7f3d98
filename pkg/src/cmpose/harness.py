"""Training loop, PCK evaluation, ablation and ratio-sweep runners."""
from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .embedder import ConfigError
from .corruption import plan_corruption, stack_plans
from .model import AuxInputs, CMPose, compute_losses
from .optim import AdamW
from .synthgen import TAGS, Dataset, bbox_diag, generate_dataset, load_dataset, make_gt_heatmaps
from .tensor import no_grad

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "tag", "L_H", "L_mask", "L_denoise", "L_total", "PCK@0.2"]
CORRUPTED = ("occlude", "blur")

# auxiliary-task variants, then fine-token-enhancement variants
ABLATION_VARIANTS = {
    "full": {},
    "mask_only": {"use_denoise_task": False},
    "denoise_only": {"use_mask_task": False},
    "primary_only": {"use_mask_task": False, "use_denoise_task": False},
    "causal_only": {"use_noncausal_tokens": False},
    "no_fte": {"use_fte": False},
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[dict]
    model: CMPose
    batch_seeds: list[int] = field(default_factory=list)


# data ----------------------------------------------------------------------


def load_or_generate(cfg: ExperimentConfig, split: str) -> Dataset:
    path = cfg.train_path if split == "train" else cfg.val_path
    if path:
        return load_dataset(path)
    if split == "train":
        return generate_dataset(cfg.data_seed, cfg.train_count, cfg.corruption_mix,
                                height=cfg.image_height, width=cfg.image_width)
    return generate_dataset(cfg.val_seed, cfg.val_count, "clean:1,occlude:1,blur:1", paired=True,
                            height=cfg.image_height, width=cfg.image_width)


def gt_heatmaps(cfg: ExperimentConfig, keypoints: np.ndarray) -> np.ndarray:
    return make_gt_heatmaps(keypoints, (cfg.image_height, cfg.image_width),
                            (cfg.heatmap_height, cfg.heatmap_width), cfg.gt_sigma)


def aux_inputs(cfg: ExperimentConfig, batch_seed: int, batch_size: int, run_seed: int) -> AuxInputs | None:
    if not (cfg.use_mask_task or cfg.use_denoise_task):
        return None
    n_tokens = 3 * cfg.tokens_per_frame
    aux = AuxInputs()

    def seed_for(b, kind):
        return int(np.random.SeedSequence([batch_seed, run_seed, b, kind]).generate_state(1)[0])

    if cfg.use_mask_task:
        plans = [plan_corruption(n_tokens, cfg.mask_ratio, "mask", seed=seed_for(b, 0)) for b in range(batch_size)]
        aux.mask_keep, _ = stack_plans(plans, cfg.embed_dim)
    if cfg.use_denoise_task:
        plans = [plan_corruption(n_tokens, cfg.noise_ratio, "noise", cfg.noise_sigma, seed_for(b, 1), cfg.embed_dim)
                 for b in range(batch_size)]
        aux.noise_keep, aux.noise_offset = stack_plans(plans, cfg.embed_dim)
    return aux


# metrics -------------------------------------------------------------------


def pck(pred_rc: np.ndarray, keypoints: np.ndarray, cfg: ExperimentConfig, alpha: float = 0.2) -> np.ndarray:
    """Per-keypoint hit mask: heatmap argmax (row, col) within alpha * bbox diagonal of the truth."""
    sx = cfg.heatmap_width / cfg.image_width
    sy = cfg.heatmap_height / cfg.image_height
    pred_xy = np.stack([pred_rc[..., 1] / sx, pred_rc[..., 0] / sy], axis=-1)
    dist = np.linalg.norm(pred_xy - keypoints, axis=-1)
    diag = np.array([bbox_diag(k) for k in keypoints.reshape(-1, *keypoints.shape[-2:])])
    return dist <= alpha * diag.reshape(keypoints.shape[:-2])[..., None]


def _tag_groups(ds: Dataset) -> dict[str, np.ndarray]:
    names = ds.tag_names
    groups = {t: np.flatnonzero(names == t) for t in TAGS if (names == t).any()}
    corrupted = np.flatnonzero(np.isin(names, CORRUPTED))
    if corrupted.size:
        groups["corrupted"] = corrupted
    groups["all"] = np.arange(len(ds))
    return groups


def predict_dataset(model: CMPose, ds: Dataset, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        out.append(model.predict(ds.frames[start:start + batch_size].astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0,))


def check_compatible(cfg: ExperimentConfig, ds: Dataset) -> None:
    """Raise ConfigError when a dataset's frame size or keypoint count does not fit the config."""
    if len(ds) == 0:
        return
    _, frames, h, w = ds.frames.shape
    k = ds.keypoints.shape[1]
    if (h, w) != (cfg.image_height, cfg.image_width) or k != cfg.num_keypoints:
        raise ConfigError(
            f"dataset holds {h}x{w} frames with {k} keypoints; config expects "
            f"{cfg.image_height}x{cfg.image_width} with {cfg.num_keypoints}"
        )


def evaluate_model(model: CMPose, ds: Dataset, tags=None) -> dict[str, dict[str, float]]:
    """PCK@0.2 and heatmap loss per tag group; only the primary branch is run."""
    from .head import argmax_decode

    cfg = model.cfg
    check_compatible(cfg, ds)
    hits, sq = [], []
    for start in range(0, len(ds), cfg.eval_batch_size):
        sl = slice(start, start + cfg.eval_batch_size)
        heat = model.predict(ds.frames[sl].astype(np.float64))
        kp = ds.keypoints[sl].astype(np.float64)
        hits.append(pck(argmax_decode(heat), kp, cfg))
        sq.append(((heat - gt_heatmaps(cfg, kp)) ** 2).mean(axis=(1, 2, 3)))
    hits = np.concatenate(hits) if hits else np.zeros((0, cfg.num_keypoints), bool)
    sq = np.concatenate(sq) if sq else np.zeros(0)
    result = {}
    for tag, idx in _tag_groups(ds).items():
        if tags is not None and tag not in tags:
            continue
        result[tag] = {"pck": float(hits[idx].mean()) if idx.size else math.nan,
                       "L_H": float(sq[idx].mean()) if idx.size else math.nan}
    return result


def evaluate(ckpt: Checkpoint, ds: Dataset, tags=None) -> dict[str, dict[str, float]]:
    return evaluate_model(ckpt.build_model(), ds, tags)


def probe_losses(model: CMPose, ds: Dataset, cfg: ExperimentConfig) -> dict[str, float]:
    """Training-mode losses and PCK on a fixed subset with fixed corruption draws."""
    from .head import argmax_decode

    idx = np.arange(min(cfg.probe_count, len(ds)))
    sums = {"L_H": 0.0, "L_mask": 0.0, "L_denoise": 0.0, "L_total": 0.0}
    hits = []
    with no_grad():
        for bi, start in enumerate(range(0, len(idx), cfg.batch_size)):
            b = idx[start:start + cfg.batch_size]
            frames = ds.frames[b].astype(np.float64)
            kp = ds.keypoints[b].astype(np.float64)
            aux = aux_inputs(cfg, cfg.corruption_seed_base - 1 - bi, len(b), cfg.seed)
            out = model(frames, aux)
            losses = compute_losses(out, gt_heatmaps(cfg, kp), aux, cfg.lambda_)
            w = len(b) / len(idx)
            sums["L_H"] += w * losses.heatmap.item()
            sums["L_mask"] += w * losses.mask.item()
            sums["L_denoise"] += w * losses.denoise.item()
            sums["L_total"] += w * losses.total.item()
            hits.append(pck(argmax_decode(out.heatmaps.data), kp, cfg))
    sums["PCK@0.2"] = float(np.concatenate(hits).mean()) if hits else math.nan
    return sums


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in METRIC_FIELDS})


def write_manifest(cfg: ExperimentConfig, path, extra: dict | None = None) -> None:
    from . import __version__

    manifest = {
        "config": cfg.to_dict(),
        "seeds": {"run": cfg.seed, "data": cfg.data_seed, "val": cfg.val_seed,
                  "corruption_base": cfg.corruption_seed_base},
        "versions": {"cmpose": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "metric": "PCK@0.2 (substitutes for PoseTrack mAP)",
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# training ------------------------------------------------------------------


def _epoch_rows(epoch: int, model: CMPose, cfg: ExperimentConfig, train: Dataset, val: Dataset) -> list[dict]:
    probe = probe_losses(model, train, cfg)
    rows = [{"epoch": epoch, "split": "train", "tag": "all", **probe}]
    for tag, m in evaluate_model(model, val).items():
        rows.append({"epoch": epoch, "split": "val", "tag": tag, "L_H": m["L_H"], "PCK@0.2": m["pck"]})
    return rows


def train(cfg: ExperimentConfig, train_set: Dataset | None = None, val_set: Dataset | None = None,
          out_dir=None, evaluate_each_epoch: bool = True, max_steps: int | None = None) -> TrainResult:
    train_set = train_set if train_set is not None else load_or_generate(cfg, "train")
    val_set = val_set if val_set is not None else load_or_generate(cfg, "val")
    check_compatible(cfg, train_set)
    check_compatible(cfg, val_set)
    init_ss, order_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = CMPose(cfg, np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(order_ss)
    opt = AdamW(model.parameters(), cfg.schedule, cfg.weight_decay)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_manifest(cfg, out_dir / "manifest.json")

    rows = _epoch_rows(0, model, cfg, train_set, val_set) if evaluate_each_epoch else []
    batch_seeds: list[int] = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = order_rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            b = np.sort(order[start:start + cfg.batch_size])
            batch_seed = cfg.corruption_seed_base + step
            batch_seeds.append(batch_seed)
            frames = train_set.frames[b].astype(np.float64)
            kp = train_set.keypoints[b].astype(np.float64)
            aux = aux_inputs(cfg, batch_seed, len(b), cfg.seed)
            out = model(frames, aux)
            losses = compute_losses(out, gt_heatmaps(cfg, kp), aux, cfg.lambda_)
            if not np.isfinite(losses.total.item()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; batch seed {batch_seed}, sample indices {b.tolist()}"
                )
            opt.zero_grad()
            losses.total.backward()
            opt.step(epoch)
            step += 1
        log.info("epoch %d done in %.1fs (L_total %.4g)", epoch + 1, time.perf_counter() - t0, losses.total.item())
        if evaluate_each_epoch:
            rows.extend(_epoch_rows(epoch + 1, model, cfg, train_set, val_set))
        ck = Checkpoint.from_model(model, epoch + 1, order_rng.bit_generator.state)
        if out_dir:
            ckpt_io.save(ck, out_dir / "checkpoint.cmpz")
            write_metrics(rows, out_dir / "metrics.csv")
    ck = Checkpoint.from_model(model, cfg.epochs, order_rng.bit_generator.state)
    if out_dir:
        ckpt_io.save(ck, out_dir / "checkpoint.cmpz")
        write_metrics(rows, out_dir / "metrics.csv")
    return TrainResult(ck, rows, model, batch_seeds)


# experiments ---------------------------------------------------------------


def ablate(cfg: ExperimentConfig, seeds=(0, 1, 2), variants=None, out_path=None,
           train_set: Dataset | None = None, val_set: Dataset | None = None) -> list[dict]:
    train_set = train_set if train_set is not None else load_or_generate(cfg, "train")
    val_set = val_set if val_set is not None else load_or_generate(cfg, "val")
    rows = []
    for name in variants or ABLATION_VARIANTS:
        for seed in seeds:
            vcfg = cfg.replace(seed=seed, **ABLATION_VARIANTS[name])
            res = train(vcfg, train_set, val_set, evaluate_each_epoch=False)
            for tag, m in evaluate_model(res.model, val_set).items():
                rows.append({"variant": name, "seed": seed, "tag": tag, "pck": m["pck"]})
            log.info("ablation %s seed %d: %s", name, seed,
                     {r["tag"]: round(r["pck"], 4) for r in rows[-len(TAGS) - 2:]})
    if out_path:
        _write_rows(rows, out_path, ["variant", "seed", "tag", "pck"])
    return rows


def sweep_ratios(cfg: ExperimentConfig, param: str, values, seeds=(0, 1, 2), out_path=None,
                 train_set: Dataset | None = None, val_set: Dataset | None = None) -> list[dict]:
    if param not in ("mask_ratio", "noise_ratio"):
        raise ValueError(f"can only sweep mask_ratio or noise_ratio, not {param!r}")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ValueError("sweep values must lie in [0, 1]")
    train_set = train_set if train_set is not None else load_or_generate(cfg, "train")
    val_set = val_set if val_set is not None else load_or_generate(cfg, "val")
    rows = []
    for value in values:
        for seed in seeds:
            res = train(cfg.replace(seed=seed, **{param: float(value)}), train_set, val_set, evaluate_each_epoch=False)
            m = evaluate_model(res.model, val_set)
            rows.append({"param": param, "value": float(value), "seed": seed, "pck": m["all"]["pck"],
                         "pck_clean": m.get("clean", {}).get("pck", math.nan),
                         "pck_corrupted": m.get("corrupted", {}).get("pck", math.nan)})
            log.info("sweep %s=%.2f seed %d: pck %.4f", param, value, seed, rows[-1]["pck"])
    if out_path:
        _write_rows(rows, out_path, ["param", "value", "seed", "pck", "pck_clean", "pck_corrupted"])
    return rows


def _write_rows(rows, path, fields_):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields_)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) if isinstance(r[k], float) else r[k] for k in fields_})
