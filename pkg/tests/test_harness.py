import csv
import json

import numpy as np
import pytest

from cmpose.checkpoint import Checkpoint
from cmpose.embedder import ConfigError
from cmpose.harness import (
    ABLATION_VARIANTS, METRIC_FIELDS, TrainingDiverged, ablate, aux_inputs, evaluate, evaluate_model, gt_heatmaps,
    pck, sweep_ratios, train,
)
from cmpose.head import argmax_decode
from cmpose.model import CMPose, compute_losses
from cmpose.synthgen import Dataset, bbox_diag, generate_dataset

from conftest import tiny_config


@pytest.fixture(scope="module")
def data():
    train_set = generate_dataset(0, 8, "clean:0.5,occlude:0.25,blur:0.25", height=16, width=16)
    val = generate_dataset(100, 3, "clean:1,occlude:1,blur:1", paired=True, height=16, width=16)
    return train_set, val


def _init_model(cfg):
    init_ss, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    return CMPose(cfg, np.random.default_rng(init_ss))


# training -----------------------------------------------------------------------


def test_zero_epochs_checkpoint_equals_initialisation(data):
    cfg = tiny_config(epochs=0)
    res = train(cfg, *data, evaluate_each_epoch=False)
    init = Checkpoint.from_model(_init_model(cfg))
    assert res.checkpoint.epoch == 0
    for name, arr in init.params.items():
        np.testing.assert_array_equal(res.checkpoint.params[name], arr)


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_zero_lambda_aux_tasks_do_not_touch_the_trajectory(data, dtype):
    base = tiny_config(lambda_=0.0, epochs=5, batch_size=4, dtype=dtype)
    on = train(base, *data, evaluate_each_epoch=False, max_steps=10)
    off = train(base.replace(use_mask_task=False, use_denoise_task=False), *data,
                evaluate_each_epoch=False, max_steps=10)
    assert len(on.batch_seeds) == 10 and on.batch_seeds == off.batch_seeds
    for (name, a), (_, b) in zip(on.model.named_parameters(), off.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_aux_tasks_change_the_trajectory_when_weighted(data):
    base = tiny_config(lambda_=1.0)
    on = train(base, *data, evaluate_each_epoch=False, max_steps=2)
    off = train(base.replace(use_mask_task=False, use_denoise_task=False), *data,
                evaluate_each_epoch=False, max_steps=2)
    assert not np.array_equal(on.model.embed.proj.weight.data, off.model.embed.proj.weight.data)


def test_nan_loss_aborts_with_batch_seed(data):
    train_set, val = data
    bad = Dataset(train_set.frames.copy(), train_set.keypoints, train_set.tags)
    bad.frames[:] = np.nan
    with pytest.raises(TrainingDiverged, match="batch seed 1000000"):
        train(tiny_config(), bad, val, evaluate_each_epoch=False)


def test_metrics_csv_manifest_and_reproducibility(data, tmp_path):
    cfg = tiny_config(epochs=2)
    train(cfg, *data, out_dir=tmp_path / "a")
    train(cfg, *data, out_dir=tmp_path / "b")
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    assert list(rows[0]) == METRIC_FIELDS
    keys = [(r["epoch"], r["split"], r["tag"]) for r in rows]
    assert len(keys) == len(set(keys))
    assert {r["epoch"] for r in rows} == {"0", "1", "2"}
    val_tags = {r["tag"] for r in rows if r["split"] == "val"}
    assert val_tags == {"clean", "occlude", "blur", "corrupted", "all"}
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 2 and manifest["seeds"]["run"] == 0
    assert "numpy" in manifest["versions"]
    assert (tmp_path / "a" / "checkpoint.cmpz").read_bytes() == (tmp_path / "b" / "checkpoint.cmpz").read_bytes()


def test_mismatched_dataset_is_config_error(data):
    with pytest.raises(ConfigError):
        train(tiny_config(image_height=20, image_width=20), *data)
    model = CMPose(tiny_config(), np.random.default_rng(0))
    other = generate_dataset(0, 1, height=24, width=16)
    with pytest.raises(ConfigError):
        evaluate_model(model, other)


# corruption plumbing ------------------------------------------------------------


def test_zero_ratio_aux_tasks_have_zero_loss(data):
    cfg = tiny_config(mask_ratio=0.0, noise_ratio=0.0)
    model = CMPose(cfg, np.random.default_rng(0))
    aux = aux_inputs(cfg, 7, 4, 0)
    frames, kp = data[0].frames[:4], data[0].keypoints[:4].astype(np.float64)
    losses = compute_losses(model(frames, aux), gt_heatmaps(cfg, kp), aux, 1.0)
    assert losses.mask.item() == 0.0 and losses.denoise.item() == 0.0
    assert losses.total.item() == losses.heatmap.item()


def test_aux_streams_are_deterministic_and_separate():
    cfg = tiny_config()
    a, b = aux_inputs(cfg, 5, 3, 0), aux_inputs(cfg, 5, 3, 0)
    np.testing.assert_array_equal(a.mask_keep, b.mask_keep)
    np.testing.assert_array_equal(a.noise_offset, b.noise_offset)
    assert not np.array_equal(a.mask_keep, aux_inputs(cfg, 6, 3, 0).mask_keep)
    assert aux_inputs(cfg.replace(use_mask_task=False, use_denoise_task=False), 5, 3, 0) is None


# inference -----------------------------------------------------------------------


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_inference_equals_training_primary_branch(data, dtype):
    cfg = tiny_config(dtype=dtype)
    model = CMPose(cfg, np.random.default_rng(3))
    frames = data[1].frames
    aux = aux_inputs(cfg, 11, len(frames), 0)
    trained_out = model(frames.astype(np.float64), aux)
    assert trained_out.mask_recon is not None and trained_out.noise_recon is not None
    np.testing.assert_array_equal(model.predict(frames), trained_out.heatmaps.data)
    np.testing.assert_array_equal(model.predict(frames), model(frames.astype(np.float64)).heatmaps.data)


def test_evaluation_is_deterministic(data):
    ck = Checkpoint.from_model(CMPose(tiny_config(), np.random.default_rng(1)))
    assert evaluate(ck, data[1]) == evaluate(ck, data[1])
    assert set(evaluate(ck, data[1], ["clean", "corrupted"])) == {"clean", "corrupted"}


def test_pck_of_ground_truth_peaks_is_one(data):
    cfg = tiny_config()
    kp = data[1].keypoints.astype(np.float64)
    assert pck(argmax_decode(gt_heatmaps(cfg, kp)), kp, cfg).all()


def test_constant_heatmap_pck_matches_direct_count(data):
    cfg = tiny_config()
    kp = data[0].keypoints.astype(np.float64)
    hits = pck(argmax_decode(np.zeros((len(kp), 15, 16, 16))), kp, cfg)
    expected = [[np.hypot(*p) <= 0.2 * bbox_diag(k) for p in k] for k in kp]
    np.testing.assert_array_equal(hits, expected)


def test_pck_threshold_is_inclusive():
    cfg = tiny_config()
    kp = np.zeros((1, 15, 2))
    kp[0, 1] = (3.0, 4.0)  # bbox diagonal 5, threshold 1
    pred = np.zeros((1, 15, 2), dtype=int)
    pred[0, 1] = (4, 3)
    pred[0, 2] = (1, 1)  # distance sqrt(2) > 1
    hits = pck(pred, kp, cfg)[0]
    assert hits[1] and not hits[2] and hits[0]


# experiment runners ------------------------------------------------------------


def test_sweep_row_count_and_csv(data, tmp_path):
    out = tmp_path / "sweep.csv"
    rows = sweep_ratios(tiny_config(), "mask_ratio", [0.1, 0.5], [0, 1, 2], out, *data)
    assert len(rows) == 6
    assert len(out.read_text().splitlines()) == 7
    with pytest.raises(ValueError):
        sweep_ratios(tiny_config(), "mask_ratio", [1.5], [0], None, *data)
    with pytest.raises(ValueError):
        sweep_ratios(tiny_config(), "lr", [0.1], [0], None, *data)


def test_ablation_variants(data, tmp_path):
    assert set(ABLATION_VARIANTS) == {"full", "mask_only", "denoise_only", "primary_only", "causal_only", "no_fte"}
    out = tmp_path / "ablate.csv"
    rows = ablate(tiny_config(), [0], ["causal_only", "no_fte"], out, *data)
    assert {r["variant"] for r in rows} == {"causal_only", "no_fte"}
    assert {r["tag"] for r in rows} >= {"clean", "corrupted"}


def test_causal_only_discards_noncausal_tokens(data):
    cfg = tiny_config(use_noncausal_tokens=False)
    out = CMPose(cfg, np.random.default_rng(0))(data[1].frames[:2])
    assert out.choices.num_clusters == 0
    assert out.choices.causal.shape == (2, cfg.num_keypoints * cfg.causal_per_keypoint)
