import numpy as np
import pytest

from cmpose import checkpoint as ckpt_io
from cmpose.checkpoint import Checkpoint
from cmpose.harness import evaluate, train
from cmpose.model import CMPose
from cmpose.synthgen import generate_dataset

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config(dtype="float32")
    ds = generate_dataset(0, 8, "clean:0.5,occlude:0.25,blur:0.25", height=16, width=16)
    val = generate_dataset(100, 3, "clean:1,occlude:1,blur:1", paired=True, height=16, width=16)
    return train(cfg, ds, val, evaluate_each_epoch=False), val


def test_bytes_round_trip(trained):
    res, _ = trained
    raw = ckpt_io.to_bytes(res.checkpoint)
    back = ckpt_io.from_bytes(raw)
    assert raw[:5] == b"CMPZ1"
    assert back.config == res.checkpoint.config and back.epoch == res.checkpoint.epoch
    assert back.rng_state == res.checkpoint.rng_state
    for name, arr in res.checkpoint.params.items():
        assert back.params[name].dtype == np.float32
        np.testing.assert_array_equal(back.params[name], arr)


def test_save_load_save_byte_identical(trained, tmp_path):
    res, _ = trained
    a, b = tmp_path / "a.cmpz", tmp_path / "b.cmpz"
    ckpt_io.save(res.checkpoint, a)
    ckpt_io.save(ckpt_io.load(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_reloaded_evaluation_bit_identical(trained, tmp_path):
    res, val = trained
    path = tmp_path / "c.cmpz"
    ckpt_io.save(res.checkpoint, path)
    before = evaluate(res.checkpoint, val)
    after = evaluate(ckpt_io.load(path), val)
    assert before == after
    np.testing.assert_array_equal(res.checkpoint.build_model().predict(val.frames),
                                  ckpt_io.load(path).build_model().predict(val.frames))


def test_float32_training_model_matches_its_checkpoint(trained):
    res, val = trained
    np.testing.assert_array_equal(res.model.predict(val.frames), res.checkpoint.build_model().predict(val.frames))


def test_corrupt_files_rejected(trained):
    raw = ckpt_io.to_bytes(trained[0].checkpoint)
    with pytest.raises(ValueError):
        ckpt_io.from_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValueError):
        ckpt_io.from_bytes(raw + b"\0")


def test_shape_mismatch_rejected(trained):
    ck = trained[0].checkpoint
    wrong = Checkpoint(ck.params, tiny_config(embed_dim=16, heads=2), ck.epoch)
    with pytest.raises(ValueError):
        wrong.build_model()
    model = CMPose(tiny_config(), np.random.default_rng(0))
    with pytest.raises(KeyError):
        model.load_state_dict({k: v for k, v in list(ck.params.items())[1:]})
