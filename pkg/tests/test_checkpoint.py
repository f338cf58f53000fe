"""Checkpoint container round-trips and exact training resumption."""
import numpy as np
import pytest

from multicaps import checkpoint
from multicaps.errors import ConfigurationError, FormatError
from multicaps.memo import MemoConfig, MemoNetwork
from multicaps.models import ConvNetConfig, ConvNetClassifier


def tiny_convnet(seed=0, dtype="float64"):
    return ConvNetClassifier(ConvNetConfig.scaled(0.05, dtype=dtype), seed=seed)


def batch(rng, n=4):
    images = rng.random((n, 36, 36))
    labels = [tuple(sorted(rng.choice(10, size=2, replace=False))) for _ in range(n)]
    return images, labels


def test_round_trip_preserves_everything(tmp_path):
    rng = np.random.default_rng(0)
    images, labels = batch(rng)
    model = tiny_convnet(seed=3)
    for step in range(3):
        model.train_step(images, labels, step)
    path = tmp_path / "model.mckp"
    checkpoint.save_model(model, path, extra={"step": 3})
    loaded, extra = checkpoint.load_model(path)
    assert extra == {"step": 3}
    assert loaded.config == model.config
    for pa, pb in zip(model.params, loaded.params):
        assert pa.name == pb.name and pa.partition == pb.partition
        assert np.array_equal(pa.value, pb.value)
        assert np.array_equal(pa.adam.m, pb.adam.m)
        assert np.array_equal(pa.adam.v, pb.adam.v)
        assert pa.adam.step == pb.adam.step


def test_float32_values_survive_exactly(tmp_path):
    rng = np.random.default_rng(1)
    images, labels = batch(rng)
    model = tiny_convnet(seed=4, dtype="float32")
    model.train_step(images, labels, 0)
    path = tmp_path / "f32.mckp"
    checkpoint.save_model(model, path)
    loaded, _ = checkpoint.load_model(path)
    for pa, pb in zip(model.params, loaded.params):
        assert pb.value.dtype == np.float32
        assert np.array_equal(pa.value, pb.value)


def test_resumed_training_is_bit_identical(tmp_path):
    rng = np.random.default_rng(2)
    images, labels = batch(rng)
    uninterrupted = MemoNetwork(MemoConfig.scaled(0.06, memo_fc_units=16,
                                                  pretrain_iterations=2), seed=5)
    for step in range(6):
        uninterrupted.train_step(images, labels, step)

    resumed = MemoNetwork(MemoConfig.scaled(0.06, memo_fc_units=16,
                                            pretrain_iterations=2), seed=5)
    for step in range(3):
        resumed.train_step(images, labels, step)
    path = tmp_path / "mid.mckp"
    checkpoint.save_model(resumed, path, extra={"step": 3})
    fresh, extra = checkpoint.load_model(path)
    for step in range(extra["step"], 6):
        fresh.train_step(images, labels, step)
    for pa, pb in zip(uninterrupted.params, fresh.params):
        assert np.array_equal(pa.value, pb.value), pa.name


def test_mismatched_model_rejected(tmp_path):
    model = tiny_convnet(seed=0)
    path = tmp_path / "m.mckp"
    checkpoint.save_model(model, path)
    other = ConvNetClassifier(ConvNetConfig.scaled(0.1), seed=0)
    ckpt = checkpoint.read_checkpoint(path)
    with pytest.raises(ConfigurationError, match="shape"):
        ckpt.apply_to(other.params)


def test_corrupt_magic_rejected(tmp_path):
    model = tiny_convnet()
    path = tmp_path / "m.mckp"
    checkpoint.save_model(model, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        checkpoint.read_checkpoint(path)


def test_truncated_payload_rejected(tmp_path):
    model = tiny_convnet()
    path = tmp_path / "m.mckp"
    checkpoint.save_model(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(FormatError, match="truncated"):
        checkpoint.read_checkpoint(path)


def test_payload_stored_as_little_endian_doubles(tmp_path):
    model = tiny_convnet()
    path = tmp_path / "m.mckp"
    checkpoint.save_model(model, path)
    ckpt = checkpoint.read_checkpoint(path)
    first = next(iter(model.params))
    raw = ckpt.entries[first.name]["value"]
    assert raw.dtype == np.dtype("<f8")
    assert np.array_equal(raw, first.value)
