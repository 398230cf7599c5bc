"""
Tests for dataset loading, splitting, the preprocessing pipeline and checkpoint files.
"""

import numpy as np
import pytest

from app.checkpoint import Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from app.data import (
    ChannelStats,
    DataConfig,
    Dataset,
    PipelineConfig,
    PreparedSplit,
    SyntheticSpec,
    check_labels,
    compute_stats,
    load_idx,
    load_splits,
    load_synthetic,
    normalize,
    preprocess,
    read_idx,
    split_per_class,
    write_idx,
)
from app.distortions import DistortionSpec
from app.errors import CheckpointError, ConfigError, DataError
from app.nn import ModelConfig, build_model
from app.optim import OptimizerState
from app.rng import RngStream

SMALL = SyntheticSpec(num_classes=4, side=12, channels=3)


def test_idx_roundtrip_header(tmp_path):
    """A rank-3 uint8 file carries magic 0x00000803 and reads back unchanged."""
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "images.idx"
    write_idx(images, path)
    assert path.read_bytes()[:4] == bytes.fromhex("00000803")
    np.testing.assert_array_equal(read_idx(path), images)


def test_idx_float_payload(tmp_path):
    """Big-endian float payloads come back in native byte order."""
    values = np.linspace(0, 1, 6).reshape(2, 3)
    path = tmp_path / "floats.idx"
    write_idx(values, path)
    np.testing.assert_array_equal(read_idx(path), values)


def test_idx_truncated_payload(tmp_path):
    """A short payload names the expected and the found byte counts."""
    path = tmp_path / "images.idx"
    write_idx(np.zeros((2, 3, 4), dtype=np.uint8), path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(DataError, match=r"payload at byte 16 should hold 24 bytes.*found 23"):
        read_idx(path)


def test_idx_bad_magic(tmp_path):
    """A non-zero magic prefix is rejected."""
    path = tmp_path / "bad.idx"
    path.write_bytes(bytes([1, 0, 8, 1, 0, 0, 0, 1, 7]))
    with pytest.raises(DataError, match="bad magic"):
        read_idx(path)


def test_load_idx_adds_channel_axis(tmp_path):
    """Grey IDX images gain a trailing channel axis."""
    write_idx(np.zeros((3, 5, 5), dtype=np.uint8), tmp_path / "x.idx")
    write_idx(np.array([0, 1, 2], dtype=np.uint8), tmp_path / "y.idx")
    dataset = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert dataset.images.shape == (3, 5, 5, 1)
    assert dataset.num_classes == 3


def test_load_idx_count_mismatch(tmp_path):
    """Image and label counts must agree."""
    write_idx(np.zeros((3, 5, 5), dtype=np.uint8), tmp_path / "x.idx")
    write_idx(np.array([0, 1], dtype=np.uint8), tmp_path / "y.idx")
    with pytest.raises(DataError):
        load_idx(tmp_path / "x.idx", tmp_path / "y.idx")


def test_synthetic_is_deterministic():
    """The same seed regenerates identical images; splits draw different ones."""
    a = load_synthetic(SMALL, seed=3, per_class=2)
    b = load_synthetic(SMALL, seed=3, per_class=2)
    test = load_synthetic(SMALL, seed=3, per_class=2, split="test")
    assert a.images.dtype == np.uint8
    assert a.images.shape == (8, 12, 12, 3)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, test.images)
    np.testing.assert_array_equal(np.bincount(a.labels), [2, 2, 2, 2])


def test_split_per_class_counts_and_disjointness():
    """Each class contributes exactly train_n and val_n samples, with no overlap."""
    pool = load_synthetic(SMALL, seed=0, per_class=5)
    pool.images[:, 0, 0, 0] = np.arange(len(pool))  # tag each sample
    train, val = split_per_class(pool, 3, 2, seed=1)
    np.testing.assert_array_equal(np.bincount(train.labels), [3, 3, 3, 3])
    np.testing.assert_array_equal(np.bincount(val.labels), [2, 2, 2, 2])
    assert not set(train.images[:, 0, 0, 0]) & set(val.images[:, 0, 0, 0])
    again, _ = split_per_class(pool, 3, 2, seed=1)
    np.testing.assert_array_equal(again.images, train.images)


def test_split_per_class_short_class():
    """A class with too few samples is named in the error."""
    pool = load_synthetic(SMALL, seed=0, per_class=2)
    with pytest.raises(DataError, match="class 0"):
        split_per_class(pool, 2, 1, seed=0)


def test_dataset_validation():
    """Mismatched counts and unknown splits are rejected; label range is checked against the model."""
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), np.zeros(3))
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 4, 4, 1)), np.zeros(2), split="holdout")
    with pytest.raises(DataError, match="10 classes"):
        check_labels(Dataset(np.zeros((1, 4, 4, 1)), np.array([12])), 10)


def test_data_config_validation(tmp_path):
    """An idx source needs every path, and the paths must exist."""
    with pytest.raises(ValueError):
        DataConfig(source="idx")
    missing = tmp_path / "missing.idx"
    cfg = DataConfig(source="idx", train_images=missing, train_labels=missing, test_images=missing, test_labels=missing)
    with pytest.raises(ConfigError, match="does not exist"):
        load_splits(cfg, seed=0)


def test_load_splits_synthetic():
    """Synthetic splits have the configured per-class sizes."""
    cfg = DataConfig(synthetic=SMALL, train_per_class=3, val_per_class=1, test_per_class=2)
    splits = load_splits(cfg, seed=0)
    assert (len(splits.train), len(splits.val), len(splits.test)) == (12, 4, 8)
    assert splits.test.split == "test"


def test_pipeline_config_validation():
    """The crop cannot be larger than the resized image."""
    with pytest.raises(ValueError):
        PipelineConfig(resize_side=30, crop_side=32)
    assert PipelineConfig().margin == 2


def test_normalized_training_stats():
    """After normalization the training split has zero mean and unit std per channel."""
    dataset = load_synthetic(SMALL, seed=0, per_class=4)
    prepared = PreparedSplit(dataset, PipelineConfig(resize_side=14, crop_side=12))
    stats = compute_stats(prepared.centered)
    normalized = normalize(prepared.centered, stats, "float64")
    np.testing.assert_allclose(normalized.mean(axis=(0, 1, 2)), 0.0, atol=1e-9)
    np.testing.assert_allclose(normalized.std(axis=(0, 1, 2)), 1.0, atol=1e-9)


def test_compute_stats_rejects_constant_channel():
    """A constant channel cannot be normalized."""
    with pytest.raises(DataError):
        compute_stats(np.zeros((2, 4, 4, 1)))


def test_preprocess_without_distortion_is_scaling_only():
    """With identity stats and matching geometry the pipeline only scales to [0, 1]."""
    img = load_synthetic(SMALL, seed=0, per_class=1).images[0]
    out = preprocess(img, PipelineConfig(resize_side=12, crop_side=12), ChannelStats.identity(3), dtype="float64")
    np.testing.assert_allclose(out, img / 255.0)


def test_preprocess_offset_crop_stays_near_centre():
    """A crop distortion replaces the centre crop with a window displaced by at most C."""
    img = np.random.default_rng(0).uniform(size=(16, 16, 1))
    cfg = PipelineConfig(resize_side=16, crop_side=12)
    out = preprocess(img, cfg, ChannelStats.identity(1), DistortionSpec.parse("crop:2"), RngStream(4), dtype="float64")
    windows = [img[2 + dy:14 + dy, 2 + dx:14 + dx] for dy in range(-2, 3) for dx in range(-2, 3)]
    assert any(np.allclose(out, w) for w in windows)


def test_prepared_batch_matches_preprocess():
    """Cached batches agree with the per-sample pipeline for the same streams."""
    dataset = load_synthetic(SMALL, seed=1, per_class=2)
    cfg = PipelineConfig(resize_side=14, crop_side=12)
    prepared = PreparedSplit(dataset, cfg)
    stats = compute_stats(prepared.centered)
    spec = DistortionSpec.parse("gaussian:0.1")
    indices = np.array([0, 3, 5])
    batch = prepared.batch(indices, spec, RngStream(2).split(3))
    singles = [
        preprocess(dataset.images[i], cfg, stats, spec, rng, dtype="float64")
        for i, rng in zip(indices, RngStream(2).split(3))
    ]
    np.testing.assert_allclose(normalize(batch, stats, "float64"), np.stack(singles), atol=1e-9)


def _checkpoint() -> Checkpoint:
    params = build_model(ModelConfig(input_shape=(8, 8, 3), stem_channels=4, stage_blocks=[1, 1]), seed=0)
    optimizer = OptimizerState.create(params.trainable(), lr=0.01)
    return Checkpoint(params, epoch=7, val_score=0.8125, optimizer=optimizer)


def test_checkpoint_roundtrip_is_byte_stable(tmp_path):
    """save -> load -> save reproduces the same bytes and the stored fields."""
    path = tmp_path / "epoch_07.ckpt"
    save_checkpoint(_checkpoint(), path)
    loaded = load_checkpoint(path)
    assert loaded.epoch == 7
    assert loaded.val_score == 0.8125
    assert loaded.model.config == _checkpoint().model.config
    assert loaded.model["stem.conv.weight"].requires_grad
    assert not loaded.model["stem.bn.running_mean"].requires_grad
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_without_optimizer():
    """The optimizer block is optional."""
    ckpt = _checkpoint()
    ckpt.optimizer = None
    assert decode(encode(ckpt)).optimizer is None


def test_checkpoint_corruption_is_reported():
    """Wrong magic, truncation and trailing bytes are named with their byte offset."""
    raw = encode(_checkpoint())
    with pytest.raises(CheckpointError, match="bad magic.*at byte 0"):
        decode(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode(raw[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(raw + b"\x00")


def test_missing_checkpoint_file(tmp_path):
    """An unreadable path is a checkpoint error."""
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
