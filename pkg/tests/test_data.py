import struct

import numpy as np
import pytest
import torch

from mci_mae.data import (
    MCIF_FLAG_LABEL,
    MCIF_MAGIC,
    MCIF_VERSION,
    ChannelStats,
    DataError,
    MCIFChannelCountError,
    MCIFMagicError,
    MCIFTruncatedError,
    MCIFVersionError,
    SynthSpec,
    compute_channel_stats,
    _sample_rng,
    generate,
    load_mcif,
    max_texture_agreement,
    read_mcif,
    rule_accuracy,
    save_mcif,
)
from mci_mae.tokenizer import MultiChannelImage

from utils.factories import small_spec


@pytest.fixture(scope="module")
def noiseless_splits():
    return generate(SynthSpec(train=1000, val=10, test=10, noise_sigma=0.0, seed=1))


def test_spec_validation():
    with pytest.raises(DataError):
        SynthSpec(h=30, p=8)
    with pytest.raises(DataError):
        SynthSpec(pair=(1, 1))
    with pytest.raises(DataError):
        SynthSpec(c=2, texture_channel=2)
    with pytest.raises(DataError):
        SynthSpec(texture_channel=0)


def test_generation_is_deterministic():
    a = generate(small_spec())
    b = generate(small_spec())

    assert torch.equal(a.train.pixels, b.train.pixels)
    assert torch.equal(a.test.labels, b.test.labels)


def test_different_seeds_give_different_data():
    a = generate(small_spec(seed=0))
    b = generate(small_spec(seed=1))
    assert not torch.equal(a.train.pixels, b.train.pixels)


def test_split_shapes():
    splits = generate(small_spec())

    assert splits.train.pixels.shape == (64, 4, 16, 16)
    assert splits.train.pixels.dtype == torch.float32
    assert len(splits.val) == 32
    assert splits.test.channel_ids == (0, 1, 2, 3)


def test_labels_are_balanced(noiseless_splits):
    counts = np.bincount(noiseless_splits.train.labels.numpy(), minlength=3)
    assert np.all(np.abs(counts / 1000 - 1 / 3) <= 0.02)


def test_pair_determines_label(noiseless_splits):
    assert rule_accuracy(noiseless_splits.train, (0, 1), 3) == 1.0


def test_single_channels_are_weak(noiseless_splits):
    for cid in range(4):
        assert rule_accuracy(noiseless_splits.train, (cid,), 3) <= 0.6


def test_label_is_sum_of_pair_attributes(noiseless_splits):
    attrs = noiseless_splits.train.attributes
    labels = noiseless_splits.train.labels
    assert torch.equal((attrs[:, 0] + attrs[:, 1]) % 3, labels)


def test_bar_channels_contain_a_bar(noiseless_splits):
    sample = noiseless_splits.train[0]
    for j in (0, 1, 3):
        values = set(np.unique(sample.image.pixels[j].numpy()).tolist())
        assert values == {0.0, 1.0}


def test_getitem_returns_labeled_sample():
    splits = generate(small_spec())
    sample = splits.train[5]

    assert sample.image.channel_ids == (0, 1, 2, 3)
    assert sample.label == int(splits.train.labels[5])
    assert len(sample.attributes) == 4


def test_select_channels_and_subset():
    data = generate(small_spec()).train
    picked = data.select_channels((3, 1)).subset([0, 2])

    assert picked.channel_ids == (3, 1)
    assert torch.equal(picked.pixels[1, 0], data.pixels[2, 3])
    assert torch.equal(picked.attributes[:, 1], data.attributes[[0, 2], 1])


def test_with_channel_ids_keeps_pixels():
    data = generate(small_spec()).val
    renamed = data.with_channel_ids((4, 5, 6, 7))

    assert renamed.channel_ids == (4, 5, 6, 7)
    assert renamed.pixels is data.pixels
    with pytest.raises(DataError):
        data.with_channel_ids((4,))


def test_channel_stats_normalize():
    data = generate(small_spec()).train
    stats = compute_channel_stats(data)
    normed = stats.normalize(data)

    means = normed.pixels.to(torch.float64).mean(dim=(0, 2, 3))
    assert torch.allclose(means, torch.zeros(4, dtype=torch.float64), atol=1e-4)

    restored = ChannelStats.from_dict(stats.to_dict())
    assert restored == stats


def test_channel_stats_missing_channel():
    data = generate(small_spec()).train
    stats = compute_channel_stats(data.select_channels((0, 1)))
    with pytest.raises(DataError):
        stats.normalize(data)


def test_mcif_round_trip(tmp_path):
    generator = torch.Generator().manual_seed(0)
    image = MultiChannelImage(torch.randn(3, 8, 16, generator=generator), (7, 2, 11))
    path = tmp_path / "image.mcif"

    save_mcif(path, image, label=2)
    loaded, label = read_mcif(path)

    assert loaded.channel_ids == (7, 2, 11)
    assert torch.equal(loaded.pixels, image.pixels)
    assert label == 2


def test_mcif_single_channel_without_label(tmp_path):
    image = MultiChannelImage(torch.ones(1, 8, 8), (0,))
    path = tmp_path / "single.mcif"
    save_mcif(path, image)

    assert path.stat().st_size == 4 + 1 + 6 + 2 + 4 * 64
    loaded, label = read_mcif(path)
    assert label is None
    assert torch.equal(load_mcif(path).pixels, image.pixels)


def test_mcif_header_layout(tmp_path):
    image = MultiChannelImage(torch.zeros(2, 8, 8), (1, 3))
    path = tmp_path / "layout.mcif"
    save_mcif(path, image, label=1)

    data = path.read_bytes()
    assert data[:4] == MCIF_MAGIC
    assert data[4] == MCIF_VERSION | MCIF_FLAG_LABEL
    assert struct.unpack_from("<HHH", data, 5) == (8, 8, 2)
    assert struct.unpack_from("<HH", data, 11) == (1, 3)
    assert struct.unpack_from("<H", data, len(data) - 2) == (1,)


@pytest.fixture
def mcif_bytes(tmp_path):
    path = tmp_path / "good.mcif"
    save_mcif(path, MultiChannelImage(torch.zeros(2, 8, 8), (0, 1)), label=0)
    return path.read_bytes()


def _write(tmp_path, data):
    path = tmp_path / "bad.mcif"
    path.write_bytes(data)
    return path


def test_mcif_bad_magic(tmp_path, mcif_bytes):
    with pytest.raises(MCIFMagicError):
        read_mcif(_write(tmp_path, b"MCIX" + mcif_bytes[4:]))


def test_mcif_bad_version(tmp_path, mcif_bytes):
    with pytest.raises(MCIFVersionError):
        read_mcif(_write(tmp_path, mcif_bytes[:4] + bytes([2]) + mcif_bytes[5:]))


def test_mcif_truncated(tmp_path, mcif_bytes):
    with pytest.raises(MCIFTruncatedError):
        read_mcif(_write(tmp_path, mcif_bytes[:-10]))
    with pytest.raises(MCIFTruncatedError):
        read_mcif(_write(tmp_path, mcif_bytes[:8]))


def test_mcif_extra_bytes(tmp_path, mcif_bytes):
    with pytest.raises(MCIFChannelCountError):
        read_mcif(_write(tmp_path, mcif_bytes + b"\x00" * 4))


def test_mcif_zero_channels(tmp_path, mcif_bytes):
    data = bytearray(mcif_bytes)
    struct.pack_into("<H", data, 9, 0)
    with pytest.raises(MCIFChannelCountError):
        read_mcif(_write(tmp_path, bytes(data)))


def test_mcif_shorter_than_magic(tmp_path):
    with pytest.raises(MCIFTruncatedError):
        read_mcif(_write(tmp_path, b"MC"))
    with pytest.raises(MCIFTruncatedError):
        read_mcif(_write(tmp_path, b""))


def test_mcif_hand_built_file_without_label(tmp_path):
    values = (0.5, -1.0, 2.25, 3.0)
    data = (
        b"MCIF"
        + struct.pack("<BHHH", 1, 2, 2, 1)
        + struct.pack("<H", 9)
        + struct.pack("<4f", *values)
    )

    image, label = read_mcif(_write(tmp_path, data))

    assert label is None
    assert image.channel_ids == (9,)
    assert image.pixels.shape == (1, 2, 2)
    assert image.pixels.flatten().tolist() == list(values)


def test_mcif_hand_built_file_with_label(tmp_path):
    data = (
        b"MCIF"
        + struct.pack("<BHHH", 1 | 0x80, 2, 2, 1)
        + struct.pack("<H", 0)
        + struct.pack("<4f", 0.0, 0.0, 0.0, 0.0)
        + struct.pack("<H", 4)
    )

    _, label = read_mcif(_write(tmp_path, data))
    assert label == 4


def test_spec_rejects_negative_seed():
    with pytest.raises(DataError):
        SynthSpec(seed=-1)


def test_label_order_and_samples_use_distinct_streams():
    labels = _sample_rng(0, 0, 0).random(8)
    first_sample = _sample_rng(0, 0, 1, 0).random(8)
    second_sample = _sample_rng(0, 0, 1, 1).random(8)

    assert not np.array_equal(labels, first_sample)
    assert not np.array_equal(first_sample, second_sample)


def test_generate_succeeds_for_every_split():
    splits = generate(small_spec(train=8, val=4, test=4, seed=0))
    assert (len(splits.train), len(splits.val), len(splits.test)) == (8, 4, 4)


@pytest.mark.parametrize("num_classes", [2, 3, 4])
def test_single_channels_are_weak_for_any_class_count(num_classes):
    spec = SynthSpec(
        h=8, w=8, p=8, num_classes=num_classes, train=2000, val=2, test=2, noise_sigma=0.0
    )
    train = generate(spec).train

    assert rule_accuracy(train, (0, 1), num_classes) == 1.0
    for cid in range(spec.c):
        assert rule_accuracy(train, (cid,), num_classes) <= 0.6


@pytest.mark.parametrize("num_classes", [2, 3, 4])
def test_default_texture_agreement_respects_bound(num_classes):
    spec = SynthSpec(num_classes=num_classes)
    chance = 1 / num_classes

    assert spec.agreement <= max_texture_agreement(num_classes)
    assert spec.agreement + (1 - spec.agreement) * chance <= 0.55 + 1e-12


def test_explicit_texture_agreement_above_bound_is_rejected():
    with pytest.raises(DataError):
        SynthSpec(num_classes=2, texture_agreement=0.3)
    with pytest.raises(DataError):
        SynthSpec(texture_agreement=1.5)
    # no texture channel, nothing to bound
    SynthSpec(num_classes=2, texture_channel=None, texture_agreement=0.3)
