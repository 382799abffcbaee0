"""
Synthetic multi-channel data and the MCIF on-disk image format.

Every channel of a synthetic image holds one randomly placed bar whose
orientation is one of K = num_classes angles. The label is the sum modulo K of
the orientations in the two designated channels, so neither channel alone says
anything about the label while the pair determines it. A texture channel
carries a grating whose frequency matches the label only part of the time,
and the remaining channels are distractors.

MCIF layout (little-endian):

    magic    4 bytes  b"MCIF"
    version  u8       1; the high bit is set when a label trails the pixels
    h, w, c  u16 x 3
    ids      u16 x c
    pixels   f32 x (c*h*w), channel-major then row-major
    label    u16      only when the label bit is set
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from mci_mae.tokenizer import MultiChannelImage

MCIF_MAGIC = b"MCIF"
MCIF_VERSION = 1
MCIF_FLAG_LABEL = 0x80
_HEADER = struct.Struct("<4sBHHH")

# population accuracy of the texture channel alone must stay below this
TEXTURE_ORACLE_CEILING = 0.55
DEFAULT_TEXTURE_AGREEMENT = 0.3

# generator streams within a split
_STREAM_LABELS = 0
_STREAM_SAMPLES = 1


def max_texture_agreement(num_classes: int) -> float:
    """
    Largest agreement a for which the texture channel alone is right at most
    TEXTURE_ORACLE_CEILING of the time. A texture that does not agree shows a
    uniform level, so that accuracy is a + (1 - a) / K.
    """
    chance = 1.0 / num_classes
    return max(0.0, (TEXTURE_ORACLE_CEILING - chance) / (1.0 - chance))


class DataError(Exception):
    """
    Parent class for errors raised by the data module.
    """

    pass


class MCIFError(DataError):
    pass


class MCIFMagicError(MCIFError):
    pass


class MCIFVersionError(MCIFError):
    pass


class MCIFTruncatedError(MCIFError):
    pass


class MCIFChannelCountError(MCIFError):
    pass


@dataclass
class SynthSpec:
    """
    Geometry and statistics of a synthetic dataset.

    Args:
        h, w: image size.
        p: patch size the images will be cut with (h and w must be multiples).
        c: number of channels; channel ids are 0..c-1.
        num_classes: number of labels, also the number of bar orientations.
        pair: the two channels whose orientations determine the label.
        texture_channel: channel holding the weak label texture, or None.
        texture_agreement: probability that the texture shows the true label.
            None picks 0.3, lowered to max_texture_agreement(num_classes)
            when needed; explicit values above that bound are rejected.
        noise_sigma: standard deviation of the additive Gaussian noise.
        train, val, test: samples per split.
        seed: generation seed.
    """

    h: int = 32
    w: int = 32
    p: int = 8
    c: int = 4
    num_classes: int = 3
    pair: tuple[int, int] = (0, 1)
    texture_channel: Optional[int] = 2
    texture_agreement: Optional[float] = None
    noise_sigma: float = 0.05
    train: int = 2048
    val: int = 512
    test: int = 512
    seed: int = 0

    def __post_init__(self):
        self.pair = tuple(int(j) for j in self.pair)
        if self.h % self.p != 0 or self.w % self.p != 0:
            raise DataError(f"Image size {self.h}x{self.w} is not divisible by p={self.p}")
        if self.h < 8 or self.w < 8:
            raise DataError("Images must be at least 8x8 pixels")
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.pair) != 2 or self.pair[0] == self.pair[1]:
            raise DataError(f"pair must name two distinct channels, got {self.pair}")
        if any(not 0 <= j < self.c for j in self.pair):
            raise DataError(f"pair {self.pair} is not a subset of the {self.c} channels")
        if self.texture_channel is not None:
            if not 0 <= self.texture_channel < self.c or self.texture_channel in self.pair:
                raise DataError(
                    f"texture_channel {self.texture_channel} must be a channel outside the pair"
                )
        if self.texture_agreement is not None:
            if not 0.0 <= self.texture_agreement <= 1.0:
                raise DataError("texture_agreement must be in [0, 1]")
            bound = max_texture_agreement(self.num_classes)
            if self.texture_channel is not None and self.texture_agreement > bound:
                raise DataError(
                    f"texture_agreement {self.texture_agreement} lets the texture channel "
                    f"alone predict the label; at most {bound:.3f} for {self.num_classes} classes"
                )
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise DataError(f"seed must be >= 0, got {self.seed}")

    @property
    def channel_ids(self) -> tuple[int, ...]:
        return tuple(range(self.c))

    @property
    def agreement(self) -> float:
        if self.texture_agreement is not None:
            return self.texture_agreement
        return min(DEFAULT_TEXTURE_AGREEMENT, max_texture_agreement(self.num_classes))


@dataclass
class LabeledSample:
    image: MultiChannelImage
    label: int
    attributes: tuple[int, ...] = field(default=())


@dataclass
class MultiChannelDataset:
    """
    A stack of images sharing the same channels.

    Attributes:
        pixels: (N, c, h, w) float32.
        labels: (N,) long.
        channel_ids: ids of the c channels.
        attributes: (N, c) long, per-channel generating attribute (orientation
            for bar channels, grating frequency for the texture channel); kept
            so label rules can be checked exactly.
    """

    pixels: torch.Tensor
    labels: torch.Tensor
    channel_ids: tuple[int, ...]
    attributes: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, index: int) -> LabeledSample:
        attrs = () if self.attributes is None else tuple(self.attributes[index].tolist())
        return LabeledSample(
            MultiChannelImage(self.pixels[index], self.channel_ids),
            int(self.labels[index]),
            attrs,
        )

    def subset(self, indices) -> "MultiChannelDataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return MultiChannelDataset(
            self.pixels[indices],
            self.labels[indices],
            self.channel_ids,
            None if self.attributes is None else self.attributes[indices],
        )

    def select_channels(self, channel_ids: Sequence[int]) -> "MultiChannelDataset":
        index = [self.channel_ids.index(cid) for cid in channel_ids]
        return MultiChannelDataset(
            self.pixels[:, index],
            self.labels,
            tuple(channel_ids),
            None if self.attributes is None else self.attributes[:, index],
        )

    def with_channel_ids(self, channel_ids: Sequence[int]) -> "MultiChannelDataset":
        """
        Same pixels under new channel ids (used to present a channel as novel).
        """
        if len(channel_ids) != len(self.channel_ids):
            raise DataError("Channel id remapping must keep the channel count")
        return MultiChannelDataset(self.pixels, self.labels, tuple(channel_ids), self.attributes)


@dataclass
class SyntheticSplits:
    train: MultiChannelDataset
    val: MultiChannelDataset
    test: MultiChannelDataset


def _sample_rng(seed: int, split: int, stream: int, index: int = 0) -> np.random.Generator:
    # fixed-length key: SeedSequence pads short entropy with zeros
    key = [seed, split, stream, index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _draw_bar(h: int, w: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    length = 0.4 * min(h, w)
    thickness = max(1.5, 0.08 * min(h, w))
    margin = length / 2 + 1
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(angle) + dy * np.sin(angle)
    across = -dx * np.sin(angle) + dy * np.cos(angle)

    bar = (np.abs(along) <= length / 2) & (np.abs(across) <= thickness / 2)
    return bar.astype(np.float64)


def _draw_texture(h: int, w: int, level: int, rng: np.random.Generator) -> np.ndarray:
    frequency = (level + 1) / 8.0
    phase = rng.uniform(0, 2 * np.pi)
    xx = np.arange(w, dtype=np.float64)[None, :].repeat(h, axis=0)
    return 0.5 + 0.5 * np.sin(2 * np.pi * frequency * xx + phase)


def _generate_split(spec: SynthSpec, split: int, count: int) -> MultiChannelDataset:
    K = spec.num_classes
    angles = [np.pi * k / K for k in range(K)]

    # balanced labels: every class appears floor(count/K) or ceil(count/K) times
    order_rng = _sample_rng(spec.seed, split, _STREAM_LABELS)
    labels = np.arange(count) % K
    order_rng.shuffle(labels)

    agreement = spec.agreement
    pixels = np.zeros((count, spec.c, spec.h, spec.w), dtype=np.float32)
    attributes = np.zeros((count, spec.c), dtype=np.int64)

    for i in range(count):
        rng = _sample_rng(spec.seed, split, _STREAM_SAMPLES, i)
        y = int(labels[i])
        attrs = rng.integers(0, K, size=spec.c)

        first, second = spec.pair
        attrs[second] = (y - attrs[first]) % K
        if spec.texture_channel is not None:
            agrees = rng.random() < agreement
            attrs[spec.texture_channel] = y if agrees else rng.integers(0, K)

        for j in range(spec.c):
            if j == spec.texture_channel:
                image = _draw_texture(spec.h, spec.w, int(attrs[j]), rng)
            else:
                image = _draw_bar(spec.h, spec.w, angles[int(attrs[j])], rng)
            if spec.noise_sigma > 0:
                image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
            pixels[i, j] = image

        attributes[i] = attrs

    return MultiChannelDataset(
        torch.from_numpy(pixels),
        torch.from_numpy(labels.astype(np.int64)),
        spec.channel_ids,
        torch.from_numpy(attributes),
    )


def generate(spec: SynthSpec) -> SyntheticSplits:
    """
    Generates train/val/test splits; bit-identical for identical specs.
    """
    return SyntheticSplits(
        train=_generate_split(spec, 0, spec.train),
        val=_generate_split(spec, 1, spec.val),
        test=_generate_split(spec, 2, spec.test),
    )


def rule_accuracy(
    dataset: MultiChannelDataset, channels: Sequence[int], num_classes: int
) -> float:
    """
    Accuracy of the best classifier that reads only the generating attributes
    of 'channels': each attribute combination predicts its majority label.
    This is the optimum over all rules using those channels.
    """
    if dataset.attributes is None:
        raise DataError("Dataset has no generating attributes")

    index = [dataset.channel_ids.index(cid) for cid in channels]
    keys = dataset.attributes[:, index].tolist()
    counts: dict[tuple, np.ndarray] = {}
    for key, label in zip(keys, dataset.labels.tolist()):
        counts.setdefault(tuple(key), np.zeros(num_classes, dtype=np.int64))[label] += 1

    correct = sum(int(c.max()) for c in counts.values())
    return correct / len(dataset)


@dataclass
class ChannelStats:
    """
    Per-channel mean and standard deviation, keyed by channel id.
    """

    mean: dict[int, float]
    std: dict[int, float]

    def normalize(self, dataset: MultiChannelDataset) -> MultiChannelDataset:
        missing = [cid for cid in dataset.channel_ids if cid not in self.mean]
        if missing:
            raise DataError(f"No normalization statistics for channels {missing}")

        mean = torch.tensor([self.mean[cid] for cid in dataset.channel_ids])
        std = torch.tensor([self.std[cid] for cid in dataset.channel_ids])
        pixels = (dataset.pixels - mean[None, :, None, None]) / std[None, :, None, None]
        return MultiChannelDataset(
            pixels.to(torch.float32), dataset.labels, dataset.channel_ids, dataset.attributes
        )

    def to_dict(self) -> dict:
        return {
            "mean": {str(k): v for k, v in sorted(self.mean.items())},
            "std": {str(k): v for k, v in sorted(self.std.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelStats":
        return cls(
            mean={int(k): float(v) for k, v in data["mean"].items()},
            std={int(k): float(v) for k, v in data["std"].items()},
        )


def compute_channel_stats(dataset: MultiChannelDataset) -> ChannelStats:
    values = dataset.pixels.to(torch.float64)
    mean = values.mean(dim=(0, 2, 3))
    std = values.std(dim=(0, 2, 3)).clamp(min=1e-6)
    return ChannelStats(
        mean={cid: float(m) for cid, m in zip(dataset.channel_ids, mean)},
        std={cid: float(s) for cid, s in zip(dataset.channel_ids, std)},
    )


def save_mcif(path: str | Path, image: MultiChannelImage, label: Optional[int] = None) -> None:
    c, h, w = image.pixels.shape
    version = MCIF_VERSION | (MCIF_FLAG_LABEL if label is not None else 0)
    payload = bytearray(_HEADER.pack(MCIF_MAGIC, version, h, w, c))
    payload += struct.pack(f"<{c}H", *image.channel_ids)
    payload += image.pixels.detach().to(torch.float32).numpy().astype("<f4").tobytes(order="C")
    if label is not None:
        payload += struct.pack("<H", int(label))

    with open(path, "wb") as f:
        f.write(bytes(payload))


def read_mcif(path: str | Path) -> tuple[MultiChannelImage, Optional[int]]:
    """
    Reads an MCIF file, returning the image and the trailing label (or None).
    """
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < len(MCIF_MAGIC):
        raise MCIFTruncatedError(f"{path}: {len(data)} bytes, too short for an MCIF header")
    if data[:4] != MCIF_MAGIC:
        raise MCIFMagicError(f"{path}: not an MCIF file (bad magic)")
    if len(data) < _HEADER.size:
        raise MCIFTruncatedError(f"{path}: header is truncated")

    _, version_byte, h, w, c = _HEADER.unpack_from(data, 0)
    version = version_byte & ~MCIF_FLAG_LABEL
    if version != MCIF_VERSION:
        raise MCIFVersionError(f"{path}: unsupported MCIF version {version}")
    if c == 0:
        raise MCIFChannelCountError(f"{path}: file declares zero channels")

    offset = _HEADER.size
    ids_size = 2 * c
    pixels_size = 4 * c * h * w
    label_size = 2 if version_byte & MCIF_FLAG_LABEL else 0
    expected = offset + ids_size + pixels_size + label_size

    if len(data) < expected:
        raise MCIFTruncatedError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )
    if len(data) > expected:
        raise MCIFChannelCountError(
            f"{path}: {len(data) - expected} bytes beyond the declared {c} channels"
        )

    channel_ids = struct.unpack_from(f"<{c}H", data, offset)
    if len(set(channel_ids)) != c:
        raise MCIFChannelCountError(f"{path}: channel ids are not distinct: {channel_ids}")
    offset += ids_size

    pixels = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=offset)
    pixels = torch.from_numpy(pixels.astype(np.float32).reshape(c, h, w))
    offset += pixels_size

    label = None
    if label_size:
        (label,) = struct.unpack_from("<H", data, offset)

    return MultiChannelImage(pixels, channel_ids), label


def load_mcif(path: str | Path) -> MultiChannelImage:
    image, _ = read_mcif(path)
    return image
