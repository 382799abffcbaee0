"""
Turns multi-channel images into token sequences.

Every channel is cut into p x p patches that go through one projection shared
by all channels. A patch token then gets the positional embedding of its
spatial position (the same for every channel) and the token of its channel
added to it. The CLS token and the memory tokens are prepended, which gives
the sequence

    [CLS | memory_1..memory_l | ch1 pos1..posn | ch2 pos1..posn | ... ]

so patch tokens are ordered channel-major, position varying fastest.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange


class TokenizerError(Exception):
    """
    Parent class for errors raised while building token sequences.
    """

    pass


class UnknownChannelError(TokenizerError):
    def __init__(self, channel_id: int):
        super().__init__(f"Channel id {channel_id} has no registered channel token")
        self.channel_id = channel_id


class TokenKind(str, Enum):
    CLS = "CLS"
    MEMORY = "MEMORY"
    PATCH = "PATCH"


@dataclass(frozen=True)
class TokenMeta:
    kind: TokenKind
    position: Optional[int] = None
    channel: Optional[int] = None


@dataclass
class PatchConfig:
    """
    Patch geometry and token-table sizes.

    Args:
        p: patch side length in pixels.
        d: embedding width.
        l: number of memory tokens.
        n_max_channels: number of rows of the channel-token table; channel ids
            must be smaller than this.
        image_size: (h, w) of the images; fixes the number of learnable
            positional embeddings.
    """

    p: int = 8
    d: int = 64
    l: int = 4
    n_max_channels: int = 16
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.p < 1:
            raise ValueError(f"Patch size p must be >= 1, got {self.p}")
        if self.d < 4:
            raise ValueError(f"Embedding width d must be >= 4, got {self.d}")
        if self.l < 0:
            raise ValueError(f"Memory token count l must be >= 0, got {self.l}")
        if self.n_max_channels < 1:
            raise ValueError("n_max_channels must be >= 1")
        check_divisible(*self.image_size, self.p)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.p, self.image_size[1] // self.p

    @property
    def n(self) -> int:
        rows, cols = self.grid
        return rows * cols


@dataclass
class MultiChannelImage:
    """
    A multi-channel image. Pixels are stored channel-first, shape (c, h, w),
    and 'channel_ids' names the semantic identity of each channel.
    """

    pixels: torch.Tensor
    channel_ids: tuple[int, ...]

    def __post_init__(self):
        self.channel_ids = tuple(int(c) for c in self.channel_ids)
        if self.pixels.ndim != 3:
            raise TokenizerError(
                f"Pixels must have shape (c, h, w), got {tuple(self.pixels.shape)}"
            )
        if self.pixels.shape[0] != len(self.channel_ids):
            raise TokenizerError(
                f"Image has {self.pixels.shape[0]} channels but {len(self.channel_ids)} channel ids"
            )
        if len(set(self.channel_ids)) != len(self.channel_ids):
            raise TokenizerError(f"Channel ids must be distinct: {self.channel_ids}")
        if not torch.isfinite(self.pixels).all():
            raise TokenizerError("Image contains non-finite pixels")

    @property
    def c(self) -> int:
        return self.pixels.shape[0]

    @property
    def h(self) -> int:
        return self.pixels.shape[1]

    @property
    def w(self) -> int:
        return self.pixels.shape[2]

    def select_channels(self, channel_ids: Sequence[int]) -> "MultiChannelImage":
        """
        Returns an image made of the given channels, in the given order.
        """
        index = []
        for cid in channel_ids:
            if cid not in self.channel_ids:
                raise UnknownChannelError(cid)
            index.append(self.channel_ids.index(cid))
        return MultiChannelImage(self.pixels[index], tuple(channel_ids))


@dataclass
class TokenSequence:
    """
    Embeddings of shape (1 + l + n*c, d) plus per-token metadata.
    """

    embeddings: torch.Tensor
    meta: list[TokenMeta]
    n: int
    channel_ids: tuple[int, ...]
    l: int
    grid: tuple[int, int] = field(default=(0, 0))

    @property
    def c(self) -> int:
        return len(self.channel_ids)

    @property
    def num_special(self) -> int:
        return 1 + self.l

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def check_divisible(h: int, w: int, p: int) -> None:
    if h % p != 0 or w % p != 0:
        raise TokenizerError(
            f"Image size {h}x{w} is not divisible by the patch size {p}"
        )


def extract_patches(pixels: torch.Tensor, p: int) -> torch.Tensor:
    """
    Cuts channel-first pixels of shape (..., c, h, w) into flattened patches of
    shape (..., n, c, p*p), positions enumerated row-major over the patch grid.
    """
    check_divisible(pixels.shape[-2], pixels.shape[-1], p)
    return rearrange(
        pixels, "... c (gh p1) (gw p2) -> ... (gh gw) c (p1 p2)", p1=p, p2=p
    )


def unpatchify(
    patches: torch.Tensor,
    cfg: PatchConfig,
    image_size: Optional[tuple[int, int]] = None,
    channel_ids: Optional[Sequence[int]] = None,
) -> MultiChannelImage:
    """
    Inverse of extract_patches for one image: (n, c, p*p) patches back to a
    MultiChannelImage. The image size defaults to the configured one.
    """
    h, w = image_size if image_size is not None else cfg.image_size
    p = cfg.p
    if patches.ndim != 3 or patches.shape[-1] != p * p:
        raise TokenizerError(
            f"Patches must have shape (n, c, {p * p}), got {tuple(patches.shape)}"
        )
    if patches.shape[0] * p * p != h * w or h % p != 0 or w % p != 0:
        raise TokenizerError(
            f"{patches.shape[0]} patches of size {p}x{p} cannot tile a {h}x{w} image"
        )

    pixels = rearrange(
        patches, "(gh gw) c (p1 p2) -> c (gh p1) (gw p2)", gh=h // p, gw=w // p, p1=p, p2=p
    )
    if channel_ids is None:
        channel_ids = tuple(range(pixels.shape[0]))

    return MultiChannelImage(pixels.contiguous(), tuple(channel_ids))


class ChannelTokenizer(nn.Module):
    """
    Holds the shared patch projection, the positional embeddings, the
    channel-token table, the CLS token and the memory tokens.
    """

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg

        self.patch_proj = nn.Linear(cfg.p * cfg.p, cfg.d)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n, cfg.d))
        self.channel_tokens = nn.Parameter(torch.zeros(cfg.n_max_channels, cfg.d))
        self.cls_token = nn.Parameter(torch.zeros(cfg.d))
        self.memory_tokens = nn.Parameter(torch.zeros(cfg.l, cfg.d))

        # rows of the channel-token table that belong to a known channel
        self.register_buffer(
            "known_channels", torch.zeros(cfg.n_max_channels, dtype=torch.bool)
        )

        self._init_parameters()

    def _init_parameters(self) -> None:
        nn.init.trunc_normal_(self.patch_proj.weight, mean=0.0, std=0.02)
        nn.init.zeros_(self.patch_proj.bias)
        nn.init.trunc_normal_(self.pos_embed, mean=0.0, std=0.02)
        nn.init.trunc_normal_(self.channel_tokens, mean=0.0, std=0.02)
        nn.init.normal_(self.cls_token, mean=0.0, std=0.02)
        nn.init.normal_(self.memory_tokens, mean=0.0, std=0.02)

    def register_channels(self, channel_ids: Sequence[int]) -> None:
        for cid in channel_ids:
            if not 0 <= cid < self.cfg.n_max_channels:
                raise TokenizerError(
                    f"Channel id {cid} does not fit a table of {self.cfg.n_max_channels} rows"
                )
            self.known_channels[cid] = True

    def channel_index(self, channel_ids: Sequence[int]) -> torch.Tensor:
        for cid in channel_ids:
            if not 0 <= cid < self.cfg.n_max_channels or not bool(self.known_channels[cid]):
                raise UnknownChannelError(cid)
        return torch.as_tensor(list(channel_ids), dtype=torch.long)

    def channel_embeddings(
        self, channel_ids: Sequence[int], channel_table: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """
        Returns the (c, d) channel tokens of the given ids. 'channel_table'
        replaces the learned table when given (novel-channel fine-tuning).
        """
        table = self.channel_tokens if channel_table is None else channel_table
        return table[self.channel_index(channel_ids)]

    def project(self, pixels: torch.Tensor) -> torch.Tensor:
        """
        Shared projection of every patch: (B, c, h, w) -> (B, n, c, d).
        """
        return self.patch_proj(extract_patches(pixels, self.cfg.p))

    def special_tokens(self, batch_size: int) -> torch.Tensor:
        special = torch.cat([self.cls_token[None], self.memory_tokens], dim=0)
        return special[None].expand(batch_size, -1, -1)

    def forward(
        self,
        pixels: torch.Tensor,
        channel_ids: Sequence[int],
        channel_table: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Tokenizes a batch of images sharing the same channels.

        Args:
            pixels: tensor of shape (B, c, h, w).
            channel_ids: the c channel ids, in pixel order.
            channel_table: optional replacement for the channel-token table.

        Returns:
            Embeddings of shape (B, 1 + l + n*c, d), patch tokens channel-major.
        """
        if pixels.ndim != 4:
            raise TokenizerError(f"Expected (B, c, h, w) pixels, got {tuple(pixels.shape)}")
        if tuple(pixels.shape[-2:]) != self.cfg.image_size:
            check_divisible(pixels.shape[-2], pixels.shape[-1], self.cfg.p)
            raise TokenizerError(
                f"Image size {tuple(pixels.shape[-2:])} does not match the configured {self.cfg.image_size}"
            )
        if pixels.shape[1] != len(channel_ids):
            raise TokenizerError(
                f"Got {pixels.shape[1]} channels but {len(channel_ids)} channel ids"
            )

        channels = self.channel_embeddings(channel_ids, channel_table)
        tokens = self.project(pixels)
        tokens = tokens + self.pos_embed[None, :, None, :] + channels[None, None, :, :]
        tokens = rearrange(tokens, "b n c d -> b (c n) d")

        return torch.cat([self.special_tokens(pixels.shape[0]), tokens], dim=1)


def token_meta(n: int, channel_ids: Sequence[int], l: int) -> list[TokenMeta]:
    meta = [TokenMeta(TokenKind.CLS)]
    meta += [TokenMeta(TokenKind.MEMORY) for _ in range(l)]
    for cid in channel_ids:
        meta += [TokenMeta(TokenKind.PATCH, position=i, channel=cid) for i in range(n)]
    return meta


def patchify(image: MultiChannelImage, cfg: PatchConfig, params) -> TokenSequence:
    """
    Builds the TokenSequence of a single image.

    Args:
        image: the image to tokenize.
        cfg: patch configuration.
        params: the model (or its ChannelTokenizer) holding the embeddings.
    """
    tokenizer = getattr(params, "tokenizer", params)
    check_divisible(image.h, image.w, cfg.p)

    embeddings = tokenizer(image.pixels[None], image.channel_ids)[0]
    n = (image.h // cfg.p) * (image.w // cfg.p)

    return TokenSequence(
        embeddings=embeddings,
        meta=token_meta(n, image.channel_ids, cfg.l),
        n=n,
        channel_ids=image.channel_ids,
        l=cfg.l,
        grid=(image.h // cfg.p, image.w // cfg.p),
    )
