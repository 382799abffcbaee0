"""
Transformer encoder over the visible tokens, plus attention diagnostics.

Masked patch tokens are dropped before the first block; the CLS token and all
memory tokens are always kept. Batches whose images keep different numbers of
patches are right-padded and the padding is excluded from attention keys.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange

from mci_mae.masking import MaskPlan
from mci_mae.tokenizer import TokenKind, TokenMeta, TokenSequence


class EncoderError(Exception):
    """
    Parent class for errors raised by the encoder.
    """

    pass


@dataclass
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    d: int = 64
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"Encoder depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(f"Width {self.d} must be divisible by the head count {self.heads}")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_qkv = nn.Linear(dim, dim * 3)
        self.to_out = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, key_padding: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        qkv = self.to_qkv(x).chunk(3, dim=-1)
        q, k, v = (rearrange(t, "b n (h e) -> b h n e", h=self.heads) for t in qkv)

        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if key_padding is not None:
            dots = dots.masked_fill(key_padding[:, None, None, :], float("-inf"))

        attn = dots.softmax(dim=-1)
        out = rearrange(torch.matmul(attn, v), "b h n e -> b n (h e)")
        return self.to_out(out), attn


class Block(nn.Module):
    """
    Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x)).
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, dim),
        )

    def forward(
        self, x: torch.Tensor, key_padding: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attended, attn = self.attn(self.norm1(x), key_padding)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, attn


class TransformerStack(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            [Block(dim, heads, mlp_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.apply(_init_module)

    def forward(
        self,
        x: torch.Tensor,
        key_padding: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        attentions = []
        for block in self.blocks:
            x, attn = block(x, key_padding)
            if return_attention:
                attentions.append(attn)
        return self.norm(x), attentions


def _init_module(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


@dataclass
class EncodedBatch:
    """
    Encoder output for a batch.

    Attributes:
        embeddings: (B, 1 + l + v_max, d).
        padding: (B, 1 + l + v_max) bool, True at padded slots.
        slot_index: (B, v_max) long, the patch-slot index (0..n*c-1, token
            order) of every kept patch; -1 at padding.
        num_special: 1 + l.
        attentions: per-block attention probabilities, when requested.
    """

    embeddings: torch.Tensor
    padding: torch.Tensor
    slot_index: torch.Tensor
    num_special: int
    attentions: Optional[list[torch.Tensor]] = None

    @property
    def cls(self) -> torch.Tensor:
        return self.embeddings[:, 0]

    @property
    def memory(self) -> torch.Tensor:
        return self.embeddings[:, 1 : self.num_special]

    @property
    def patches(self) -> torch.Tensor:
        return self.embeddings[:, self.num_special :]

    @property
    def patch_padding(self) -> torch.Tensor:
        return self.padding[:, self.num_special :]

    @property
    def visible_counts(self) -> torch.Tensor:
        return (~self.patch_padding).sum(dim=1)

    def with_embeddings(self, embeddings: torch.Tensor) -> "EncodedBatch":
        return EncodedBatch(
            embeddings, self.padding, self.slot_index, self.num_special, self.attentions
        )


@dataclass
class EncodedSequence:
    """
    Encoder output of a single image: (1 + l + v, d) embeddings whose metadata
    mirrors the kept input tokens.
    """

    embeddings: torch.Tensor
    meta: list[TokenMeta]
    v: int
    l: int
    n: int
    channel_ids: tuple[int, ...]

    def to_batch(self) -> EncodedBatch:
        kept = []
        for m in self.meta:
            if m.kind == TokenKind.PATCH:
                kept.append(self.channel_ids.index(m.channel) * self.n + m.position)

        return EncodedBatch(
            embeddings=self.embeddings[None],
            padding=torch.zeros(1, len(self.meta), dtype=torch.bool),
            slot_index=torch.as_tensor(kept, dtype=torch.long)[None],
            num_special=1 + self.l,
        )


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.stack = TransformerStack(cfg.d, cfg.depth, cfg.heads, cfg.mlp_ratio)

    def forward(
        self,
        tokens: torch.Tensor,
        num_special: int,
        token_mask: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncodedBatch:
        """
        Args:
            tokens: (B, 1 + l + n*c, d) embeddings from the tokenizer.
            num_special: 1 + l.
            token_mask: (B, n*c) bool, True for masked patch slots.
        """
        batch, length, _ = tokens.shape
        num_slots = length - num_special
        if token_mask is None:
            token_mask = torch.zeros(batch, num_slots, dtype=torch.bool)
        if token_mask.shape != (batch, num_slots):
            raise EncoderError(
                f"Mask of shape {tuple(token_mask.shape)} does not match {batch} x {num_slots} patch slots"
            )

        visible_counts = (~token_mask).sum(dim=1)
        if bool((visible_counts == 0).any()):
            raise EncoderError("Every patch of an image is masked")

        # stable sort keeps visible slots first, in their original order
        order = torch.argsort(token_mask.long(), dim=1, stable=True)
        v_max = int(visible_counts.max())
        slot_index = order[:, :v_max]
        patch_padding = torch.arange(v_max)[None, :] >= visible_counts[:, None]
        slot_index = slot_index.masked_fill(patch_padding, -1)

        patches = tokens[:, num_special:]
        gathered = torch.gather(
            patches, 1, slot_index.clamp(min=0)[..., None].expand(-1, -1, patches.shape[-1])
        )
        x = torch.cat([tokens[:, :num_special], gathered], dim=1)

        padding = torch.cat(
            [torch.zeros(batch, num_special, dtype=torch.bool), patch_padding], dim=1
        )
        key_padding = padding if bool(padding.any()) else None

        out, attentions = self.stack(x, key_padding, return_attention)
        return EncodedBatch(
            out, padding, slot_index, num_special, attentions if return_attention else None
        )


def _encoder_of(params) -> Encoder:
    return getattr(params, "encoder", params)


def encode(tokens: TokenSequence, plan: MaskPlan, params) -> EncodedSequence:
    """
    Encodes one token sequence under a mask plan: masked patch tokens are
    dropped, CLS and memory tokens are kept, output length is 1 + l + v.
    """
    if plan.n != tokens.n or plan.c != tokens.c:
        raise EncoderError(
            f"Plan is {plan.n}x{plan.c} but the sequence has n={tokens.n}, c={tokens.c}"
        )
    if plan.num_visible == 0:
        raise EncoderError("Every patch of the image is masked")

    token_mask = plan.token_mask()[None]
    batch = _encoder_of(params)(
        tokens.embeddings[None], tokens.num_special, token_mask
    )

    keep = [True] * tokens.num_special + (~plan.token_mask()).tolist()
    meta = [m for m, k in zip(tokens.meta, keep) if k]

    return EncodedSequence(
        embeddings=batch.embeddings[0],
        meta=meta,
        v=plan.num_visible,
        l=tokens.l,
        n=tokens.n,
        channel_ids=tokens.channel_ids,
    )


def attention_mass(tokens: TokenSequence, params) -> torch.Tensor:
    """
    Full attention-mass table of one unmasked forward pass.

    Entry (i, t) is the attention mass that query patches of channel i put on
    target group t, averaged over layers, heads and the query patches of the
    channel. Targets are the c channels, then CLS, then the l memory tokens,
    so every row sums to 1.

    Returns:
        Tensor of shape (c, c + 1 + l).
    """
    encoder = _encoder_of(params)
    with torch.no_grad():
        batch = encoder(tokens.embeddings[None], tokens.num_special, return_attention=True)

    n, c, l = tokens.n, tokens.c, tokens.l
    special = tokens.num_special
    rows = []
    # (layers, heads, L, L) for the single image
    stacked = torch.stack([a[0] for a in batch.attentions])
    attn = stacked.mean(dim=(0, 1))

    for i in range(c):
        queries = attn[special + i * n : special + (i + 1) * n]
        channel_mass = [
            queries[:, special + j * n : special + (j + 1) * n].sum(dim=-1) for j in range(c)
        ]
        groups = channel_mass + [queries[:, 0]] + [queries[:, 1 + m] for m in range(l)]
        rows.append(torch.stack(groups, dim=-1).mean(dim=0))

    return torch.stack(rows)


def patch_channel_attention(tokens: TokenSequence, params) -> torch.Tensor:
    """
    (c, c + 1) matrix: mass that patches of channel i put on patches of
    channel j, last column on CLS. Memory-token mass is left out, so rows sum
    to at most 1; see memory_attention for that part.
    """
    return attention_mass(tokens, params)[:, : tokens.c + 1]


def memory_attention(tokens: TokenSequence, params) -> torch.Tensor:
    """
    (c, l) matrix of the mass each channel's patches put on each memory token.
    """
    if tokens.l == 0:
        raise EncoderError("memory_attention requires at least one memory token")
    return attention_mass(tokens, params)[:, tokens.c + 1 :]


def preferred_memory_tokens(memory: torch.Tensor, channel_ids: Sequence[int]) -> dict[int, int]:
    """
    Maps each channel id to the memory token its patches attend to most.
    """
    return {cid: int(memory[i].argmax()) for i, cid in enumerate(channel_ids)}
