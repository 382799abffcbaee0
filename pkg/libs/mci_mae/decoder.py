"""
Channel-aware decoder.

The encoder output is spread back onto all n*c patch slots: visible slots get
their encoded token, masked slots get the single shared mask token. Every slot
then has its channel token and its positional embedding added, so one shared
decoder can tell channels apart. CLS and memory tokens go through the decoder
blocks with the patch slots, and a linear head maps each slot to p*p pixels.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange

from mci_mae.encoder import EncodedBatch, EncodedSequence, TransformerStack
from mci_mae.masking import MaskPlan
from mci_mae.tokenizer import (
    ChannelTokenizer,
    MultiChannelImage,
    PatchConfig,
    TokenKind,
    extract_patches,
    unpatchify,
)


class DecoderError(Exception):
    """
    Parent class for errors raised by the decoder.
    """

    pass


@dataclass
class DecoderConfig:
    """
    Args:
        depth: number of decoder blocks (1 or 2 is enough).
        heads: attention heads.
        mlp_ratio: hidden expansion of the block MLPs.
        separate_heads: use one output head per channel-token row instead of
            the shared head (ablation).
    """

    depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0
    separate_heads: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"Decoder depth must be >= 1, got {self.depth}")


@dataclass
class ReconstructionOutput:
    """
    Predicted pixels for every (position, channel) slot of one image.

    Attributes:
        patch_pixels: (n, c, p*p) predictions, visible slots included.
        mask: (n, c) bool, True where the slot was masked.
    """

    patch_pixels: torch.Tensor
    mask: torch.Tensor
    channel_ids: tuple[int, ...]
    patch_cfg: PatchConfig

    @property
    def visible(self) -> torch.Tensor:
        return ~self.mask


class ChannelAwareDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, patch_cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_cfg = patch_cfg
        d = patch_cfg.d
        pixels = patch_cfg.p * patch_cfg.p

        self.mask_token = nn.Parameter(torch.zeros(d))
        self.stack = TransformerStack(d, cfg.depth, cfg.heads, cfg.mlp_ratio)

        if cfg.separate_heads:
            self.head_weight = nn.Parameter(torch.zeros(patch_cfg.n_max_channels, d, pixels))
            self.head_bias = nn.Parameter(torch.zeros(patch_cfg.n_max_channels, pixels))
            nn.init.trunc_normal_(self.head_weight, mean=0.0, std=0.02)
        else:
            self.head = nn.Linear(d, pixels)
            nn.init.trunc_normal_(self.head.weight, mean=0.0, std=0.02)
            nn.init.zeros_(self.head.bias)

        nn.init.normal_(self.mask_token, mean=0.0, std=0.02)

    def fill_slots(self, enc: EncodedBatch, num_slots: int) -> torch.Tensor:
        """
        (B, n*c, d) sequence with encoded tokens at visible slots and the mask
        token everywhere else.
        """
        batch = enc.embeddings.shape[0]
        valid = enc.slot_index >= 0
        batch_idx = torch.arange(batch)[:, None].expand_as(enc.slot_index)[valid]
        slot_idx = enc.slot_index[valid]

        placed = torch.zeros(
            batch, num_slots, enc.embeddings.shape[-1], dtype=enc.embeddings.dtype
        ).index_put((batch_idx, slot_idx), enc.patches[valid])
        visible = torch.zeros(batch, num_slots, dtype=torch.bool).index_put(
            (batch_idx, slot_idx), torch.ones_like(slot_idx, dtype=torch.bool)
        )

        return torch.where(visible[..., None], placed, self.mask_token.to(placed.dtype))

    def _head(self, x: torch.Tensor, channel_index: torch.Tensor) -> torch.Tensor:
        # x: (B, c, n, d)
        if self.cfg.separate_heads:
            weight = self.head_weight[channel_index]
            bias = self.head_bias[channel_index]
            return torch.einsum("bcnd,cdp->bcnp", x, weight) + bias[None, :, None, :]
        return self.head(x)

    def forward(
        self,
        enc: EncodedBatch,
        tokenizer: ChannelTokenizer,
        channel_ids: Sequence[int],
        channel_table: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """
        Returns predicted pixels of shape (B, n, c, p*p).
        """
        c = len(channel_ids)
        n = tokenizer.cfg.n
        slots = self.fill_slots(enc, n * c)

        channels = tokenizer.channel_embeddings(channel_ids, channel_table)
        slots = rearrange(slots, "b (c n) d -> b c n d", c=c)
        slots = slots + tokenizer.pos_embed[None, None] + channels[None, :, None, :]

        x = torch.cat(
            [enc.embeddings[:, : enc.num_special], rearrange(slots, "b c n d -> b (c n) d")],
            dim=1,
        )
        out, _ = self.stack(x)

        patch_out = rearrange(out[:, enc.num_special :], "b (c n) d -> b c n d", c=c)
        pixels = self._head(patch_out, tokenizer.channel_index(channel_ids))
        return rearrange(pixels, "b c n p -> b n c p")


def decode(enc: EncodedSequence, plan: MaskPlan, params) -> ReconstructionOutput:
    """
    Decodes one encoded sequence back to per-slot pixel predictions.
    """
    if plan.n != enc.n or plan.c != len(enc.channel_ids):
        raise DecoderError(
            f"Plan is {plan.n}x{plan.c} but the encoding has n={enc.n}, c={len(enc.channel_ids)}"
        )
    if enc.v != plan.num_visible:
        raise DecoderError(
            f"Encoding keeps {enc.v} patches but the plan leaves {plan.num_visible} visible"
        )
    for m in enc.meta:
        if m.kind == TokenKind.PATCH and bool(plan.mask[m.position, enc.channel_ids.index(m.channel)]):
            raise DecoderError(
                f"Encoded patch (position {m.position}, channel {m.channel}) is masked in the plan"
            )

    preds = params.decoder(enc.to_batch(), params.tokenizer, enc.channel_ids)[0]
    return ReconstructionOutput(
        patch_pixels=preds,
        mask=plan.mask.clone(),
        channel_ids=enc.channel_ids,
        patch_cfg=params.tokenizer.cfg,
    )


def reconstruct_image(
    out: ReconstructionOutput, ground_truth: Optional[MultiChannelImage] = None
) -> MultiChannelImage:
    """
    Assembles the predicted patches into an image. When 'ground_truth' is given,
    visible slots show the true pixels and only masked slots show predictions.
    """
    patches = out.patch_pixels.detach()
    if ground_truth is not None:
        truth = extract_patches(ground_truth.pixels, out.patch_cfg.p).to(patches.dtype)
        patches = torch.where(out.mask[..., None], patches, truth)

    return unpatchify(patches, out.patch_cfg, channel_ids=out.channel_ids)
