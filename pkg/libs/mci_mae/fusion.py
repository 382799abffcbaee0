"""
Hybrid token fusion and the simpler pooling modes it is compared against.

A learnable query attends over the encoder's patch tokens (memory tokens and
padding excluded); the sigmoid of the result gates the CLS token elementwise,
and a two-layer MLP produces the representation fed to the classifier.
"""

from enum import Enum
from typing import Optional

import torch
import torch.nn as nn

from mci_mae.encoder import EncodedBatch, EncodedSequence


class FusionError(Exception):
    """
    Parent class for errors raised by the fusion head.
    """

    pass


class PoolMode(str, Enum):
    CLS = "CLS"
    AVG = "AVG"
    CLS_PLUS_AVG = "CLS_PLUS_AVG"
    HYBRID = "HYBRID"

    @classmethod
    def parse(cls, value) -> "PoolMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper().replace("-", "_").replace("+", "_PLUS_"))
        except ValueError:
            raise FusionError(f"Unknown pooling mode '{value}'")


class HybridTokenFusion(nn.Module):
    """
    Single-head cross-attention from q_patch to the patch tokens, then
    f_fusion = cls * sigmoid(attended) and f_final = Linear(GELU(Linear(f_fusion))).
    """

    def __init__(self, d: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.scale = d**-0.5
        self.q_patch = nn.Parameter(torch.zeros(d))
        self.to_q = nn.Linear(d, d)
        self.to_k = nn.Linear(d, d)
        self.to_v = nn.Linear(d, d)
        hidden = int(d * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(d, hidden),
            nn.GELU(),
            nn.Linear(hidden, d),
        )

        nn.init.normal_(self.q_patch, mean=0.0, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, mean=0.0, std=0.02)
                nn.init.zeros_(module.bias)

    def gate(self, patches: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        sigmoid(CrossAttention(q_patch, patches)), shape (B, d).
        """
        q = self.to_q(self.q_patch)
        k = self.to_k(patches)
        v = self.to_v(patches)

        scores = torch.einsum("d,bnd->bn", q, k) * self.scale
        if padding is not None:
            scores = scores.masked_fill(padding, float("-inf"))
        weights = scores.softmax(dim=-1)

        return torch.sigmoid(torch.einsum("bn,bnd->bd", weights, v))

    def fuse(self, cls: torch.Tensor, patches: torch.Tensor, padding=None) -> torch.Tensor:
        return cls * self.gate(patches, padding)

    def forward(self, cls: torch.Tensor, patches: torch.Tensor, padding=None) -> torch.Tensor:
        return self.mlp(self.fuse(cls, patches, padding))


def _as_batch(enc) -> EncodedBatch:
    return enc.to_batch() if isinstance(enc, EncodedSequence) else enc


def _fusion_of(params) -> HybridTokenFusion:
    return getattr(params, "fusion", params)


def fuse(enc, params) -> torch.Tensor:
    """
    Hybrid fusion of an encoded image (EncodedSequence -> (d,)) or batch
    (EncodedBatch -> (B, d)).
    """
    batch = _as_batch(enc)
    if batch.patches.shape[1] == 0 or bool((batch.visible_counts == 0).any()):
        raise FusionError("Fusion needs at least one patch token")

    padding = batch.patch_padding if bool(batch.patch_padding.any()) else None
    out = _fusion_of(params)(batch.cls, batch.patches, padding)
    return out[0] if isinstance(enc, EncodedSequence) else out


def average_patches(batch: EncodedBatch) -> torch.Tensor:
    keep = (~batch.patch_padding)[..., None].to(batch.patches.dtype)
    return (batch.patches * keep).sum(dim=1) / keep.sum(dim=1)


def pool(enc, mode, params=None) -> torch.Tensor:
    """
    Representation of an encoded image or batch under a pooling mode: CLS,
    AVG of patch tokens, CLS_PLUS_AVG, or HYBRID (fuse).
    """
    mode = PoolMode.parse(mode)
    batch = _as_batch(enc)
    if batch.patches.shape[1] == 0:
        raise FusionError("Pooling needs at least one patch token")

    if mode == PoolMode.CLS:
        out = batch.cls
    elif mode == PoolMode.AVG:
        out = average_patches(batch)
    elif mode == PoolMode.CLS_PLUS_AVG:
        out = batch.cls + average_patches(batch)
    else:
        return fuse(enc, params)

    return out[0] if isinstance(enc, EncodedSequence) else out
