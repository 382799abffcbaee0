"""
The multi-channel masked autoencoder: tokenizer, encoder, channel-aware
decoder, fusion head and classifier, plus the presets used by the configs.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from mci_mae.decoder import ChannelAwareDecoder, DecoderConfig
from mci_mae.encoder import EncodedBatch, Encoder, EncoderConfig
from mci_mae.fusion import HybridTokenFusion, PoolMode, pool
from mci_mae.losses import (
    LossBreakdown,
    LossWeights,
    final_loss,
    fourier_loss,
    pixel_loss,
    regularizer_hook,
    task_loss,
)
from mci_mae.masking import MaskPlan
from mci_mae.tokenizer import ChannelTokenizer, PatchConfig, extract_patches

PRESETS = {
    "toy": {
        "patch": {"d": 64, "l": 4},
        "encoder": {"depth": 4, "heads": 4, "d": 64, "mlp_ratio": 4.0},
        "decoder": {"depth": 1, "heads": 4},
    },
    "gradcheck": {
        "patch": {"d": 8, "l": 2},
        "encoder": {"depth": 1, "heads": 2, "d": 8, "mlp_ratio": 2.0},
        "decoder": {"depth": 1, "heads": 2, "mlp_ratio": 2.0},
    },
    "vit-small": {
        "patch": {"d": 384, "l": 4},
        "encoder": {"depth": 11, "heads": 6, "d": 384, "mlp_ratio": 4.0},
        "decoder": {"depth": 1, "heads": 6},
    },
}


@dataclass
class ModelConfig:
    preset: str = "toy"
    patch: PatchConfig = field(default_factory=PatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pool_mode: PoolMode = PoolMode.HYBRID
    num_classes: int = 3
    fusion_mlp_ratio: float = 1.0

    def __post_init__(self):
        self.pool_mode = PoolMode.parse(self.pool_mode)
        if self.patch.d != self.encoder.d:
            raise ValueError(
                f"Patch embedding width {self.patch.d} differs from encoder width {self.encoder.d}"
            )
        if self.patch.d % self.decoder.heads != 0:
            raise ValueError(
                f"Width {self.patch.d} must be divisible by the decoder head count {self.decoder.heads}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class ModelOutput:
    """
    Attributes:
        logits: (B, num_classes), or None when the task path was skipped.
        predictions: (B, n, c, p*p) reconstructed patches, or None.
        targets: (B, n, c, p*p) ground-truth patches.
        mask: (B, n, c) bool, True at masked slots.
        encoded: the encoder output.
    """

    logits: Optional[torch.Tensor]
    predictions: Optional[torch.Tensor]
    targets: torch.Tensor
    mask: torch.Tensor
    encoded: EncodedBatch


def stack_plans(plans: Sequence[MaskPlan]) -> torch.Tensor:
    return torch.stack([plan.mask for plan in plans])


class MultiChannelMAE(nn.Module):
    """
    Holds every learnable tensor of the model. The channel ids in 'channel_ids'
    get registered rows in the channel-token table.
    """

    def __init__(self, cfg: ModelConfig, channel_ids: Sequence[int] = ()):
        super().__init__()
        self.cfg = cfg
        d = cfg.patch.d

        self.tokenizer = ChannelTokenizer(cfg.patch)
        self.encoder = Encoder(cfg.encoder)
        self.decoder = ChannelAwareDecoder(cfg.decoder, cfg.patch)
        self.fusion = HybridTokenFusion(d, cfg.fusion_mlp_ratio)
        self.classifier = nn.Linear(d, cfg.num_classes)
        nn.init.trunc_normal_(self.classifier.weight, mean=0.0, std=0.02)
        nn.init.zeros_(self.classifier.bias)

        self.tokenizer.register_channels(channel_ids)

    @property
    def num_special(self) -> int:
        return 1 + self.cfg.patch.l

    def encode_batch(
        self,
        pixels: torch.Tensor,
        channel_ids: Sequence[int],
        mask: Optional[torch.Tensor] = None,
        channel_table: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncodedBatch:
        """
        Args:
            pixels: (B, c, h, w).
            mask: (B, n, c) bool, True at masked slots; None keeps everything.
        """
        tokens = self.tokenizer(pixels, channel_ids, channel_table)
        token_mask = None
        if mask is not None:
            token_mask = mask.transpose(1, 2).reshape(mask.shape[0], -1)
        return self.encoder(tokens, self.num_special, token_mask, return_attention)

    def classify(self, encoded: EncodedBatch) -> torch.Tensor:
        return self.classifier(pool(encoded, self.cfg.pool_mode, self.fusion))

    def forward(
        self,
        pixels: torch.Tensor,
        channel_ids: Sequence[int],
        mask: Optional[torch.Tensor] = None,
        channel_table: Optional[torch.Tensor] = None,
        with_task: bool = True,
        with_recon: bool = True,
    ) -> ModelOutput:
        batch = pixels.shape[0]
        n, c = self.cfg.patch.n, len(channel_ids)
        if mask is None:
            mask = torch.zeros(batch, n, c, dtype=torch.bool)

        encoded = self.encode_batch(pixels, channel_ids, mask, channel_table)

        logits = self.classify(encoded) if with_task else None
        predictions = None
        if with_recon:
            predictions = self.decoder(encoded, self.tokenizer, channel_ids, channel_table)

        return ModelOutput(
            logits=logits,
            predictions=predictions,
            targets=extract_patches(pixels, self.cfg.patch.p),
            mask=mask,
            encoded=encoded,
        )

    def compute_losses(
        self,
        out: ModelOutput,
        labels: Optional[torch.Tensor],
        weights: LossWeights,
        channel_ids: Sequence[int],
        channel_table: Optional[torch.Tensor] = None,
    ) -> tuple[torch.Tensor, LossBreakdown]:
        """
        Returns the L_final tensor to optimize and the breakdown of its terms.
        Terms whose weight is zero are not evaluated.
        """
        zero = out.targets.sum() * 0.0
        P = int(out.mask.sum())

        pixel = fourier = recon = zero
        if weights.lambda_recon > 0 and out.predictions is not None:
            pixel = pixel_loss(out.targets, out.predictions, out.mask)
            fourier = fourier_loss(out.targets, out.predictions, out.mask)
            recon = (1.0 - weights.lambda_f) * pixel + weights.lambda_f * fourier

        task = reg = zero
        if weights.lambda_recon < 1 and out.logits is not None:
            task = task_loss(out.logits, labels)
            channels = self.tokenizer.channel_embeddings(channel_ids, channel_table)
            reg = regularizer_hook(channels, out.encoded.patches, weights.regularizer)

        total = final_loss(task, reg, recon, weights)
        breakdown = LossBreakdown(
            L_pixel=float(pixel),
            L_fourier=float(fourier),
            L_recon=float(recon),
            L_task=float(task),
            L_d=float(reg),
            L_final=float(total),
            P=P,
        )
        return total, breakdown


def build_model(cfg: ModelConfig, channel_ids: Sequence[int], seed: int = 0) -> MultiChannelMAE:
    """
    Builds a freshly initialized model; initialization depends on 'seed' only.
    """
    torch.manual_seed(seed)
    return MultiChannelMAE(cfg, channel_ids)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
