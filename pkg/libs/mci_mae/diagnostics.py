"""
Diagnostics: mask-sampler statistics, attention-map and reconstruction
exports, and finite-difference verification of the training losses.
"""

import csv
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.stats import chisquare

from mci_mae.decoder import DecoderConfig, ReconstructionOutput, reconstruct_image
from mci_mae.encoder import EncoderConfig, attention_mass, preferred_memory_tokens
from mci_mae.losses import (
    LossWeights,
    fourier_loss,
    pixel_loss,
    recon_loss,
    task_loss,
)
from mci_mae.masking import MaskBranch, MaskConfig, MaskPlan, draw_plans
from mci_mae.models import ModelConfig, build_model, stack_plans
from mci_mae.numerics import CHECK_DTYPE, grad_check
from mci_mae.tokenizer import MultiChannelImage, PatchConfig, patchify


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


@dataclass
class MaskStats:
    """
    Aggregates over a run of mask draws.

    Attributes:
        branch_frequencies: share of draws per MaskBranch value.
        channel_rates: per channel, share of its patches that were masked.
        k_counts: histogram of the number of whole masked channels, over the
            draws whose plan has a channel component.
        k_pvalue: chi-square p-value of k_counts against U{0..c-1}, or None.
        column_equality: over plans with a patch component, the share of
            channel pairs whose patch-mask columns are identical.
        masked_fraction: mean share of masked patches per plan.
    """

    draws: int
    n: int
    c: int
    branch_frequencies: dict[str, float]
    channel_rates: list[float]
    k_counts: list[int] = field(default_factory=list)
    k_pvalue: Optional[float] = None
    column_equality: Optional[float] = None
    masked_fraction: float = 0.0

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [("branch", b, f) for b, f in sorted(self.branch_frequencies.items())]
        rows += [("channel_rate", str(j), r) for j, r in enumerate(self.channel_rates)]
        rows += [("k_count", str(k), float(v)) for k, v in enumerate(self.k_counts)]
        if self.k_pvalue is not None:
            rows.append(("k_chi2_pvalue", "", self.k_pvalue))
        if self.column_equality is not None:
            rows.append(("column_equality", "", self.column_equality))
        rows.append(("masked_fraction", "", self.masked_fraction))
        return rows

    def to_dict(self) -> dict:
        return {
            "draws": self.draws,
            "n": self.n,
            "c": self.c,
            "branch_frequencies": self.branch_frequencies,
            "channel_rates": self.channel_rates,
            "k_counts": self.k_counts,
            "k_pvalue": self.k_pvalue,
            "column_equality": self.column_equality,
            "masked_fraction": self.masked_fraction,
        }

    def write_csv(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as f:
                self._write(f)

    def _write(self, f) -> None:
        writer = csv.writer(f)
        writer.writerow(["metric", "key", "value"])
        for metric, key, value in self.rows():
            writer.writerow([metric, key, f"{value:.6g}"])


def _whole_channels(plan: MaskPlan) -> Optional[int]:
    if plan.channel_component is not None:
        return int(plan.channel_component.all(dim=0).sum())
    if plan.branch == MaskBranch.CHANNEL_ONLY:
        return len(plan.masked_channels)
    return None


def _patch_columns(plan: MaskPlan) -> Optional[torch.Tensor]:
    if plan.patch_component is not None:
        return plan.patch_component
    if plan.branch == MaskBranch.PATCH_ONLY:
        return plan.mask
    return None


def mask_statistics(n: int, c: int, cfg: MaskConfig, draws: int, first_draw: int = 0) -> MaskStats:
    if draws < 1:
        raise ValueError(f"draws must be >= 1, got {draws}")

    plans = draw_plans(n, c, cfg, first_draw, draws)

    branches = Counter(plan.branch.value for plan in plans)
    masks = torch.stack([plan.mask for plan in plans]).to(torch.float64)

    k_values = [k for k in (_whole_channels(p) for p in plans) if k is not None]
    k_counts, k_pvalue = [], None
    if k_values:
        k_counts = np.bincount(k_values, minlength=c).tolist()
        if c > 1:
            k_pvalue = float(chisquare(k_counts[:c]).pvalue)

    pairs = list(combinations(range(c), 2))
    equal, total = 0, 0
    for plan in plans:
        columns = _patch_columns(plan)
        if columns is None or not pairs:
            continue
        for a, b in pairs:
            equal += int(torch.equal(columns[:, a], columns[:, b]))
            total += 1

    return MaskStats(
        draws=draws,
        n=n,
        c=c,
        branch_frequencies={b: v / draws for b, v in branches.items()},
        channel_rates=masks.mean(dim=(0, 1)).tolist(),
        k_counts=k_counts,
        k_pvalue=k_pvalue,
        column_equality=equal / total if total else None,
        masked_fraction=float(masks.mean()),
    )


@dataclass
class AttentionExport:
    channel_ids: tuple[int, ...]
    num_memory: int
    matrix: torch.Tensor

    @property
    def columns(self) -> list[str]:
        return (
            [f"ch_{cid}" for cid in self.channel_ids]
            + ["cls"]
            + [f"mem_{m}" for m in range(self.num_memory)]
        )

    @property
    def preferred_memory(self) -> dict[int, int]:
        if self.num_memory == 0:
            return {}
        memory = self.matrix[:, len(self.channel_ids) + 1 :]
        return preferred_memory_tokens(memory, self.channel_ids)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["query_channel"] + self.columns)
            for cid, row in zip(self.channel_ids, self.matrix.tolist()):
                writer.writerow([cid] + [f"{v:.6f}" for v in row])

    def plot(self, path: str | Path) -> None:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 4))
        im = ax.imshow(self.matrix.numpy(), cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(self.columns)), self.columns, rotation=45)
        ax.set_yticks(range(len(self.channel_ids)), [f"ch_{c}" for c in self.channel_ids])
        ax.set_title("Attention mass per query channel")
        plt.colorbar(im, ax=ax)
        plt.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def export_attention(model, image: MultiChannelImage) -> AttentionExport:
    tokens = patchify(image, model.cfg.patch, model)
    matrix = attention_mass(tokens, model)
    return AttentionExport(image.channel_ids, tokens.l, matrix.detach())


def reconstruct(model, image: MultiChannelImage, plan: MaskPlan) -> ReconstructionOutput:
    with torch.no_grad():
        out = model(image.pixels[None], image.channel_ids, plan.mask[None], with_task=False)
    return ReconstructionOutput(
        patch_pixels=out.predictions[0],
        mask=plan.mask.clone(),
        channel_ids=image.channel_ids,
        patch_cfg=model.cfg.patch,
    )


def _masked_view(image: MultiChannelImage, out: ReconstructionOutput) -> torch.Tensor:
    p = out.patch_cfg.p
    rows, cols = image.h // p, image.w // p
    hidden = out.mask.reshape(rows, cols, -1).permute(2, 0, 1)
    hidden = hidden.repeat_interleave(p, dim=1).repeat_interleave(p, dim=2)
    return torch.where(hidden, torch.full_like(image.pixels, float("nan")), image.pixels)


def export_reconstruction(
    image: MultiChannelImage, out: ReconstructionOutput, png_path: str | Path, csv_path: str | Path
) -> None:
    """
    Writes an original / masked / reconstructed grid (one row per channel) as
    PNG, and every pixel of the three views as CSV. Masked pixels are blank
    in the middle column and empty in the CSV's 'masked' column.
    """
    masked = _masked_view(image, out)
    recon = reconstruct_image(out, ground_truth=image).pixels
    plt = _pyplot()

    c = image.c
    fig, axes = plt.subplots(c, 3, figsize=(6, 2 * c), squeeze=False)
    for j in range(c):
        for col, (title, view) in enumerate(
            [("original", image.pixels), ("masked", masked), ("reconstructed", recon)]
        ):
            ax = axes[j][col]
            ax.imshow(view[j].numpy(), cmap="gray")
            ax.set_xticks([])
            ax.set_yticks([])
            if j == 0:
                ax.set_title(title)
        axes[j][0].set_ylabel(f"ch_{image.channel_ids[j]}")
    plt.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["channel_id", "row", "col", "original", "masked", "reconstructed"])
        for j, cid in enumerate(image.channel_ids):
            for y in range(image.h):
                for x in range(image.w):
                    m = float(masked[j, y, x])
                    writer.writerow(
                        [
                            cid,
                            y,
                            x,
                            f"{float(image.pixels[j, y, x]):.6g}",
                            "" if np.isnan(m) else f"{m:.6g}",
                            f"{float(recon[j, y, x]):.6g}",
                        ]
                    )


def gradcheck_model_config(num_classes: int = 3) -> ModelConfig:
    return ModelConfig(
        preset="gradcheck",
        patch=PatchConfig(p=4, d=8, l=2, n_max_channels=4, image_size=(8, 8)),
        encoder=EncoderConfig(depth=1, heads=2, d=8, mlp_ratio=2.0),
        decoder=DecoderConfig(depth=1, heads=2, mlp_ratio=2.0),
        num_classes=num_classes,
    )


def check_loss_gradients(
    seed: int = 0, epsilon: float = 1e-6, coords_per_param: int = 4, batch: int = 2
) -> dict[str, float]:
    """
    Runs grad_check on L_pixel, L_fourier, L_recon, L_task and L_final of a
    small 64-bit model and returns the maximum relative error of each.
    """
    cfg = gradcheck_model_config()
    channel_ids = (0, 1, 2)
    model = build_model(cfg, channel_ids, seed).to(CHECK_DTYPE)

    generator = torch.Generator().manual_seed(seed)
    pixels = torch.randn(batch, len(channel_ids), 8, 8, generator=generator, dtype=CHECK_DTYPE)
    labels = torch.randint(0, cfg.num_classes, (batch,), generator=generator)
    mask_cfg = MaskConfig(strategy="RANDOM_PATCH_FIXED", r_p=0.5, seed=seed)
    mask = stack_plans(draw_plans(cfg.patch.n, len(channel_ids), mask_cfg, 0, batch))
    weights = LossWeights(lambda_recon=0.99, lambda_f=0.01)

    def forward():
        return model(pixels, channel_ids, mask)

    def recon_term(loss):
        def fn():
            out = forward()
            if loss is recon_loss:
                return recon_loss(out.targets, out.predictions, out.mask, weights)
            return loss(out.targets, out.predictions, out.mask)

        return fn

    losses = {
        "L_pixel": recon_term(pixel_loss),
        "L_fourier": recon_term(fourier_loss),
        "L_recon": recon_term(recon_loss),
        "L_task": lambda: task_loss(forward().logits, labels),
        "L_final": lambda: model.compute_losses(forward(), labels, weights, channel_ids)[0],
    }

    params = list(model.named_parameters())
    return {
        name: grad_check(
            fn,
            params,
            epsilon=epsilon,
            coords_per_param=coords_per_param,
            seed=seed,
            min_magnitude=1e-4,
        )
        for name, fn in losses.items()
    }
