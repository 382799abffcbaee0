"""
Training objectives.

Reconstruction is scored on masked patches only:

    L_pixel   = 1/P * sum_{i,j} mask_ij * mean((x_ij - x^_ij)^2)
    L_fourier = 1/P * sum_{i,j} mask_ij * mean(| |F(x_ij)| - |F(x^_ij)| |)
    L_recon   = (1 - lambda_f) * L_pixel + lambda_f * L_fourier

with P the number of masked patches and |F| the 2-D DFT amplitudes of the
p x p patch. The training objective blends it with the task loss and an
optional regularizer:

    L_final = (1 - lambda_recon) * (L_task + lambda_d * L_d) + lambda_recon * L_recon
"""

import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from mci_mae.numerics import dft_amplitude


class LossError(Exception):
    """
    Parent class for errors raised while computing losses.
    """

    pass


class NoMaskedPatchesWarning(UserWarning):
    """
    Emitted when a reconstruction loss is asked for with nothing masked.
    """

    pass


@dataclass
class LossWeights:
    lambda_f: float = 0.01
    lambda_recon: float = 0.99
    lambda_d: float = 0.001
    regularizer: str = "none"

    def __post_init__(self):
        for name in ("lambda_f", "lambda_recon"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise LossError(f"{name} must be in [0, 1], got {value}")
        if self.lambda_d < 0:
            raise LossError(f"lambda_d must be >= 0, got {self.lambda_d}")
        if self.regularizer not in REGULARIZERS:
            raise LossError(
                f"Unknown regularizer '{self.regularizer}'; available: {', '.join(REGULARIZERS)}"
            )


@dataclass
class LossBreakdown:
    L_pixel: float
    L_fourier: float
    L_recon: float
    L_task: float
    L_d: float
    L_final: float
    P: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_shapes(targets: torch.Tensor, preds: torch.Tensor, mask: torch.Tensor) -> None:
    if targets.shape != preds.shape:
        raise LossError(
            f"Targets {tuple(targets.shape)} and predictions {tuple(preds.shape)} differ in shape"
        )
    if tuple(mask.shape) != tuple(targets.shape[:-1]):
        raise LossError(
            f"Mask {tuple(mask.shape)} does not match the patch grid {tuple(targets.shape[:-1])}"
        )


def _as_mask(plan) -> torch.Tensor:
    # accepts a MaskPlan or a raw boolean tensor of shape (..., n, c)
    return getattr(plan, "mask", plan).to(torch.bool)


def _masked_mean(per_patch: torch.Tensor, mask: torch.Tensor, name: str) -> torch.Tensor:
    count = int(mask.sum())
    if count == 0:
        warnings.warn(
            f"{name}: no masked patches, loss defined as 0", NoMaskedPatchesWarning
        )
        return per_patch.sum() * 0.0

    kept = torch.where(mask, per_patch, torch.zeros_like(per_patch))
    return kept.sum() / count


def pixel_loss(targets: torch.Tensor, preds: torch.Tensor, plan) -> torch.Tensor:
    """
    Mean over masked patches of the per-patch mean squared error.

    Args:
        targets, preds: (..., n, c, p*p) patch pixels.
        plan: MaskPlan or (..., n, c) boolean mask, True where masked.
    """
    mask = _as_mask(plan)
    _check_shapes(targets, preds, mask)
    per_patch = (targets - preds).pow(2).mean(dim=-1)
    return _masked_mean(per_patch, mask, "pixel_loss")


def fourier_loss(targets: torch.Tensor, preds: torch.Tensor, plan) -> torch.Tensor:
    """
    Mean over masked patches of the mean absolute difference between 2-D DFT
    amplitude spectra (unnormalized DFT, p*p bins).
    """
    mask = _as_mask(plan)
    _check_shapes(targets, preds, mask)
    p = int(round(targets.shape[-1] ** 0.5))
    if p * p != targets.shape[-1]:
        raise LossError(f"Patch length {targets.shape[-1]} is not a square")

    per_patch = (dft_amplitude(targets, p) - dft_amplitude(preds, p)).abs().mean(dim=-1)
    return _masked_mean(per_patch, mask, "fourier_loss")


def recon_loss(
    targets: torch.Tensor, preds: torch.Tensor, plan, w: LossWeights
) -> torch.Tensor:
    pixel = pixel_loss(targets, preds, plan)
    fourier = fourier_loss(targets, preds, plan)
    return (1.0 - w.lambda_f) * pixel + w.lambda_f * fourier


def final_loss(task, reg, recon, w: LossWeights):
    """
    (1 - lambda_recon) * (task + lambda_d * reg) + lambda_recon * recon; works
    on python floats and on tensors.
    """
    return (1.0 - w.lambda_recon) * (task + w.lambda_d * reg) + w.lambda_recon * recon


def task_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """
    Softmax cross-entropy; 'label' is a class index or a tensor of them.
    """
    labels = torch.as_tensor(label, dtype=torch.long)
    if logits.ndim == 1:
        logits = logits[None]
        labels = labels.reshape(1)

    num_classes = logits.shape[-1]
    if bool(((labels < 0) | (labels >= num_classes)).any()):
        raise LossError(f"Label out of range for {num_classes} classes: {labels.tolist()}")
    if not bool(torch.isfinite(logits).all()):
        raise LossError("Logits are not finite")

    return F.cross_entropy(logits, labels)


RegularizerHook = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def zero_regularizer(channel_tokens: torch.Tensor, patch_tokens: torch.Tensor) -> torch.Tensor:
    return channel_tokens.sum() * 0.0


def channel_cosine_regularizer(
    channel_tokens: torch.Tensor, patch_tokens: torch.Tensor
) -> torch.Tensor:
    """
    Mean pairwise cosine similarity between the channel tokens in use; lower
    means more diverse channel tokens.
    """
    c = channel_tokens.shape[0]
    if c < 2:
        return channel_tokens.sum() * 0.0

    normed = F.normalize(channel_tokens, dim=-1)
    sim = normed @ normed.t()
    off_diagonal = ~torch.eye(c, dtype=torch.bool)
    return sim[off_diagonal].mean()


REGULARIZERS: dict[str, RegularizerHook] = {
    "none": zero_regularizer,
    "channel_cosine": channel_cosine_regularizer,
}


def regularizer_hook(
    channel_tokens: torch.Tensor,
    patch_tokens: torch.Tensor,
    hook: Optional[RegularizerHook | str] = None,
) -> torch.Tensor:
    """
    Evaluates the regularizer term L_d. 'hook' is a callable receiving the
    channel tokens and the encoder patch outputs, or the name of a built-in
    one; the default returns 0.
    """
    if hook is None:
        hook = zero_regularizer
    elif isinstance(hook, str):
        hook = REGULARIZERS[hook]

    return hook(channel_tokens, patch_tokens)
