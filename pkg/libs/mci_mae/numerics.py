"""
Tensor and differentiation contract used by the rest of the package.

All math runs on torch. This module checks at startup that the backend offers
every capability the model needs, fixes the Fourier-amplitude convention used
by the reconstruction loss, and provides a central-difference gradient checker
for verifying the losses in 64-bit mode.
"""

import math
from typing import Callable, Iterable

import torch
import torch.nn.functional as F

# 32-bit for training runs, 64-bit for gradient checks
TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64

REQUIRED_CAPABILITIES = (
    "matmul",
    "add",
    "mul",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "fft2_amplitude",
    "reverse_mode_grad",
)


class BackendConfigurationError(Exception):
    """
    Raised when the tensor backend lacks a capability the model relies on.
    """

    pass


class GradCheckFailure(Exception):
    """
    Raised by grad_check when the loss is not finite; the message names the
    offending parameter.
    """

    def __init__(self, parameter_path: str, message: str):
        super().__init__(f"{parameter_path}: {message}")
        self.parameter_path = parameter_path


def _capability_probes() -> dict[str, Callable[[], bool]]:
    return {
        "matmul": lambda: hasattr(torch, "matmul"),
        "add": lambda: hasattr(torch, "add"),
        "mul": lambda: hasattr(torch, "mul"),
        "softmax": lambda: hasattr(torch, "softmax"),
        "layer_norm": lambda: hasattr(F, "layer_norm"),
        "gelu": lambda: hasattr(F, "gelu"),
        "sigmoid": lambda: hasattr(torch, "sigmoid"),
        "fft2_amplitude": lambda: hasattr(torch, "fft") and hasattr(torch.fft, "fft2"),
        "reverse_mode_grad": lambda: hasattr(torch, "autograd")
        and hasattr(torch.autograd, "grad"),
    }


def required_ops() -> list[str]:
    """
    Returns the list of capabilities the backend provides, raising
    BackendConfigurationError if any required one is missing.
    """
    probes = _capability_probes()
    missing = [name for name in REQUIRED_CAPABILITIES if not probes[name]()]
    if missing:
        raise BackendConfigurationError(
            f"The torch backend is missing required capabilities: {', '.join(missing)}"
        )

    return list(REQUIRED_CAPABILITIES)


def dft_amplitude(patches: torch.Tensor, p: int) -> torch.Tensor:
    """
    Amplitudes of the 2-D discrete Fourier transform of flattened patches.

    Each trailing vector of p*p values is reshaped to p x p (row-major) and
    transformed with the unnormalized DFT; the complex modulus is returned,
    flattened back to p*p bins. A constant patch of value a therefore has
    amplitude a*p*p at the zero frequency and 0 elsewhere.

    Args:
        patches: tensor of shape (..., p*p).
        p: patch side length.

    Returns:
        Tensor of shape (..., p*p) with non-negative amplitudes.
    """
    if patches.shape[-1] != p * p:
        raise ValueError(
            f"Last dimension must be p*p={p * p}, got {patches.shape[-1]}"
        )

    grid = patches.reshape(*patches.shape[:-1], p, p)
    spectrum = torch.fft.fft2(grid, dim=(-2, -1), norm="backward")
    return spectrum.abs().reshape(*patches.shape[:-1], p * p)


def direct_dft_amplitude(patch: torch.Tensor, p: int) -> torch.Tensor:
    """
    Reference 2-D DFT amplitudes of a single flattened patch computed by direct
    double summation. Slow; used as an oracle in tests.
    """
    grid = patch.reshape(p, p).to(torch.float64)
    out = torch.zeros(p, p, dtype=torch.float64)
    for u in range(p):
        for v in range(p):
            re = 0.0
            im = 0.0
            for x in range(p):
                for y in range(p):
                    angle = -2.0 * math.pi * (u * x + v * y) / p
                    re += float(grid[x, y]) * math.cos(angle)
                    im += float(grid[x, y]) * math.sin(angle)
            out[u, v] = math.hypot(re, im)
    return out.reshape(p * p)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    epsilon: float = 1e-6,
    coords_per_param: int = 8,
    seed: int = 0,
    min_magnitude: float = 0.0,
) -> float:
    """
    Compares reverse-mode gradients with central differences.

    For every named parameter, 'coords_per_param' coordinates are sampled
    (all of them if the parameter is smaller) among those whose analytic
    gradient is at least 'min_magnitude' in absolute value, and the relative error
    |analytic - numeric| / (|numeric| + 1e-12) is computed. Parameters must be
    64-bit leaf tensors with requires_grad=True; 'loss_fn' takes no arguments
    and reads the parameters from its closure.

    Returns:
        The maximum relative error over all sampled coordinates.
    """
    if not (1e-6 <= epsilon <= 1e-4):
        raise ValueError(f"epsilon must be in [1e-6, 1e-4], got {epsilon}")

    named = list(params.items()) if isinstance(params, dict) else list(params)
    for name, tensor in named:
        if tensor.dtype != torch.float64:
            raise ValueError(f"grad_check requires 64-bit parameters, '{name}' is {tensor.dtype}")

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise GradCheckFailure(named[0][0] if named else "<none>", "loss is not finite")

    analytic = torch.autograd.grad(
        loss, [t for _, t in named], allow_unused=True
    )

    gen = torch.Generator().manual_seed(seed)
    max_error = 0.0

    with torch.no_grad():
        for (name, tensor), grad in zip(named, analytic):
            if grad is None:
                grad = torch.zeros_like(tensor)

            flat = tensor.view(-1)
            flat_grad = grad.reshape(-1)
            candidates = torch.nonzero(flat_grad.abs() >= min_magnitude).flatten()
            if candidates.numel() <= coords_per_param:
                coords = candidates
            else:
                pick = torch.randperm(candidates.numel(), generator=gen)[:coords_per_param]
                coords = candidates[pick]

            for idx in coords.tolist():
                original = flat[idx].item()

                flat[idx] = original + epsilon
                loss_plus = loss_fn()
                flat[idx] = original - epsilon
                loss_minus = loss_fn()
                flat[idx] = original

                if not (torch.isfinite(loss_plus) and torch.isfinite(loss_minus)):
                    raise GradCheckFailure(
                        f"{name}[{idx}]", "loss is not finite under perturbation"
                    )

                numeric = (loss_plus.item() - loss_minus.item()) / (2.0 * epsilon)
                error = abs(flat_grad[idx].item() - numeric) / (abs(numeric) + 1e-12)
                max_error = max(max_error, error)

    return max_error
