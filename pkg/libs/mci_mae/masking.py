"""
Dynamic channel-patch masking and the baseline masking strategies.

A MaskPlan is an (n, c) boolean matrix where True means the patch at spatial
position i of channel j is hidden from the encoder. Generators draw from a
counter-based Philox generator keyed by (seed, draw index), so any plan can be
regenerated from its seed trace, and batch elements can be drawn in parallel.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import torch


class MaskingError(Exception):
    """
    Parent class for errors raised while building mask plans.
    """

    pass


class MaskBranch(str, Enum):
    NONE = "NONE"
    PATCH_ONLY = "PATCH_ONLY"
    CHANNEL_ONLY = "CHANNEL_ONLY"
    COMBINED = "COMBINED"


class MaskStrategy(str, Enum):
    DCP = "DCP"
    RANDOM_PATCH_FIXED = "RANDOM_PATCH_FIXED"
    RANDOM_PATCH_DYNAMIC = "RANDOM_PATCH_DYNAMIC"
    CHANNEL_FIXED = "CHANNEL_FIXED"
    HCS_DYNAMIC = "HCS_DYNAMIC"
    CHANNEL_PLUS_PATCH_FIXED = "CHANNEL_PLUS_PATCH_FIXED"

    @classmethod
    def parse(cls, value) -> "MaskStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper().replace("-", "_"))
        except ValueError:
            raise MaskingError(f"Unknown mask strategy '{value}'")


@dataclass
class MaskConfig:
    """
    Masking hyperparameters.

    The two DCP configurations used in practice are "combination"
    (p_patch = p_channel = 0, r_p = 0.25), which always merges a patch mask and
    a channel mask, and "alternate" (p_patch = p_channel = 0.5, r_p = 0.75),
    which switches between the two per input.
    """

    strategy: MaskStrategy = MaskStrategy.DCP
    r_p: float = 0.75
    p_patch: float = 0.5
    p_channel: float = 0.5
    r_c: float = 0.5
    dynamic_ratios: tuple[float, ...] = (0.25, 0.5, 0.75)
    independent_spatial: bool = True
    seed: int = 0

    def __post_init__(self):
        self.strategy = MaskStrategy.parse(self.strategy)
        self.dynamic_ratios = tuple(float(r) for r in self.dynamic_ratios)
        if not 0.0 <= self.r_p < 1.0:
            raise MaskingError(f"Patch mask ratio r_p must be in [0, 1), got {self.r_p}")
        for name in ("p_patch", "p_channel"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise MaskingError(f"{name} must be in [0, 1], got {value}")
        if self.p_patch + self.p_channel > 1.0 + 1e-12:
            raise MaskingError(
                f"p_patch + p_channel must be <= 1, got {self.p_patch + self.p_channel}"
            )
        if not 0.0 <= self.r_c < 1.0:
            raise MaskingError(f"Channel mask ratio r_c must be in [0, 1), got {self.r_c}")
        if any(not 0.0 <= r < 1.0 for r in self.dynamic_ratios) or not self.dynamic_ratios:
            raise MaskingError(f"Dynamic ratios must be a non-empty subset of [0, 1): {self.dynamic_ratios}")

    @classmethod
    def dcp_combination(cls, **kwargs) -> "MaskConfig":
        values = {"r_p": 0.25, "p_patch": 0.0, "p_channel": 0.0, **kwargs}
        return cls(strategy=MaskStrategy.DCP, **values)

    @classmethod
    def dcp_alternate(cls, **kwargs) -> "MaskConfig":
        values = {"r_p": 0.75, "p_patch": 0.5, "p_channel": 0.5, **kwargs}
        return cls(strategy=MaskStrategy.DCP, **values)


@dataclass
class MaskPlan:
    """
    An (n, c) boolean mask plus where it came from. For COMBINED plans the two
    constituent masks are kept so the union can be verified.
    """

    mask: torch.Tensor
    branch: MaskBranch
    seed_trace: str = ""
    patch_component: Optional[torch.Tensor] = field(default=None, repr=False)
    channel_component: Optional[torch.Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        self.mask = self.mask.to(torch.bool)
        if self.mask.ndim != 2:
            raise MaskingError(f"Mask must be (n, c), got {tuple(self.mask.shape)}")
        if bool(self.mask.all()):
            raise MaskingError("A mask plan must leave at least one patch visible")
        if self.branch == MaskBranch.CHANNEL_ONLY:
            column_sums = self.mask.sum(dim=0)
            if not bool(((column_sums == 0) | (column_sums == self.n)).all()):
                raise MaskingError("Channel-only plans must mask whole channels")

    @property
    def n(self) -> int:
        return self.mask.shape[0]

    @property
    def c(self) -> int:
        return self.mask.shape[1]

    @property
    def masked_channels(self) -> frozenset[int]:
        full = self.mask.all(dim=0)
        return frozenset(int(j) for j in torch.nonzero(full).flatten().tolist())

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())

    @property
    def num_visible(self) -> int:
        return self.n * self.c - self.num_masked

    def token_mask(self) -> torch.Tensor:
        """
        The mask flattened to token order (channel-major), shape (n*c,).
        """
        return self.mask.t().reshape(-1)

    @classmethod
    def empty(cls, n: int, c: int) -> "MaskPlan":
        return cls(torch.zeros(n, c, dtype=torch.bool), MaskBranch.NONE, "none")


def mask_rng(seed: int, draw_index: int = 0) -> np.random.Generator:
    """
    Counter-based generator for one draw; independent streams per
    (seed, draw_index) pair.
    """
    sequence = np.random.SeedSequence([int(seed), int(draw_index)])
    return np.random.Generator(np.random.Philox(sequence))


def _trace(rng: np.random.Generator) -> str:
    state = rng.bit_generator.state
    return f"philox:{state['state']['key'].tolist()}:{state['state']['counter'].tolist()}"


def _patch_matrix(
    n: int, c: int, r_p: float, rng: np.random.Generator, independent_spatial: bool
) -> torch.Tensor:
    if not 0.0 <= r_p < 1.0:
        raise MaskingError(f"Patch mask ratio r_p must be in [0, 1), got {r_p}")

    num_masked = int(np.floor(n * r_p))
    mask = np.zeros((n, c), dtype=bool)
    if num_masked == 0:
        return torch.from_numpy(mask)

    if independent_spatial:
        for j in range(c):
            mask[rng.choice(n, size=num_masked, replace=False), j] = True
    else:
        mask[rng.choice(n, size=num_masked, replace=False), :] = True

    return torch.from_numpy(mask)


def _channel_matrix(n: int, c: int, k: int, rng: np.random.Generator) -> torch.Tensor:
    mask = np.zeros((n, c), dtype=bool)
    if k > 0:
        mask[:, rng.choice(c, size=k, replace=False)] = True
    return torch.from_numpy(mask)


def random_patch_mask(
    n: int, c: int, r_p: float, rng: np.random.Generator, independent_spatial: bool = True
) -> MaskPlan:
    """
    Masks exactly floor(n*r_p) uniformly chosen positions in every channel.
    Positions are drawn per channel when 'independent_spatial' is True,
    otherwise one set is drawn and duplicated across channels.
    """
    trace = _trace(rng)
    mask = _patch_matrix(n, c, r_p, rng, independent_spatial)
    return MaskPlan(mask, MaskBranch.PATCH_ONLY, trace)


def dynamic_channel_mask(n: int, c: int, rng: np.random.Generator) -> MaskPlan:
    """
    Masks k whole channels, k ~ U{0, ..., c-1}, the channels chosen uniformly.
    """
    if c < 1:
        raise MaskingError("At least one channel is required")

    trace = _trace(rng)
    k = int(rng.integers(0, c))
    return MaskPlan(_channel_matrix(n, c, k, rng), MaskBranch.CHANNEL_ONLY, trace)


def dcp_branch(s: float, cfg: MaskConfig) -> MaskBranch:
    """
    The three-case selection rule for a selection value s in [0, 1).
    """
    if s < cfg.p_patch:
        return MaskBranch.PATCH_ONLY
    if s < cfg.p_patch + cfg.p_channel:
        return MaskBranch.CHANNEL_ONLY
    return MaskBranch.COMBINED


def _combine(
    patch: MaskPlan, channel: MaskPlan, trace: str
) -> MaskPlan:
    union = patch.mask | channel.mask
    return MaskPlan(
        union,
        MaskBranch.COMBINED,
        trace,
        patch_component=patch.mask,
        channel_component=channel.mask,
    )


def dcp_mask(n: int, c: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    """
    Dynamic channel-patch masking: draws s ~ U(0, 1) and returns the patch
    mask, the channel mask, or their union depending on p_patch / p_channel.
    """
    if cfg.strategy != MaskStrategy.DCP:
        raise MaskingError(f"dcp_mask requires the DCP strategy, got {cfg.strategy.value}")

    trace = _trace(rng)
    branch = dcp_branch(float(rng.random()), cfg)

    if branch == MaskBranch.PATCH_ONLY:
        plan = random_patch_mask(n, c, cfg.r_p, rng, cfg.independent_spatial)
    elif branch == MaskBranch.CHANNEL_ONLY:
        plan = dynamic_channel_mask(n, c, rng)
    else:
        channel = dynamic_channel_mask(n, c, rng)
        patch = random_patch_mask(n, c, cfg.r_p, rng, cfg.independent_spatial)
        return _combine(patch, channel, trace)

    plan.seed_trace = trace
    return plan


def channel_fixed_mask(n: int, c: int, r_c: float, rng: np.random.Generator) -> MaskPlan:
    """
    Masks exactly floor(c*r_c) whole channels.
    """
    k = int(np.floor(c * r_c))
    if k >= c:
        raise MaskingError(f"r_c={r_c} would mask all {c} channels")
    trace = _trace(rng)
    return MaskPlan(_channel_matrix(n, c, k, rng), MaskBranch.CHANNEL_ONLY, trace)


def baseline_mask(n: int, c: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    """
    The non-DCP strategies used for comparison.
    """
    strategy = cfg.strategy
    if strategy == MaskStrategy.DCP:
        raise MaskingError("baseline_mask does not handle the DCP strategy; use dcp_mask")

    if strategy == MaskStrategy.RANDOM_PATCH_FIXED:
        return random_patch_mask(n, c, cfg.r_p, rng, cfg.independent_spatial)

    if strategy == MaskStrategy.RANDOM_PATCH_DYNAMIC:
        trace = _trace(rng)
        r_p = cfg.dynamic_ratios[int(rng.integers(0, len(cfg.dynamic_ratios)))]
        plan = random_patch_mask(n, c, r_p, rng, cfg.independent_spatial)
        plan.seed_trace = trace
        return plan

    if strategy == MaskStrategy.CHANNEL_FIXED:
        return channel_fixed_mask(n, c, cfg.r_c, rng)

    if strategy == MaskStrategy.HCS_DYNAMIC:
        return dynamic_channel_mask(n, c, rng)

    if strategy == MaskStrategy.CHANNEL_PLUS_PATCH_FIXED:
        trace = _trace(rng)
        channel = channel_fixed_mask(n, c, cfg.r_c, rng)
        patch = random_patch_mask(n, c, cfg.r_p, rng, cfg.independent_spatial)
        return _combine(patch, channel, trace)

    raise MaskingError(f"Unknown mask strategy '{strategy}'")


def make_mask(n: int, c: int, cfg: MaskConfig, rng: np.random.Generator) -> MaskPlan:
    if cfg.strategy == MaskStrategy.DCP:
        return dcp_mask(n, c, cfg, rng)
    return baseline_mask(n, c, cfg, rng)


def draw_plans(
    n: int, c: int, cfg: MaskConfig, first_draw: int, count: int
) -> list[MaskPlan]:
    """
    Draws 'count' plans with draw indices first_draw, first_draw+1, ...; one
    plan per image, so every input gets its own branch.
    """
    return [
        make_mask(n, c, cfg, mask_rng(cfg.seed, first_draw + i)) for i in range(count)
    ]
