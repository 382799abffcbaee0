"""
Training, evaluation protocols and novel-channel fine-tuning.
"""

import copy
import csv
import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.optim.lr_scheduler import LambdaLR

from mci_mae.config import ExperimentConfig, TrainConfig
from mci_mae.data import MultiChannelDataset, compute_channel_stats, generate
from mci_mae.losses import LossWeights, recon_loss
from mci_mae.masking import MaskConfig, draw_plans
from mci_mae.models import MultiChannelMAE, build_model, stack_plans
from mci_mae.numerics import TRAIN_DTYPE
from mci_mae.tokenizer import UnknownChannelError
from mci_mae.utils import configure_torch

# learned embedding tables, never decayed
NO_DECAY_TABLES = frozenset(
    {"pos_embed", "channel_tokens", "memory_tokens", "cls_token", "mask_token", "q_patch"}
)


class TrainingDivergedError(Exception):
    def __init__(self, step: int, value: float):
        super().__init__(f"Loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value


class FinetuneError(Exception):
    pass


@dataclass
class TrainLog:
    """
    One record per optimizer step: the LossBreakdown fields plus step, epoch,
    learning rate and the count of each mask branch drawn for the batch.
    """

    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def values(self, key: str) -> list:
        return [r[key] for r in self.records]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    params: MultiChannelMAE
    log: TrainLog


def decay_groups(model: nn.Module, weight_decay: float) -> list[dict]:
    """
    AdamW parameter groups: weight decay on weight matrices only, none on
    biases, normalization parameters, token tables and other 1-D vectors.
    """
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if (
            param.ndim < 2
            or leaf.endswith("bias")
            or leaf in NO_DECAY_TABLES
            or ".norm" in name
        ):
            no_decay.append(param)
        else:
            decay.append(param)

    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def lr_multiplier(step: int, warmup_steps: int, total_steps: int, peak_lr: float, min_lr: float) -> float:
    """
    Linear warmup to 1, then cosine decay to min_lr / peak_lr.

    >>> lr_multiplier(0, 10, 100, 1e-3, 1e-6)
    0.1
    """
    if step < warmup_steps:
        return (step + 1) / warmup_steps

    floor = min_lr / peak_lr
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    cfg: TrainConfig,
    dataset: MultiChannelDataset,
    params: MultiChannelMAE,
    log_file: Optional[str | Path] = None,
    verbose: bool = True,
) -> TrainResult:
    """
    Optimizes 'params' in place on 'dataset' and returns it with the step log.

    Every image gets its own mask plan, drawn with a global draw counter so a
    run is reproducible from cfg.seed alone. The task branch is skipped when
    lambda_recon == 1 and the decoder when lambda_recon == 0.
    """
    configure_torch(cfg.num_threads)
    weights = cfg.weights
    channel_ids = dataset.channel_ids
    n, c = params.cfg.patch.n, len(channel_ids)
    size = len(dataset)

    steps_per_epoch = math.ceil(size / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    optimizer = torch.optim.AdamW(
        decay_groups(params, cfg.weight_decay), lr=cfg.peak_lr, betas=(0.9, 0.999)
    )
    scheduler = LambdaLR(
        optimizer,
        lambda s: lr_multiplier(s, warmup_steps, total_steps, cfg.peak_lr, cfg.min_lr),
    )

    generator = torch.Generator().manual_seed(cfg.seed)
    with_task = weights.lambda_recon < 1.0
    with_recon = weights.lambda_recon > 0.0

    log = TrainLog()
    step = 0
    draw = 0

    params.train()
    for epoch in range(cfg.epochs):
        if step >= total_steps:
            break

        order = torch.randperm(size, generator=generator)
        for start in range(0, size, cfg.batch_size):
            if step >= total_steps:
                break

            index = order[start : start + cfg.batch_size]
            plans = draw_plans(n, c, cfg.mask, draw, len(index))
            draw += len(index)

            out = params(
                dataset.pixels[index].to(TRAIN_DTYPE),
                channel_ids,
                stack_plans(plans),
                with_task=with_task,
                with_recon=with_recon,
            )
            loss, breakdown = params.compute_losses(
                out, dataset.labels[index], weights, channel_ids
            )
            if not math.isfinite(breakdown.L_final):
                raise TrainingDivergedError(step, breakdown.L_final)

            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            if loss.requires_grad:
                loss.backward()
            optimizer.step()
            scheduler.step()

            branches = Counter(plan.branch.value for plan in plans)
            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    **breakdown.to_dict(),
                    "branches": dict(sorted(branches.items())),
                }
            )
            step += 1

        if verbose and log.records:
            last = log.records[-1]
            print(
                f"epoch {epoch}: step={last['step']} L_final={last['L_final']:.4f} "
                f"L_task={last['L_task']:.4f} L_recon={last['L_recon']:.4f} lr={last['lr']:.2e}",
                flush=True,
            )

    if log_file is not None:
        log.write_jsonl(log_file)

    return TrainResult(params, log)


def _check_subset(params: MultiChannelMAE, dataset: MultiChannelDataset, subset: Sequence[int]) -> tuple[int, ...]:
    subset = tuple(int(cid) for cid in subset)
    if len(subset) == 0:
        raise ValueError("The channel subset must not be empty")
    if len(set(subset)) != len(subset):
        raise ValueError(f"Channel subset has duplicates: {subset}")
    for cid in subset:
        if cid not in dataset.channel_ids:
            raise UnknownChannelError(cid)
    # raises UnknownChannelError for channels the model was not trained on
    params.tokenizer.channel_index(subset)
    return subset


def predict(
    params: MultiChannelMAE,
    dataset: MultiChannelDataset,
    channel_subset: Sequence[int],
    batch_size: int = 256,
) -> torch.Tensor:
    """
    Class predictions using only the channels in 'channel_subset'. Absent
    channels are not fed and no mask tokens stand in for them.
    """
    subset = _check_subset(params, dataset, channel_subset)
    data = dataset.select_channels(subset)

    predictions = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            pixels = data.pixels[start : start + batch_size]
            out = params(pixels, subset, with_recon=False)
            predictions.append(out.logits.argmax(dim=-1))

    return torch.cat(predictions)


def evaluate(
    params: MultiChannelMAE,
    dataset: MultiChannelDataset,
    channel_subset: Optional[Sequence[int]] = None,
    batch_size: int = 256,
) -> float:
    """
    Top-1 accuracy on 'dataset' using the channels in 'channel_subset' (all
    of the dataset's channels when None). Never modifies 'params'.
    """
    if channel_subset is None:
        channel_subset = dataset.channel_ids
    predictions = predict(params, dataset, channel_subset, batch_size)
    return float((predictions == dataset.labels).to(torch.float64).mean())


@dataclass
class SubsetRow:
    channel_ids: tuple[int, ...]
    left_out: tuple[int, ...]
    accuracy: float


@dataclass
class SweepResult:
    k: int
    rows: list[SubsetRow]

    @property
    def mean(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows]))

    @property
    def std(self) -> float:
        # spread across channel combinations
        return float(np.std([r.accuracy for r in self.rows]))


def leave_k_out_sweep(
    params: MultiChannelMAE, dataset: MultiChannelDataset, k: int, batch_size: int = 256
) -> SweepResult:
    """
    Evaluates every subset of c - k channels, in lexicographic order of the
    dataset's channel ids.
    """
    c = len(dataset.channel_ids)
    if not 1 <= k < c:
        raise ValueError(f"k must be in [1, {c - 1}], got {k}")

    rows = []
    for subset in combinations(dataset.channel_ids, c - k):
        left_out = tuple(cid for cid in dataset.channel_ids if cid not in subset)
        accuracy = evaluate(params, dataset, subset, batch_size)
        rows.append(SubsetRow(tuple(subset), left_out, accuracy))

    return SweepResult(k, rows)


@dataclass
class MaskingComparison:
    """
    Accuracies of one masking strategy, one entry per training seed.
    """

    full: list[float] = field(default_factory=list)
    partial: list[float] = field(default_factory=list)

    @property
    def full_mean(self) -> float:
        return float(np.mean(self.full))

    @property
    def partial_mean(self) -> float:
        return float(np.mean(self.partial))


def compare_masking(
    cfg: ExperimentConfig,
    strategies: dict[str, MaskConfig],
    seeds: Sequence[int],
    k: int = 1,
    verbose: bool = False,
) -> dict[str, MaskingComparison]:
    """
    Trains one model per strategy and seed, identical except for the mask
    configuration, and evaluates each on the test split with all channels
    ("full") and as the mean of the leave-k-out sweep ("partial").

    The dataset and its normalization come from cfg.data and are shared by
    every run; the seed drives model initialization, shuffling and masks.
    """
    splits = generate(cfg.data)
    stats = compute_channel_stats(splits.train)
    train_set, test_set = stats.normalize(splits.train), stats.normalize(splits.test)

    results = {name: MaskingComparison() for name in strategies}
    for name, mask_cfg in strategies.items():
        for seed in seeds:
            train_cfg = dataclasses.replace(
                cfg.train, seed=seed, mask=dataclasses.replace(mask_cfg, seed=seed)
            )
            model = build_model(cfg.model, train_set.channel_ids, seed=seed)
            train(train_cfg, train_set, model, verbose=False)
            model.eval()

            full = evaluate(model, test_set)
            partial = leave_k_out_sweep(model, test_set, k).mean
            results[name].full.append(full)
            results[name].partial.append(partial)
            if verbose:
                print(f"{name} seed={seed}: full={full:.4f} partial(k={k})={partial:.4f}", flush=True)

    return results


@dataclass
class EvalReport:
    """
    Accuracy table over channel subsets plus loss curves, attention exports
    and the hash of the experiment that produced the evaluated model.
    """

    config_hash: str
    rows: list[dict] = field(default_factory=list)
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    attention: dict[str, list[list[float]]] = field(default_factory=dict)

    def add_row(self, setting: str, channel_ids: Sequence[int], accuracy: float, k: int = 0) -> None:
        self.rows.append(
            {
                "setting": setting,
                "k": k,
                "channel_ids": " ".join(str(cid) for cid in channel_ids),
                "accuracy": accuracy,
            }
        )

    def add_sweep(self, sweep: SweepResult) -> None:
        for row in sweep.rows:
            self.add_row("partial", row.channel_ids, row.accuracy, sweep.k)
        self.rows.append(
            {
                "setting": "summary",
                "k": sweep.k,
                "channel_ids": "",
                "accuracy": sweep.mean,
                "std": sweep.std,
            }
        )

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "rows": self.rows,
            "loss_curves": self.loss_curves,
            "attention": self.attention,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(
                f,
                fieldnames=["config_hash", "setting", "k", "channel_ids", "accuracy", "std"],
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow({"config_hash": self.config_hash, "std": "", **row})


def reconstruction_error(
    params: MultiChannelMAE,
    dataset: MultiChannelDataset,
    mask_cfg: MaskConfig,
    weights: Optional[LossWeights] = None,
    channel_table: Optional[torch.Tensor] = None,
    first_draw: int = 0,
    batch_size: int = 64,
) -> float:
    """
    Mean L_recon over 'dataset' under masks drawn from 'mask_cfg'. The same
    'first_draw' gives the same masks, so two models can be compared.
    """
    weights = weights or LossWeights()
    n, c = params.cfg.patch.n, len(dataset.channel_ids)

    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            pixels = dataset.pixels[start : start + batch_size]
            plans = draw_plans(n, c, mask_cfg, first_draw + start, pixels.shape[0])
            out = params(
                pixels,
                dataset.channel_ids,
                stack_plans(plans),
                channel_table=channel_table,
                with_task=False,
            )
            loss = recon_loss(out.targets, out.predictions, out.mask, weights)
            total += float(loss) * pixels.shape[0]
            count += pixels.shape[0]

    return total / count


@dataclass
class FinetuneResult:
    params: MultiChannelMAE
    novel_channels: tuple[int, ...]
    initial_tokens: torch.Tensor
    losses: list[float]


def finetune_channel_tokens(
    params: MultiChannelMAE,
    images: MultiChannelDataset,
    steps: int,
    mask_cfg: Optional[MaskConfig] = None,
    weights: Optional[LossWeights] = None,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    verbose: bool = False,
) -> FinetuneResult:
    """
    Learns channel tokens for the channels of 'images' that 'params' has never
    seen, minimizing L_recon only. Returns a new model; 'params' is untouched
    and the new model differs from it only at the new channel-token rows.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")

    tokenizer = params.tokenizer
    table_size = tokenizer.cfg.n_max_channels
    novel = tuple(
        cid for cid in images.channel_ids
        if not (0 <= cid < table_size and bool(tokenizer.known_channels[cid]))
    )
    if not novel:
        raise FinetuneError(
            f"None of the channels {images.channel_ids} is new to the model"
        )

    mask_cfg = mask_cfg or MaskConfig.dcp_alternate(seed=seed)
    weights = weights or LossWeights()

    model = copy.deepcopy(params)
    model.tokenizer.register_channels(novel)
    rows = torch.as_tensor(novel, dtype=torch.long)

    generator = torch.Generator().manual_seed(seed)
    d = tokenizer.cfg.d
    initial = (torch.randn(len(novel), d, generator=generator) * 0.02).clamp(-0.04, 0.04)
    initial = initial.to(model.tokenizer.channel_tokens.dtype)

    base_table = model.tokenizer.channel_tokens.detach().clone()
    new_tokens = nn.Parameter(initial.clone())
    optimizer = torch.optim.AdamW([new_tokens], lr=lr, weight_decay=0.0)

    frozen = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)

    n, c = model.cfg.patch.n, len(images.channel_ids)
    size = len(images)
    losses = []
    try:
        for step in range(steps):
            start = (step * batch_size) % size
            index = torch.arange(start, start + batch_size) % size
            plans = draw_plans(n, c, mask_cfg, step * batch_size, len(index))

            table = base_table.index_put((rows,), new_tokens)
            out = model(
                images.pixels[index],
                images.channel_ids,
                stack_plans(plans),
                channel_table=table,
                with_task=False,
            )
            loss = recon_loss(out.targets, out.predictions, out.mask, weights)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, float(loss))

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

            if verbose and (step + 1) % 50 == 0:
                print(f"finetune step {step + 1}: L_recon={losses[-1]:.4f}", flush=True)
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)

    with torch.no_grad():
        model.tokenizer.channel_tokens[rows] = new_tokens.detach()

    return FinetuneResult(model, novel, initial, losses)
