"""
Command-line entry point: mci-mae <subcommand> [options].

Every subcommand accepts --config (YAML or JSON experiment file), repeated
--set key.path=value overrides and --json for machine-readable output on
stdout.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from mci_mae import env_vars
from mci_mae.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mci_mae.config import ConfigException, ExperimentConfig
from mci_mae.data import (
    ChannelStats,
    DataError,
    SyntheticSplits,
    compute_channel_stats,
    generate,
    rule_accuracy,
    save_mcif,
)
from mci_mae.diagnostics import (
    check_loss_gradients,
    export_attention,
    export_reconstruction,
    mask_statistics,
    reconstruct,
)
from mci_mae.harness import (
    EvalReport,
    FinetuneError,
    TrainingDivergedError,
    evaluate,
    finetune_channel_tokens,
    leave_k_out_sweep,
    reconstruction_error,
    train,
)
from mci_mae.decoder import DecoderError
from mci_mae.encoder import EncoderError
from mci_mae.fusion import FusionError
from mci_mae.losses import LossError
from mci_mae.masking import MaskConfig, MaskingError, make_mask, mask_rng
from mci_mae.models import build_model
from mci_mae.numerics import BackendConfigurationError, required_ops
from mci_mae.tokenizer import TokenizerError
from mci_mae.utils import configure_torch, ensure_dir

CHECKPOINT_NAME = "checkpoint.mcimae"
GRAD_CHECK_TOLERANCE = 1e-4

# errors reported as a one-line message and exit code 1
KNOWN_ERRORS = (
    ConfigException,
    CheckpointError,
    DataError,
    MaskingError,
    TokenizerError,
    EncoderError,
    DecoderError,
    FusionError,
    LossError,
    BackendConfigurationError,
    FinetuneError,
    TrainingDivergedError,
    ValueError,
    FileNotFoundError,
)


def parse_channels(text: str) -> tuple[int, ...]:
    """
    >>> parse_channels("0,2")
    (0, 2)
    """
    try:
        return tuple(int(c) for c in text.split(",") if c.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{text}' is not a comma-separated list of channel ids")


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True), flush=True)
    else:
        print(text, flush=True)


def _load_config(args, extra: Sequence[str] = ()) -> ExperimentConfig:
    return ExperimentConfig(args.config, list(args.set) + list(extra))


def _output_dir(args, config: Optional[ExperimentConfig] = None) -> Path:
    if args.output_dir is not None:
        out = args.output_dir
    elif config is not None:
        out = config.output_dir
    else:
        out = os.environ.get(env_vars.OUTPUT_DIR, "").strip() or "."
    return Path(ensure_dir(out))


def _checkpoint_path(args) -> Path:
    if args.checkpoint is not None:
        return Path(args.checkpoint)
    return _output_dir(args) / CHECKPOINT_NAME


def _normalized_splits(config: ExperimentConfig, stats: Optional[ChannelStats] = None):
    splits = generate(config.data)
    if stats is None:
        stats = compute_channel_stats(splits.train)
    normalized = SyntheticSplits(
        train=stats.normalize(splits.train),
        val=stats.normalize(splits.val),
        test=stats.normalize(splits.test),
    )
    return normalized, stats


def cmd_synth_data(args) -> int:
    config = _load_config(args)
    spec = config.data
    splits = generate(spec)
    out = _output_dir(args, config)

    written = 0
    if not args.no_files:
        for name in ("train", "val", "test"):
            split = getattr(splits, name)
            folder = Path(ensure_dir(out / "data" / name))
            for i in range(len(split)):
                sample = split[i]
                save_mcif(folder / f"{i:05d}.mcif", sample.image, sample.label)
                written += 1

    pair = spec.pair
    singles = {
        str(cid): rule_accuracy(splits.train, (cid,), spec.num_classes)
        for cid in spec.channel_ids
    }
    payload = {
        "config_hash": config.hash,
        "files_written": written,
        "sizes": {"train": spec.train, "val": spec.val, "test": spec.test},
        "pair_oracle_accuracy": rule_accuracy(splits.train, pair, spec.num_classes),
        "single_channel_oracle_accuracy": singles,
    }
    _emit(
        args,
        payload,
        f"wrote {written} MCIF files under {out / 'data'}; pair oracle "
        f"{payload['pair_oracle_accuracy']:.3f}, best single channel {max(singles.values()):.3f}",
    )
    return 0


def cmd_train(args) -> int:
    extra = [f"train.seed={args.seed}"] if args.seed is not None else []
    config = _load_config(args, extra)
    configure_torch(config.train.num_threads)
    out = _output_dir(args, config)

    splits, stats = _normalized_splits(config)
    model = build_model(config.model, config.data.channel_ids, config.train.seed)

    if not args.json:
        print(f"Training {config.model.preset} model, config hash {config.hash}", flush=True)
    result = train(
        config.train, splits.train, model, log_file=out / "train_log.jsonl", verbose=not args.json
    )

    val_accuracy = evaluate(result.params, splits.val)
    ckpt_path = out / CHECKPOINT_NAME
    save_checkpoint(
        ckpt_path,
        Checkpoint(
            model=result.params,
            config=config,
            channel_ids=config.data.channel_ids,
            channel_stats=stats,
            metadata={"steps": len(result.log.records)},
        ),
    )

    report = EvalReport(
        config.hash,
        loss_curves={key: result.log.values(key) for key in ("L_final", "L_task", "L_recon")},
    )
    report.add_row("full", config.data.channel_ids, val_accuracy)
    with open(out / "train_report.json", "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)

    final = result.log.records[-1] if result.log.records else {}
    _emit(
        args,
        {
            "checkpoint": str(ckpt_path),
            "config_hash": config.hash,
            "steps": len(result.log.records),
            "final": final,
            "val_accuracy": val_accuracy,
        },
        f"saved {ckpt_path}; val accuracy {val_accuracy:.4f}",
    )
    return 0


def _load_for_eval(args):
    ckpt = load_checkpoint(_checkpoint_path(args))
    configure_torch(ckpt.config.train.num_threads)
    splits, _ = _normalized_splits(ckpt.config, ckpt.channel_stats)
    return ckpt, getattr(splits, args.split)


def cmd_eval(args) -> int:
    ckpt, dataset = _load_for_eval(args)
    subset = args.channels if args.channels is not None else dataset.channel_ids
    accuracy = evaluate(ckpt.model, dataset, subset)

    setting = "full" if set(subset) == set(dataset.channel_ids) else "partial"
    report = EvalReport(ckpt.config.hash)
    report.add_row(setting, subset, accuracy, len(dataset.channel_ids) - len(subset))
    report.write_csv(_output_dir(args) / "eval_report.csv")

    _emit(
        args,
        {"accuracy": accuracy, "channel_ids": list(subset), "split": args.split, **report.to_dict()},
        f"{setting} accuracy on channels {list(subset)} ({args.split}): {accuracy:.4f}",
    )
    return 0


def cmd_sweep(args) -> int:
    ckpt, dataset = _load_for_eval(args)
    c = len(dataset.channel_ids)
    ks = [args.k] if args.k is not None else list(range(1, c))

    report = EvalReport(ckpt.config.hash)
    report.add_row("full", dataset.channel_ids, evaluate(ckpt.model, dataset))
    lines = []
    for k in ks:
        sweep = leave_k_out_sweep(ckpt.model, dataset, k)
        report.add_sweep(sweep)
        lines.append(f"k={k}: {len(sweep.rows)} subsets, mean {sweep.mean:.4f} std {sweep.std:.4f}")

    csv_path = _output_dir(args) / "sweep_report.csv"
    report.write_csv(csv_path)
    _emit(args, report.to_dict(), "\n".join(lines + [f"wrote {csv_path}"]))
    return 0


def cmd_mask_stats(args) -> int:
    extra = []
    if args.strategy is not None:
        extra.append(f"mask.strategy={args.strategy}")
    config = _load_config(args, extra)

    n = (config.data.h // config.data.p) * (config.data.w // config.data.p)
    n = args.n if args.n is not None else n
    c = args.c if args.c is not None else config.data.c
    stats = mask_statistics(n, c, config.mask, args.draws)

    if args.json:
        print(json.dumps(stats.to_dict(), indent=2, sort_keys=True), flush=True)
    else:
        stats.write_csv(sys.stdout)
    return 0


def cmd_attn_map(args) -> int:
    ckpt, dataset = _load_for_eval(args)
    export = export_attention(ckpt.model, dataset[args.index].image)

    out = _output_dir(args)
    export.write_csv(out / "attention.csv")
    export.plot(out / "attention.png")

    report = EvalReport(ckpt.config.hash, attention={f"{args.split}_{args.index}": export.matrix.tolist()})
    preferred = export.preferred_memory
    lines = [f"channel {cid} -> mem_{m}" for cid, m in preferred.items()]
    lines.append(f"wrote {out / 'attention.csv'} and {out / 'attention.png'}")
    _emit(
        args,
        {
            "columns": export.columns,
            "channel_ids": list(export.channel_ids),
            "preferred_memory_tokens": {str(cid): m for cid, m in preferred.items()},
            **report.to_dict(),
        },
        "\n".join(lines),
    )
    return 0


def cmd_recon_dump(args) -> int:
    ckpt, dataset = _load_for_eval(args)
    image = dataset[args.index].image
    cfg = ckpt.config

    n = cfg.model.patch.n
    plan = make_mask(n, image.c, cfg.mask, mask_rng(cfg.mask.seed, args.draw))
    out_recon = reconstruct(ckpt.model, image, plan)

    out = _output_dir(args)
    export_reconstruction(image, out_recon, out / "recon.png", out / "recon.csv")
    _emit(
        args,
        {"branch": plan.branch.value, "masked": plan.num_masked, "seed_trace": plan.seed_trace},
        f"{plan.branch.value} plan, {plan.num_masked} masked patches; wrote {out / 'recon.png'}",
    )
    return 0


def cmd_finetune_channels(args) -> int:
    ckpt = load_checkpoint(_checkpoint_path(args))
    configure_torch(ckpt.config.train.num_threads)
    splits, _ = _normalized_splits(ckpt.config, ckpt.channel_stats)

    ids = list(splits.train.channel_ids)
    if args.channel not in ids:
        raise ValueError(f"Channel {args.channel} is not a channel of the dataset {ids}")
    if args.as_id in ids:
        raise ValueError(f"Channel id {args.as_id} is already used by the dataset {ids}")
    ids[ids.index(args.channel)] = args.as_id

    images = splits.train.subset(list(range(min(args.images, len(splits.train))))).with_channel_ids(ids)
    heldout = splits.test.with_channel_ids(ids)
    mask_cfg = MaskConfig.dcp_alternate(seed=args.seed)

    kwargs = dict(mask_cfg=mask_cfg, weights=ckpt.config.loss, lr=args.lr, seed=args.seed)
    before = finetune_channel_tokens(ckpt.model, images, 0, **kwargs)
    after = finetune_channel_tokens(ckpt.model, images, args.steps, verbose=not args.json, **kwargs)

    loss_before = reconstruction_error(before.params, heldout, mask_cfg, ckpt.config.loss)
    loss_after = reconstruction_error(after.params, heldout, mask_cfg, ckpt.config.loss)

    out_path = _output_dir(args) / "finetuned.mcimae"
    save_checkpoint(
        out_path,
        Checkpoint(
            model=after.params,
            config=ckpt.config,
            channel_ids=tuple(sorted(set(ckpt.channel_ids) | set(after.novel_channels))),
            channel_stats=ChannelStats(
                mean={**ckpt.channel_stats.mean, args.as_id: ckpt.channel_stats.mean[args.channel]},
                std={**ckpt.channel_stats.std, args.as_id: ckpt.channel_stats.std[args.channel]},
            )
            if ckpt.channel_stats
            else None,
            metadata={**ckpt.metadata, "finetune_steps": args.steps},
        ),
    )

    _emit(
        args,
        {
            "novel_channels": list(after.novel_channels),
            "heldout_recon_before": loss_before,
            "heldout_recon_after": loss_after,
            "checkpoint": str(out_path),
        },
        f"held-out L_recon {loss_before:.4f} -> {loss_after:.4f}; saved {out_path}",
    )
    return 0


def cmd_grad_check(args) -> int:
    configure_torch(1)
    errors = check_loss_gradients(seed=args.seed)
    ok = all(e <= GRAD_CHECK_TOLERANCE for e in errors.values())
    _emit(
        args,
        {"max_relative_error": errors, "tolerance": GRAD_CHECK_TOLERANCE, "passed": ok},
        "\n".join(f"{name}: {err:.3e}" for name, err in errors.items()),
    )
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment file (YAML or JSON)")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set train.epochs=5",
    )
    common.add_argument("--json", action="store_true", help="print JSON on stdout")
    common.add_argument("--output-dir", help="where outputs are written")

    evaluated = argparse.ArgumentParser(add_help=False)
    evaluated.add_argument("--checkpoint", help=f"defaults to <output-dir>/{CHECKPOINT_NAME}")
    evaluated.add_argument("--split", choices=["train", "val", "test"], default="test")

    parser = argparse.ArgumentParser(
        prog="mci-mae", description="Multi-channel masked autoencoder experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--no-files", action="store_true", help="only report oracle accuracies")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, evaluated], help="accuracy on a channel subset")
    p.add_argument("--channels", type=parse_channels, help="comma-separated channel ids")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, evaluated], help="leave-k-out evaluation")
    p.add_argument("--k", type=int, help="channels left out (default: every k)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mask-stats", parents=[common], help="statistics of the mask sampler")
    p.add_argument("--strategy", help="mask strategy, e.g. dcp or random_patch_fixed")
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--n", type=int, help="patch positions (default: from the data section)")
    p.add_argument("--c", type=int, help="channels (default: from the data section)")
    p.set_defaults(func=cmd_mask_stats)

    p = sub.add_parser("attn-map", parents=[common, evaluated], help="export attention mass")
    p.add_argument("--index", type=int, default=0, help="sample index in the split")
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("recon-dump", parents=[common, evaluated], help="export a reconstruction")
    p.add_argument("--index", type=int, default=0, help="sample index in the split")
    p.add_argument("--draw", type=int, default=0, help="mask draw index")
    p.set_defaults(func=cmd_recon_dump)

    p = sub.add_parser(
        "finetune-channels", parents=[common, evaluated], help="learn tokens for a novel channel"
    )
    p.add_argument("--channel", type=int, required=True, help="dataset channel to present as new")
    p.add_argument("--as-id", type=int, required=True, help="the unseen channel id to give it")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--images", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune_channels)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference loss check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed the usage text
        return e.code if isinstance(e.code, int) else 2

    try:
        required_ops()
        return args.func(args)
    except KNOWN_ERRORS as e:
        print(f"ERROR: {e}", file=sys.stderr, flush=True)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
