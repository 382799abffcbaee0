"""
Implements reading an experiment description from a YAML (or JSON) file, via
the class ExperimentConfig.

The file has five optional top-level sections:

    model:  preset name plus explicit overrides of the preset
    mask:   MaskConfig fields
    loss:   LossWeights fields
    train:  TrainConfig fields
    data:   SynthSpec fields

Values are resolved in this order, later sources winning: built-in defaults,
the model preset, the config file, command-line overrides ("train.seed=7"),
and finally the environment variables documented in env_vars.py.
"""

import copy
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import yaml

from mci_mae import env_vars
from mci_mae.data import DataError, SynthSpec
from mci_mae.decoder import DecoderConfig
from mci_mae.encoder import EncoderConfig
from mci_mae.fusion import FusionError
from mci_mae.losses import LossError, LossWeights
from mci_mae.masking import MaskConfig, MaskingError
from mci_mae.models import PRESETS, ModelConfig
from mci_mae.tokenizer import PatchConfig, TokenizerError
from mci_mae.utils import config_hash, get_obj_path, parse_override, set_obj_path

SECTIONS = ("model", "mask", "loss", "train", "data")


class ConfigException(Exception):
    """
    Parent class for exceptions raised by ExperimentConfig's loading process.
    """

    pass


@dataclass
class TrainConfig:
    """
    Optimization settings. The learning rate warms up linearly over
    'warmup_epochs' and then follows a cosine decay down to 'min_lr'.
    'max_steps' caps the number of optimizer steps (None trains for
    'epochs' full passes).
    """

    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 4e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 3
    weight_decay: float = 0.04
    seed: int = 0
    num_threads: int = 1
    max_steps: Optional[int] = None
    mask: MaskConfig = field(default_factory=MaskConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    preset: str = "toy"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigException(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigException(
                f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs} for {self.epochs} epochs"
            )
        if self.batch_size < 1:
            raise ConfigException(f"batch_size must be >= 1, got {self.batch_size}")
        if self.peak_lr <= 0 or self.min_lr < 0 or self.min_lr > self.peak_lr:
            raise ConfigException(
                f"Learning rates must satisfy 0 <= min_lr <= peak_lr, 0 < peak_lr; got {self.min_lr}, {self.peak_lr}"
            )
        if self.weight_decay < 0:
            raise ConfigException(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.num_threads < 1:
            raise ConfigException(f"num_threads must be >= 1, got {self.num_threads}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigException(f"max_steps must be >= 0, got {self.max_steps}")


def _merge(base: dict, update: dict) -> dict:
    """
    Recursively merges 'update' into a copy of 'base'.

    >>> _merge({'a': {'b': 1, 'c': 2}}, {'a': {'c': 3}})
    {'a': {'b': 1, 'c': 3}}
    """
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ExperimentConfig:
    """
    Loads an experiment from 'config_file' (YAML or JSON). A missing file, or
    no file at all, gives the defaults.

    After loading, the resolved sections are available as 'model' (ModelConfig),
    'mask' (MaskConfig), 'loss' (LossWeights), 'train' (TrainConfig) and 'data'
    (SynthSpec); 'hash' identifies the resolved experiment.
    """

    def __init__(
        self,
        config_file: Optional[str | Path] = None,
        overrides: Iterable[str] = (),
        use_env: bool = True,
    ) -> None:
        self.config_file = Path(config_file) if config_file is not None else None
        self.output_dir = "."

        raw = self._load_config()
        for text in overrides:
            try:
                path, value = parse_override(text)
            except ValueError as e:
                raise ConfigException(str(e))
            if path[0] not in SECTIONS:
                raise ConfigException(
                    f"Override '{text}' does not start with one of: {', '.join(SECTIONS)}"
                )
            set_obj_path(raw, path, value)

        if use_env:
            self._apply_env(raw)

        self.raw = raw
        self._build()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """
        Rebuilds a configuration from a resolved dictionary (see to_dict);
        environment variables are not consulted.
        """
        config = cls.__new__(cls)
        config.config_file = None
        config.output_dir = "."
        config.raw = copy.deepcopy(data)
        config._build()
        return config

    def _load_config(self) -> dict:
        if self.config_file is None:
            return {}

        try:
            with open(self.config_file, "r") as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            print(f"WARNING: config file '{self.config_file}' not found, using defaults")
            return {}
        except yaml.YAMLError as e:
            raise ConfigException(f"Could not parse '{self.config_file}': {e}")

        if data is None:
            return {}
        if not isinstance(data, dict):
            raise ConfigException(
                f"The config file '{self.config_file}' must contain a mapping at the top level"
            )

        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigException(
                f"Unknown top-level sections {sorted(unknown)}; expected some of: {', '.join(SECTIONS)}"
            )
        for section in SECTIONS:
            if data.get(section) is not None and not isinstance(data[section], dict):
                raise ConfigException(f"Section '{section}' must be a mapping")

        return data

    def _apply_env(self, raw: dict) -> None:
        if env_vars.PRESET in os.environ:
            val = os.environ[env_vars.PRESET].strip()
            if val in PRESETS:
                set_obj_path(raw, ("model", "preset"), val)
                print(f"Using model preset from environment variable '{env_vars.PRESET}'")

        if env_vars.SEED in os.environ:
            try:
                set_obj_path(raw, ("train", "seed"), int(os.environ[env_vars.SEED]))
                print(f"Using seed from environment variable '{env_vars.SEED}'")
            except ValueError:
                # if it is not an int, we ignore it
                pass

        if env_vars.EPOCHS in os.environ:
            try:
                set_obj_path(raw, ("train", "epochs"), int(os.environ[env_vars.EPOCHS]))
                print(f"Using epochs from environment variable '{env_vars.EPOCHS}'")
            except ValueError:
                pass

        if env_vars.NUM_THREADS in os.environ:
            try:
                set_obj_path(
                    raw, ("train", "num_threads"), int(os.environ[env_vars.NUM_THREADS])
                )
                print(f"Using num_threads from environment variable '{env_vars.NUM_THREADS}'")
            except ValueError:
                pass

        if (d := os.environ.get(env_vars.OUTPUT_DIR, "").strip()) != "":
            self.output_dir = d
            print(f"Using output directory from environment variable '{env_vars.OUTPUT_DIR}'")

    def _build(self) -> None:
        raw = self.raw
        try:
            self.data = SynthSpec(**(raw.get("data") or {}))

            preset = get_obj_path(raw, ("model", "preset"), missing="toy")
            if preset not in PRESETS:
                raise ConfigException(
                    f"Unknown model preset '{preset}'; available: {', '.join(PRESETS)}"
                )
            model_raw = _merge(PRESETS[preset], raw.get("model") or {})

            # the data geometry fixes the patch size, image size and class count
            patch_raw = dict(model_raw.get("patch", {}))
            patch_raw.setdefault("p", self.data.p)
            patch_raw.setdefault("image_size", (self.data.h, self.data.w))
            patch = PatchConfig(**patch_raw)
            if patch.p != self.data.p or patch.image_size != (self.data.h, self.data.w):
                raise ConfigException(
                    "model.patch geometry must agree with the data section (p, h, w)"
                )

            self.model = ModelConfig(
                preset=preset,
                patch=patch,
                encoder=EncoderConfig(**model_raw.get("encoder", {})),
                decoder=DecoderConfig(**model_raw.get("decoder", {})),
                pool_mode=model_raw.get("pool_mode", "HYBRID"),
                num_classes=model_raw.get("num_classes", self.data.num_classes),
                fusion_mlp_ratio=model_raw.get("fusion_mlp_ratio", 1.0),
            )
            if self.model.num_classes != self.data.num_classes:
                raise ConfigException(
                    f"model.num_classes={self.model.num_classes} differs from data.num_classes={self.data.num_classes}"
                )
            if self.data.c > self.model.patch.n_max_channels:
                raise ConfigException(
                    f"{self.data.c} channels do not fit a channel table of {self.model.patch.n_max_channels} rows"
                )

            train_raw = dict(raw.get("train") or {})
            mask_raw = dict(raw.get("mask") or {})
            # masks are seeded from the training seed unless given explicitly
            mask_raw.setdefault("seed", train_raw.get("seed", 0))
            if "dynamic_ratios" in mask_raw:
                mask_raw["dynamic_ratios"] = tuple(mask_raw["dynamic_ratios"])

            self.mask = MaskConfig(**mask_raw)
            self.loss = LossWeights(**(raw.get("loss") or {}))
            self.train = TrainConfig(
                **train_raw, mask=self.mask, weights=self.loss, preset=preset
            )
        except TypeError as e:
            # unexpected keyword arguments in one of the sections
            raise ConfigException(f"Invalid configuration field: {e}")
        except (
            ValueError,
            DataError,
            LossError,
            MaskingError,
            TokenizerError,
            FusionError,
        ) as e:
            raise ConfigException(str(e))

    def to_dict(self) -> dict:
        """
        Fully resolved configuration; from_dict(to_dict()) rebuilds it.
        """
        train = asdict(self.train)
        for key in ("mask", "weights", "preset"):
            train.pop(key)

        model = asdict(self.model)
        model["pool_mode"] = self.model.pool_mode.value
        model["patch"]["image_size"] = list(self.model.patch.image_size)
        # data owns the geometry and the class count
        model["patch"].pop("p")
        model["patch"].pop("image_size")
        model.pop("num_classes")

        mask = asdict(self.mask)
        mask["strategy"] = self.mask.strategy.value
        mask["dynamic_ratios"] = list(self.mask.dynamic_ratios)

        data = asdict(self.data)
        data["pair"] = list(self.data.pair)

        return {
            "model": model,
            "mask": mask,
            "loss": asdict(self.loss),
            "train": train,
            "data": data,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())
