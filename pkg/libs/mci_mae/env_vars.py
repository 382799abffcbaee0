"""
This file contains environment variables names used by the mci-mae package.
They allow to override some parameters of an experiment configuration file
without editing it, which is handy when the same config is run by a CI job
or a batch script with different seeds.

Variables are read by ExperimentConfig (see config.py) after the config file
and any command-line overrides have been applied. Values that cannot be parsed
are ignored. For instance, to run the same training twice with two seeds:

    MCI_MAE_SEED=7 mci-mae train --config ci/experiment.yaml
    MCI_MAE_SEED=8 mci-mae train --config ci/experiment.yaml
"""

# Seed used for model initialization, data shuffling and mask sampling
# (train.seed in the config file)
SEED = "MCI_MAE_SEED"

# Number of CPU threads used by torch. The deterministic test contract is
# single-threaded, so the default is 1
NUM_THREADS = "MCI_MAE_NUM_THREADS"

# Number of training epochs (train.epochs)
EPOCHS = "MCI_MAE_EPOCHS"

# Model preset name: "toy", "gradcheck" or "vit-small" (model.preset). Explicit
# values under the 'model' section still take precedence over the preset
PRESET = "MCI_MAE_PRESET"

# Directory where checkpoints, training logs and exported reports are written
OUTPUT_DIR = "MCI_MAE_OUTPUT_DIR"
