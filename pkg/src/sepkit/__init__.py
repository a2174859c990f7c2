"""Protective (availability) perturbations crafted from the checkpoints of a
single training run, plus the small numpy engine, data containers, trainer
and diagnostics needed to evaluate them."""

from .budget import PerturbationBudget, check_budget, is_feasible, norm_stats, project
from .crafting import (METHODS, TargetPermutation, class_centers, craft, craft_random, craft_sep,
                       craft_sep_fa_vr, craft_single_model)
from .data import (LabeledDataset, PoisonManifest, SyntheticSpec, gen_synthetic, load_cifar_binary, load_idx,
                   load_poisoned, save_poisoned)
from .engine import ArchitectureSpec, ModelCheckpoint, cnn_small, mlp_small
from .errors import (BadMagicError, BudgetViolationError, ConfigError, CountMismatchError, DataError,
                     DigestMismatchError, NumericalError, SepkitError, ShapeError, TruncatedFileError)
from .training import CheckpointSet, TrainConfig, adversarial_train, evaluate, select_checkpoints, train

__version__ = "0.1.0"
