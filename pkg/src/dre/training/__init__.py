"""Datasets, loss functionals and training strategies."""

from .dataset import TrajectoryDataset, generate_dataset, load_dataset, make_splits, save_dataset, split_counts, static_dataset
from .losses import (
    LossSpec,
    loss_autoencoder,
    loss_conservation,
    loss_dissipativity,
    loss_orthogonality,
    loss_residual,
    loss_semi,
)
from .trainer import (
    TrainConfig,
    TrainResult,
    build_autoencoder,
    fit_normalization,
    train_autoencoder,
    train_fully,
    train_semi,
    write_log,
)
