"""Part-guided masked image modeling: mask sampling, losses and the CLI."""

from ._partmim import (
    ConfigError,
    FormatError,
    NumericalError,
    align_loss,
    grad_check_tiny,
    lr_at,
    normalize_targets,
    num_masked,
    parameter_count,
    part_patches,
    run_cli,
    sample_mask,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "NumericalError",
    "align_loss",
    "grad_check_tiny",
    "lr_at",
    "normalize_targets",
    "num_masked",
    "parameter_count",
    "part_patches",
    "run_cli",
    "sample_mask",
]
