"""Shared-basis sparse compression of MLP stacks."""

from ._core import (
    FormatError,
    InfeasibleBudget,
    ShapeError,
    compress_toy,
    forward,
    gen_toy,
    gmp_target_sparsity,
    group_layout,
    mac_estimate,
    required_rank,
    sparsity_sweep,
    storage_fraction,
    topk_mask_global,
    topk_mask_local,
    truncated_svd,
    validate_report,
)

__all__ = [
    "FormatError",
    "InfeasibleBudget",
    "ShapeError",
    "compress_toy",
    "forward",
    "gen_toy",
    "gmp_target_sparsity",
    "group_layout",
    "mac_estimate",
    "required_rank",
    "sparsity_sweep",
    "storage_fraction",
    "topk_mask_global",
    "topk_mask_local",
    "truncated_svd",
    "validate_report",
]
