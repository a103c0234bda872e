"""Minimal reverse-mode autodiff engine with a finite-difference oracle."""

from .tensor import Tape, Tensor, active_tape, as_tensor
from . import ops
from .gradcheck import finite_diff_check, check_op, run_all, CHECKS

__all__ = [
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "ops",
    "finite_diff_check",
    "check_op",
    "run_all",
    "CHECKS",
]
