"""Joint learning of image augmentations and a classifier by online bilevel optimization."""

from .tape import AutodiffError, GradMap, NonFiniteError, ShapeMismatch, Tape, TapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "AutodiffError",
    "GradMap",
    "NonFiniteError",
    "ShapeMismatch",
    "Tape",
    "TapeError",
    "Tensor",
]
