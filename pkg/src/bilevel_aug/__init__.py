"""Online bilevel learning of data-augmentation transforms.

An augmenter network maps noise to bounded affine/color transformation
parameters and is trained on validation loss through a truncated
backpropagation hypergradient, while a small CNN classifier is trained on
the augmented images. Includes predefined-DA and RandAugment-style
baselines plus a synthetic shifted dataset harness.
"""

from .tensor import Tensor, Tape, grad, ShapeError, TapeError, NonFiniteError

__all__ = ["Tensor", "Tape", "grad", "ShapeError", "TapeError", "NonFiniteError"]

__version__ = "0.1.0"
