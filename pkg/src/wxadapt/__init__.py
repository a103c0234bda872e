"""Weather-adaptive detection toolkit: synthetic weather corpora, physical
priors, and a small adversarially-adapted detector with its own autodiff
engine."""

__version__ = "0.1.0"

from .autograd import Tensor, Tape

__all__ = ["Tensor", "Tape", "__version__"]
