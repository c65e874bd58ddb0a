"""Few-shot meta-transfer learning on a numpy autodiff core.

A convolutional feature extractor is pre-trained on many classes and then
frozen; per-filter scaling and shifting parameters and a classifier
initialization are meta-learned over episodes, optionally with a hard-task
curriculum.
"""

from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "__version__"]
