"""fambav: cross-layer token fusion for a small bidirectional
selective state-space image classifier, with deterministic efficiency
analytics and a training/benchmark harness."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
