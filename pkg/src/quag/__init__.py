"""Query-centric audio-visual network: moment retrieval, moment segmentation
and step-captioning over per-episode feature files, trained multi-task with a
contrastive audio-visual alignment objective."""

from quag.tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "grad_check", "no_grad", "__version__"]
