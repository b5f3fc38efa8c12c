"""Desk-scale infrared object detection engine.

Numpy-backed tensor autodiff, a MobileNetV4-style UIB backbone with a
three-scale anchor-free detection head, SlideLoss sample weighting, full
mAP evaluation, and analytic FLOP profiling.
"""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "MSYoloDetector", "__version__"]


def __getattr__(name):
    # estimator pulls in the whole stack; import it on demand
    if name == "MSYoloDetector":
        from .estimator import MSYoloDetector

        return MSYoloDetector
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
