"""Detection and recovery of adversarial patches from localized first-layer features.

Modules:
    tensor_net   small CNN forward/backward in numpy
    attack       patch training, placement and the activation-penalized loss
    lisf         important-neuron maps, window search, cluster statistics
    occlude      occluding test and monopolist voting
    region       affected-region tracing and bit-exact masked recomputation
    flow         block-matching flow and warping
    pipeline     AO / PO video pipelines with key-frame amortization
    costmodel    roofline latency / energy model of the accelerator
    scenario     synthetic scenes and clips; victim in ``victim``
"""
from .tensor_net import Network, forward, predict

__all__ = ["Network", "forward", "predict"]
__version__ = "0.1.0"
