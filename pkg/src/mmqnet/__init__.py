"""Masked-query transformer for emotion recognition from incomplete
multi-modal physiological signals, with a synthetic benchmark harness.

Subpackages: dsp (feature pipeline), synth (data generation), autodiff
(tensor engine), network (the transformer), losses (three-term objective),
training (Adam loop), evaluation (sweeps/ablations), verify (gradient
suites), cli (command line).
"""

__version__ = "0.1.0"

from .losses import LossWeights
from .network import Model, ModelConfig
from .synth import GenConfig
from .training import TrainConfig

__all__ = ["GenConfig", "LossWeights", "Model", "ModelConfig", "TrainConfig", "__version__"]
