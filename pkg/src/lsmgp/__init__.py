"""Multi-class Gaussian process classification with the logistic-softmax likelihood.

Conditionally conjugate augmentation gives closed-form variational updates
(:mod:`lsmgp.cavi`) and an exact Gibbs sampler (:mod:`lsmgp.gibbs`).
"""

from .kernel import ConditioningError, KernelConfig
from .likelihood import classify, logistic_softmax, predict_proba
from .sparse import SparseGPState
from .cavi import FitResult, TrainConfig, fit, fit_extreme
from .data import DataError, LabeledDataset, gen_toy, load_libsvm

__version__ = "0.1.0"

__all__ = [
    "ConditioningError",
    "DataError",
    "FitResult",
    "KernelConfig",
    "LabeledDataset",
    "SparseGPState",
    "TrainConfig",
    "classify",
    "fit",
    "fit_extreme",
    "gen_toy",
    "load_libsvm",
    "logistic_softmax",
    "predict_proba",
]
