"""PAC-Bayes-regularized hyperparameter optimization toolkit."""

from . import bounds, diffcore, hyperopt, models, samplers

__version__ = "0.1.0"

__all__ = ["bounds", "diffcore", "hyperopt", "models", "samplers", "__version__"]
