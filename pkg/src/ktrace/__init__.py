"""Learner-performance modeling pipeline.

Ingest interaction logs, extract causal sparse features, train baseline,
logistic, and sequence models, evaluate with learner-level AUC, and
explain the linear models with correlation-based local explanations.
"""

__version__ = "0.1.0"

from .errors import DataError, KtraceError, NumericError, UsageError

__all__ = ["DataError", "KtraceError", "NumericError", "UsageError", "__version__"]
