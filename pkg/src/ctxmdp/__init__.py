"""ctxmdp: context-augmented MDP simulation engine and experiment harness."""

__version__ = "0.1.0"

from .core import (
    AugmentedState,
    BudgetSignals,
    BudgetSpec,
    ContextSummary,
    ExogenousSignal,
    HistoryBuffer,
    MetaAction,
    SummaryEmbedding,
    Token,
    UpdateMode,
    augment,
    embed_summary,
)

__all__ = [
    "AugmentedState",
    "BudgetSignals",
    "BudgetSpec",
    "ContextSummary",
    "ExogenousSignal",
    "HistoryBuffer",
    "MetaAction",
    "SummaryEmbedding",
    "Token",
    "UpdateMode",
    "augment",
    "embed_summary",
    "__version__",
]
