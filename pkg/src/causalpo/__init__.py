"""Causal preference optimization of token-sequence policies from direct outcome data.

Submodules: ``textspace`` (texts and features), ``policy`` (tabular
autoregressive policies), ``simulator`` (populations, randomized experiments,
confounding), ``outcome_model`` (ridge g-hat), ``estimators`` (IPW, outcome-only
and doubly robust values), ``optimizer`` (CPO / DR-CPO / OO-RLHF training),
``evaluation`` (win rates, reward tables, Monte Carlo studies) and ``cli``.
"""
from .errors import CausalPOError
from .kernels import available_backends, use_backend

__version__ = "0.1.0"

__all__ = ["CausalPOError", "available_backends", "use_backend", "__version__"]
