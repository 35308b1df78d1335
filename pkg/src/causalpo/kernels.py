"""Backend selection for the hot loops.

The compiled extension ``causalpo._kernels`` is used when it was built;
otherwise the numpy implementations in ``causalpo._fallback`` are used.
``use_backend`` switches explicitly (tests and the benchmark use it), and
``CAUSALPO_BACKEND=python`` forces the fallback at import.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_NAMES = (
    "context_rows",
    "gather_sum",
    "accumulate_score",
    "sample_texts",
    "linear_score",
    "featurize_batch",
)

BACKEND = None


def available_backends():
    return ("cython", "python") if _compiled is not None else ("python",)


def use_backend(name):
    """Route all kernel calls to ``"cython"`` or ``"python"``."""
    global BACKEND
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        module = _compiled
    elif name == "python":
        module = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    for fn in _NAMES:
        globals()["_" + fn] = getattr(module, fn)
    BACKEND = name


use_backend(os.environ.get("CAUSALPO_BACKEND") or ("cython" if _compiled is not None else "python"))


def _ints(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _floats(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def context_rows(texts, vocab_size, order, offsets):
    return _context_rows(_ints(texts), int(vocab_size), int(order), _ints(offsets))


def gather_sum(table, rows, texts):
    return _gather_sum(_floats(table), _ints(rows), _ints(texts))


def accumulate_score(grad, probs, rows, texts, coef):
    """Add ``sum_i coef[i] * d log P(texts[i]) / d logits`` into ``grad`` in place."""
    if not (grad.flags.c_contiguous and grad.dtype == np.float64):
        raise ValueError("grad must be a C-contiguous float64 array")
    _accumulate_score(grad, _floats(probs), _ints(rows), _ints(texts), _floats(coef))


def sample_texts(cdf, u, order, offsets):
    return _sample_texts(_floats(cdf), _floats(u), int(order), _ints(offsets))


def linear_score(texts, weights, vocab_size, feature_order):
    return _linear_score(_ints(texts), _floats(weights), int(vocab_size), int(feature_order))


def featurize_batch(texts, vocab_size, feature_order):
    return _featurize_batch(_ints(texts), int(vocab_size), int(feature_order))
