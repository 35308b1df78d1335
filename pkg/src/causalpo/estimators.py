"""Importance-weighted, outcome-model and doubly robust value estimators.

All density ratios are formed as ``exp(log P^f - log P^q)`` after any clipping
in log space; raw probability products are never formed.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingInput, NonFiniteWeight, SampleSplittingWarning, ZeroSupport
from .policy import MIN_LOGIT

# A conditional log-probability at or below this is a MIN_LOGIT entry, i.e. zero mass.
ZERO_LOG_FACTOR = MIN_LOGIT / 2

CSV_FIELDS = ("estimator", "value", "std_error", "n", "m", "stabilization")


@dataclass(frozen=True)
class WeightOptions:
    self_normalize: bool = False
    clip_max: float = None
    log_space: bool = True

    def __post_init__(self):
        if self.clip_max is not None and not self.clip_max > 0:
            raise ValueError("clip_max must be positive")
        if not self.log_space:
            raise ValueError("density ratios are always formed in log space")

    def describe(self):
        parts = []
        if self.clip_max is not None:
            parts.append(f"clip({self.clip_max:g})")
        if self.self_normalize:
            parts.append("self-normalized")
        return "+".join(parts) or "none"


@dataclass
class WeightedTerm:
    """One importance-weighted average: mean(weights * targets) over ``texts``.

    ``active`` marks weights that were not clipped (only those depend on the policy).
    """

    texts: np.ndarray
    weights: np.ndarray
    targets: np.ndarray
    active: np.ndarray

    @property
    def contributions(self):
        return self.weights * self.targets

    def __len__(self):
        return self.texts.shape[0]


@dataclass
class ValueEstimate:
    estimator: str
    value: float
    per_sample: np.ndarray
    std_error: float
    stabilization: str
    n: int = 0
    m: int = 0
    terms: tuple = field(default=(), repr=False)

    def csv_row(self):
        return {
            "estimator": self.estimator,
            "value": repr(float(self.value)),
            "std_error": repr(float(self.std_error)),
            "n": self.n,
            "m": self.m,
            "stabilization": self.stabilization,
        }


def stabilize(log_ratios, opts=WeightOptions()):
    """Clip (in log space), exponentiate, then optionally divide by the mean."""
    lr = np.asarray(log_ratios, dtype=np.float64)
    if opts.clip_max is not None:
        lr = np.minimum(lr, math.log(opts.clip_max))
    with np.errstate(over="ignore"):
        w = np.exp(lr)
        if opts.self_normalize:
            w = w / w.mean()
    return w


def _sd(x):
    return float(np.std(x, ddof=1)) if x.shape[0] > 1 else 0.0


def _weighted_term(policy, density, texts, targets, opts, what):
    zero = density.min_log_factor(texts) <= ZERO_LOG_FACTOR
    if np.any(zero):
        bad = texts[int(np.argmax(zero))].tolist()
        shown = bad if len(bad) <= 12 else bad[:12] + ["..."]
        raise ZeroSupport(f"{what} density is zero at text {shown}; overlap is violated")
    log_q = density.log_prob_batch(texts)
    log_ratio = policy.log_prob_batch(texts) - log_q
    w = stabilize(log_ratio, opts)
    if not np.all(np.isfinite(w)):
        raise NonFiniteWeight(f"{what} importance weights overflowed; consider clip_max")
    if opts.clip_max is None:
        active = np.ones(w.shape[0], dtype=bool)
    else:
        active = log_ratio < math.log(opts.clip_max)
    return WeightedTerm(texts, w, np.asarray(targets, dtype=np.float64), active)


def _randomization_density(ds, pR):
    if pR is not None:
        return pR
    if ds.provenance.randomized and ds.assignment is not None:
        return ds.assignment
    raise MissingInput("a randomization density is required for the importance-weighted term")


def v_ipw(policy, ds, pR=None, opts=WeightOptions()):
    """CPO value: (1/n) sum_i P^f(X_i)/P^R(X_i) * Y_i.

    ``pR`` defaults to the dataset's own assignment policy; pass an estimated
    density to use P-hat^R instead.
    """
    density = _randomization_density(ds, pR)
    term = _weighted_term(policy, density, ds.texts, ds.outcomes, opts, "randomization")
    contrib = term.contributions
    n = len(term)
    return ValueEstimate(
        "ipw", float(contrib.mean()), contrib, _sd(contrib) / math.sqrt(n),
        opts.describe(), n=n, terms=(term,),
    )


def v_out(policy, f0, ghat, m, rng, opts=WeightOptions()):
    """Outcome-model value: (1/m) sum_j P^f/P^{f0}(X~_j) * ghat(X~_j), X~_j ~ f0."""
    if m < 1:
        raise ValueError("m must be >= 1")
    texts = f0.sample(rng, m)
    term = _weighted_term(policy, f0, texts, ghat.predict(texts), opts, "reference")
    contrib = term.contributions
    return ValueEstimate(
        "out", float(contrib.mean()), contrib, _sd(contrib) / math.sqrt(m),
        opts.describe(), m=m, terms=(term,),
    )


def v_dr(policy, ds, pR, ghat, f0, m, rng, opts=WeightOptions()):
    """Doubly robust value: weighted residuals on ``ds`` plus the outcome-model term.

    The two sums use independent samples, so the standard error adds their
    variances.
    """
    if ghat.train_fingerprint and ghat.train_fingerprint == ds.fingerprint:
        warnings.warn(
            "outcome model was fit on the evaluation dataset; unbiasedness and the "
            "variance comparison assume a separate sample",
            SampleSplittingWarning,
            stacklevel=2,
        )
    density = _randomization_density(ds, pR)
    residual = _weighted_term(
        policy, density, ds.texts, ds.outcomes - ghat.predict(ds.texts), opts, "randomization"
    )
    out = v_out(policy, f0, ghat, m, rng, opts)
    c1 = residual.contributions
    c2 = out.per_sample
    n = len(residual)
    value = float(c1.mean()) + out.value
    se = math.sqrt(_sd(c1) ** 2 / n + _sd(c2) ** 2 / m)
    return ValueEstimate(
        "dr", value, c1 + out.value, se, opts.describe(), n=n, m=m,
        terms=(residual,) + out.terms,
    )
