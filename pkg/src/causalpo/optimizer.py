"""Gradient-ascent trainers for the CPO, DR-CPO and OO-RLHF objectives.

Gradients use the score-function identity grad w = w * grad log P^f. When
weights are self-normalized, the normalizing mean is held fixed while
differentiating, so the gradient is that of the surrogate
``sum_terms mean((w / c) * target)`` with ``c`` frozen at the current policy.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceDetected, MissingInput
from .estimators import WeightOptions, v_dr, v_ipw, v_out
from .simulator import true_value
from .textspace import enumerate_texts

OBJECTIVES = ("CPO", "DRCPO", "OORLHF")


@dataclass
class TrainConfig:
    objective: str = "CPO"
    steps: int = 200
    batch: int = None  # rows of D_R per step, drawn with replacement; None uses all rows
    learning_rate: float = 0.05
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_opts: WeightOptions = field(default_factory=lambda: WeightOptions(self_normalize=True))
    m_per_step: int = 1000
    seed: int = 0
    optimizer: str = "adam"
    kl_weight: float = 0.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.objective != "CPO" and self.m_per_step < 1:
            raise ValueError("m_per_step must be >= 1 for DRCPO and OORLHF")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


@dataclass
class TrainRecord:
    step: int
    estimate: float
    true_value: float
    grad_norm: float


def draw_minibatch(cfg, ds, rng):
    if ds is None or cfg.batch is None:
        return ds
    return ds.subset(rng.integers(0, len(ds), size=cfg.batch))


def _require(cfg, ds, pR, ghat, f0):
    need = {"CPO": ("ds",), "DRCPO": ("ds", "ghat", "f0"), "OORLHF": ("ghat", "f0")}[cfg.objective]
    given = {"ds": ds, "ghat": ghat, "f0": f0}
    missing = [k for k in need if given[k] is None]
    if missing:
        raise MissingInput(f"{cfg.objective} needs {', '.join(missing)}")
    if "ds" in need and pR is None and ds.assignment is None:
        raise MissingInput(f"{cfg.objective} needs a randomization density")


def estimate_on_batch(cfg, policy, batch, pR, ghat, f0, rng):
    """The estimators-module value for ``cfg.objective`` on an already drawn batch."""
    opts = cfg.weight_opts
    if cfg.objective == "CPO":
        return v_ipw(policy, batch, pR, opts)
    if cfg.objective == "DRCPO":
        return v_dr(policy, batch, pR, ghat, f0, cfg.m_per_step, rng, opts)
    return v_out(policy, f0, ghat, cfg.m_per_step, rng, opts)


def gradient_from_terms(policy, terms):
    """Gradient of sum over terms of mean(w * target), weights as frozen-normalizer constants."""
    grad = np.zeros_like(policy.logits)
    for term in terms:
        coef = term.weights * term.targets * term.active / len(term)
        grad += policy.score_sum(term.texts, coef)
    return grad


def surrogate_value(policy, base, terms):
    """The function ``gradient_from_terms`` differentiates, evaluated at ``policy``.

    Each weight is rescaled by P^f/P^base at its text; normalizers and the
    clipping pattern stay as they were at ``base``.
    """
    total = 0.0
    for term in terms:
        shift = np.exp(policy.log_prob_batch(term.texts) - base.log_prob_batch(term.texts))
        scale = np.where(term.active, shift, 1.0)
        total += float(np.mean(term.weights * scale * term.targets))
    return total


def objective_gradient(cfg, policy, ds, pR, ghat, f0, rng):
    """One stochastic estimate of the objective and its gradient.

    ``estimate`` equals the corresponding estimator applied to the same
    minibatch and rng stream (see ``draw_minibatch`` and ``estimate_on_batch``).
    """
    _require(cfg, ds, pR, ghat, f0)
    batch = draw_minibatch(cfg, ds, rng) if cfg.objective != "OORLHF" else None
    est = estimate_on_batch(cfg, policy, batch, pR, ghat, f0, rng)
    return est.value, gradient_from_terms(policy, est.terms)


def kl_to_reference(policy, reference):
    """Exact KL(P^f || P^ref) and its gradient, by enumeration."""
    texts = enumerate_texts(policy.vocab)
    log_p = policy.log_prob_batch(texts)
    diff = log_p - reference.log_prob_batch(texts)
    p = np.exp(log_p)
    return float(np.dot(p, diff)), policy.score_sum(texts, p * diff)


def train(cfg, init, ds=None, pR=None, ghat=None, f0=None, pop_for_trace=None):
    """Run ``cfg.steps`` ascent steps on ``cfg.objective`` starting from ``init``.

    Returns the trained copy and a list of TrainRecord (one per step). Each
    record holds the minibatch estimate and gradient norm at the pre-update
    parameters and the enumerated true value after the update (NaN without a
    population or when the text space is not enumerable).
    """
    _require(cfg, ds, pR, ghat, f0)
    rng = np.random.default_rng(cfg.seed)
    policy = init.copy(name=cfg.objective)
    reference = init.copy()
    theta = policy.logits
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    b1, b2 = cfg.adam_betas
    trace = []
    track = pop_for_trace is not None and pop_for_trace.vocab.enumerable
    for step in range(1, cfg.steps + 1):
        estimate, grad = objective_gradient(cfg, policy, ds, pR, ghat, f0, rng)
        if cfg.kl_weight:
            kl, kl_grad = kl_to_reference(policy, reference)
            estimate -= cfg.kl_weight * kl
            grad -= cfg.kl_weight * kl_grad
        if not math.isfinite(estimate) or not np.all(np.isfinite(grad)):
            raise DivergenceDetected(f"non-finite objective at step {step}")
        if cfg.optimizer == "sgd":
            theta += cfg.learning_rate * grad
        else:
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            m_hat = m1 / (1 - b1**step)
            v_hat = m2 / (1 - b2**step)
            theta += cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        truth = true_value(policy, pop_for_trace) if track else float("nan")
        trace.append(TrainRecord(step, float(estimate), truth, float(np.linalg.norm(grad))))
    return policy, trace


def write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "estimate", "true_value", "grad_norm"])
        for r in trace:
            w.writerow([r.step, repr(r.estimate), repr(r.true_value), repr(r.grad_norm)])
