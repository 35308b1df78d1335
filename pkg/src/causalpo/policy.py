"""Tabular autoregressive softmax policies over fixed-length texts.

A policy of order ``k`` conditions token ``t`` on the previous ``min(k, t)``
tokens. Logits are stored as one (n_rows, V) table; row
``offsets[t] + code(context)`` holds the logits for position ``t`` in that
context, with the context encoded base-V (oldest token most significant).
"""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import EmptyCorpus
from .textspace import Vocab, enumerate_texts

# Finite stand-in for log(0); exp() of it underflows to exactly 0.0.
MIN_LOGIT = -1000.0


def row_offsets(vocab, order):
    sizes = [vocab.size ** min(order, t) for t in range(vocab.seq_len)]
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64), int(sum(sizes))


@dataclass
class Policy:
    vocab: Vocab
    order: int
    logits: np.ndarray
    name: str = field(default="policy", compare=False)

    def __post_init__(self):
        if self.order not in (0, 1, 2):
            raise ValueError(f"order must be 0, 1 or 2, got {self.order}")
        self.offsets, n_rows = row_offsets(self.vocab, self.order)
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float64)
        if self.logits.shape != (n_rows, self.vocab.size):
            raise ValueError(
                f"logits shape {self.logits.shape} != {(n_rows, self.vocab.size)}"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @property
    def n_params(self):
        return self.logits.size

    def copy(self, name=None):
        return Policy(self.vocab, self.order, self.logits.copy(), name or self.name)

    # tables derived from the logits; recomputed on every call because
    # training mutates ``logits`` in place
    def log_softmax(self):
        return self.logits - logsumexp(self.logits, axis=1, keepdims=True)

    def probs(self):
        return np.exp(self.log_softmax())

    def rows(self, texts):
        """Logits row used at each position of each text, shape (n, L)."""
        texts = self.vocab.check_texts(texts)
        return kernels.context_rows(texts, self.vocab.size, self.order, self.offsets)

    def log_prob(self, text):
        """Exact log-probability of one text."""
        return float(self.log_prob_batch(text)[0])

    def log_prob_batch(self, texts):
        texts = self.vocab.check_texts(texts)
        return kernels.gather_sum(self.log_softmax(), self.rows(texts), texts)

    def min_log_factor(self, texts):
        """Smallest per-position conditional log-probability of each text.

        A text has zero mass exactly when one of its factors is a MIN_LOGIT
        entry, regardless of how small its total log-probability is.
        """
        texts = self.vocab.check_texts(texts)
        return self.log_softmax()[self.rows(texts), texts].min(axis=1)

    def sample(self, rng, n=None):
        """Ancestral sample; one text (tuple) when ``n`` is None, else an (n, L) array."""
        count = 1 if n is None else int(n)
        u = rng.random((count, self.vocab.seq_len))
        cdf = np.cumsum(self.probs(), axis=1)
        texts = kernels.sample_texts(cdf, u, self.order, self.offsets)
        return tuple(int(t) for t in texts[0]) if n is None else texts

    def grad_log_prob(self, text):
        """Gradient of ``log_prob(text)`` with respect to the logits table."""
        return self.score_sum(text, np.ones(1))

    def score_sum(self, texts, coef):
        """``sum_i coef[i] * grad log P(texts[i])`` as a logits-shaped array."""
        texts = self.vocab.check_texts(texts)
        grad = np.zeros_like(self.logits)
        kernels.accumulate_score(grad, self.probs(), self.rows(texts), texts, coef)
        return grad

    def distribution(self):
        """Exact probabilities over ``enumerate_texts(vocab)``."""
        return np.exp(self.log_prob_batch(enumerate_texts(self.vocab)))

    def context_keys(self):
        """(position, context tuple) for every logits row, in row order."""
        keys = []
        for t in range(self.vocab.seq_len):
            width = min(self.order, t)
            for code in range(self.vocab.size**width):
                ctx = []
                for _ in range(width):
                    ctx.append(code % self.vocab.size)
                    code //= self.vocab.size
                keys.append((t, tuple(reversed(ctx))))
        return keys

    # persistence: one (position, context, token, logit) record per entry
    def to_dict(self):
        records = []
        for row, (t, ctx) in enumerate(self.context_keys()):
            for v in range(self.vocab.size):
                records.append([t, list(ctx), v, float(self.logits[row, v])])
        return {
            "name": self.name,
            "vocab": self.vocab.to_dict(),
            "order": self.order,
            "logits": records,
        }

    @classmethod
    def from_dict(cls, d):
        vocab = Vocab.from_dict(d["vocab"])
        order = int(d["order"])
        offsets, n_rows = row_offsets(vocab, order)
        logits = np.full((n_rows, vocab.size), np.nan)
        for t, ctx, v, value in d["logits"]:
            code = 0
            for tok in ctx:
                code = code * vocab.size + tok
            logits[offsets[t] + code, v] = value
        if np.isnan(logits).any():
            raise ValueError("policy file is missing logits entries")
        return cls(vocab, order, logits, d.get("name", "policy"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def uniform_policy(vocab, order=1, name="uniform"):
    _, n_rows = row_offsets(vocab, order)
    return Policy(vocab, order, np.zeros((n_rows, vocab.size)), name)


def random_policy(vocab, rng, order=1, scale=1.0, name="random"):
    _, n_rows = row_offsets(vocab, order)
    return Policy(vocab, order, scale * rng.standard_normal((n_rows, vocab.size)), name)


def point_mass_policy(vocab, text, order=1, gap=50.0, name="point-mass"):
    """Policy putting (numerically) all mass on ``text``."""
    text = vocab.check_texts(text)
    pol = uniform_policy(vocab, order, name)
    rows = pol.rows(text)[0]
    pol.logits[rows, text[0]] = gap
    return pol


def mle_fit(texts, vocab, order=1, smoothing=0.0, name="ft"):
    """Closed-form add-``smoothing`` maximum likelihood fit.

    Contexts never seen in ``texts`` fall back to uniform. With zero smoothing,
    unseen tokens in a seen context get ``MIN_LOGIT`` (probability exactly 0).
    """
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    if len(texts) == 0:
        raise EmptyCorpus("cannot fit a policy to an empty corpus")
    texts = vocab.check_texts(texts)
    pol = uniform_policy(vocab, order, name)
    counts = np.zeros_like(pol.logits)
    np.add.at(counts, (pol.rows(texts).ravel(), texts.ravel()), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        logits = np.log(counts + smoothing) - np.log(totals + smoothing * vocab.size)
    logits = np.maximum(logits, MIN_LOGIT)
    unseen = totals[:, 0] == 0
    logits[unseen] = 0.0
    pol.logits = np.ascontiguousarray(logits)
    return pol

