"""Linear outcome models fit by ridge regression on n-gram count features."""
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels
from .errors import SingularDesign
from .textspace import Vocab, enumerate_texts, featurize

DEFAULT_LAMBDA = 1e-6


@dataclass
class OutcomeModel:
    vocab: Vocab
    weights: np.ndarray
    feature_order: int = 2
    ridge_lambda: float = DEFAULT_LAMBDA
    train_mse: float = float("nan")
    train_fingerprint: str = ""

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.feature_order not in (1, 2):
            raise ValueError("feature_order must be 1 or 2")
        if self.weights.shape != (self.vocab.feature_dim(self.feature_order),):
            raise ValueError("weight vector does not match the feature dimension")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def predict(self, texts):
        single = np.ndim(texts) == 1
        arr = self.vocab.check_texts(texts)
        out = kernels.linear_score(arr, self.weights, self.vocab.size, self.feature_order)
        return float(out[0]) if single else out

    @classmethod
    def constant(cls, vocab, value=0.0, feature_order=2):
        w = np.zeros(vocab.feature_dim(feature_order))
        w[0] = value
        return cls(vocab, w, feature_order, 0.0)

    @classmethod
    def from_population(cls, pop):
        """The exact mean-outcome function g as an outcome model."""
        return cls(pop.vocab, pop.g_weights.copy(), 2, 0.0)

    def to_dict(self):
        return {
            "vocab": self.vocab.to_dict(),
            "feature_order": self.feature_order,
            "ridge_lambda": self.ridge_lambda,
            "weights": [float(x) for x in self.weights],
            "train_mse": self.train_mse,
            "train_fingerprint": self.train_fingerprint,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            Vocab.from_dict(d["vocab"]),
            np.array(d["weights"], dtype=np.float64),
            int(d["feature_order"]),
            float(d["ridge_lambda"]),
            float(d.get("train_mse", "nan")),
            d.get("train_fingerprint", ""),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _solve(phi, y, lam):
    """Ridge with an unpenalized intercept; ``lam == 0`` gives the minimum-norm
    least-squares solution (the lam -> 0 limit)."""
    x = phi[:, 1:]
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    yc = y - y_mean
    if lam == 0:
        coef = np.linalg.lstsq(xc, yc, rcond=None)[0]
    else:
        gram = xc.T @ xc + lam * np.eye(x.shape[1])
        coef = cho_solve(cho_factor(gram), xc.T @ yc)
    return np.concatenate([[y_mean - x_mean @ coef], coef])


def _universe(vocab):
    if vocab.n_texts <= 10**5:
        return enumerate_texts(vocab)
    rng = np.random.default_rng(0)
    return rng.integers(0, vocab.size, size=(20000, vocab.seq_len))


@lru_cache(maxsize=32)
def structural_rank(vocab, feature_order):
    """Rank of the centered feature matrix over the whole text space."""
    phi = featurize(_universe(vocab), vocab, feature_order)[:, 1:]
    return int(np.linalg.matrix_rank(phi - phi.mean(axis=0)))


def identifiable_weights(weights, vocab, feature_order=2):
    """Minimum non-intercept-norm weights giving the same predictions everywhere."""
    texts = _universe(vocab)
    y = kernels.linear_score(texts, np.asarray(weights, dtype=np.float64), vocab.size, feature_order)
    return _solve(featurize(texts, vocab, feature_order), y, 0.0)


def fit(ds, feature_order=2, lam=DEFAULT_LAMBDA):
    """Fit ``g_hat`` to a labeled dataset.

    Raises SingularDesign when ``lam == 0`` and the training texts do not pin
    down predictions on the whole text space (centered design rank below the
    structural rank).
    """
    if lam < 0:
        raise ValueError("ridge lambda must be >= 0")
    phi = featurize(ds.texts, ds.vocab, feature_order)
    if lam == 0:
        xc = phi[:, 1:] - phi[:, 1:].mean(axis=0)
        rank = np.linalg.matrix_rank(xc)
        needed = structural_rank(ds.vocab, feature_order)
        if rank < needed:
            raise SingularDesign(
                f"design rank {rank} < {needed} identifiable directions; use lambda > 0"
            )
    w = _solve(phi, ds.outcomes, lam)
    model = OutcomeModel(ds.vocab, w, feature_order, float(lam), train_fingerprint=ds.fingerprint)
    model.train_mse = float(np.mean((model.predict(ds.texts) - ds.outcomes) ** 2))
    return model
