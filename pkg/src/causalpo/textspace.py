"""Finite text universe: fixed-length token sequences over a small vocabulary."""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import EnumerationTooLarge

ENUMERATION_CAP = 10**7


@dataclass(frozen=True)
class Vocab:
    """``size`` tokens, every text exactly ``seq_len`` tokens long."""

    size: int
    seq_len: int

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 2:
            raise ValueError(f"vocab size must be an integer >= 2, got {self.size}")
        if int(self.seq_len) != self.seq_len or self.seq_len < 1:
            raise ValueError(f"seq_len must be an integer >= 1, got {self.seq_len}")

    @property
    def n_texts(self):
        return self.size**self.seq_len

    @property
    def enumerable(self):
        return self.n_texts <= ENUMERATION_CAP

    def feature_dim(self, order=2):
        return 1 + self.size + (self.size**2 if order >= 2 else 0)

    def check_texts(self, texts):
        """Return ``texts`` as an int64 array of shape (n, seq_len), validating tokens."""
        arr = np.asarray(texts, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.seq_len:
            raise ValueError(
                f"texts must have exactly {self.seq_len} tokens, got shape {np.shape(texts)}"
            )
        if arr.size and (arr.min() < 0 or arr.max() >= self.size):
            raise ValueError(f"token ids must lie in [0, {self.size})")
        return np.ascontiguousarray(arr)

    def to_dict(self):
        return {"size": self.size, "seq_len": self.seq_len}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["size"]), int(d["seq_len"]))


def enumerate_texts(vocab):
    """All ``V**L`` texts in lexicographic order, as an (V**L, L) int64 array."""
    if not vocab.enumerable:
        raise EnumerationTooLarge(
            f"{vocab.size}**{vocab.seq_len} texts exceeds the cap of {ENUMERATION_CAP}"
        )
    return _enumerate(vocab.size, vocab.seq_len).copy()


@lru_cache(maxsize=16)
def _enumerate(size, seq_len):
    codes = np.arange(size**seq_len, dtype=np.int64)
    powers = size ** np.arange(seq_len - 1, -1, -1, dtype=np.int64)
    out = (codes[:, None] // powers[None, :]) % size
    out.setflags(write=False)
    return out


def featurize(texts, vocab, order=2):
    """Intercept, unigram counts and (order 2) bigram counts.

    Entry ``1 + t`` counts token ``t``; entry ``1 + V + a*V + b`` counts the
    adjacent pair ``(a, b)``. A single text gives a 1-d vector, a batch a 2-d array.
    """
    if order not in (1, 2):
        raise ValueError("feature order must be 1 or 2")
    single = np.ndim(texts) == 1
    arr = vocab.check_texts(texts)
    phi = kernels.featurize_batch(arr, vocab.size, order)
    return phi[0] if single else phi
