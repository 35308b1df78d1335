"""Ground-truth populations, randomized experiments and confounded datasets."""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import AlreadyObservational, EnumerationTooLarge
from .outcome_model import identifiable_weights
from .textspace import Vocab, enumerate_texts

FEATURE_ORDER = 2


@dataclass
class Population:
    """Mean outcome ``g(x) = <g_weights, featurize(x)>`` plus N(0, noise_sd**2) noise."""

    vocab: Vocab
    g_weights: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        self.g_weights = np.ascontiguousarray(self.g_weights, dtype=np.float64)
        if self.g_weights.shape != (self.vocab.feature_dim(FEATURE_ORDER),):
            raise ValueError(
                f"g_weights must have length {self.vocab.feature_dim(FEATURE_ORDER)}"
            )
        if not np.all(np.isfinite(self.g_weights)):
            raise ValueError("g_weights must be finite")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be >= 0")

    @classmethod
    def from_terms(cls, vocab, intercept=0.0, unigram=None, bigram=None, noise_sd=0.0):
        """Build weights from an intercept, per-token weights and ``{(a, b): w}`` pairs."""
        w = np.zeros(vocab.feature_dim(FEATURE_ORDER))
        w[0] = intercept
        if unigram is not None:
            w[1 : 1 + vocab.size] = unigram
        for (a, b), value in (bigram or {}).items():
            w[1 + vocab.size + a * vocab.size + b] = value
        return cls(vocab, w, noise_sd)

    @classmethod
    def random(cls, vocab, rng, scale=1.0, intercept=0.0, noise_sd=1.0):
        """Random population whose weights are already in identifiable form."""
        w = scale * rng.standard_normal(vocab.feature_dim(FEATURE_ORDER))
        w[0] = intercept
        return cls(vocab, identifiable_weights(w, vocab, FEATURE_ORDER), noise_sd)

    def g(self, texts):
        """Mean potential outcome of each text in a batch."""
        texts = self.vocab.check_texts(texts)
        return kernels.linear_score(texts, self.g_weights, self.vocab.size, FEATURE_ORDER)

    def identifiable_weights(self):
        """The weight vector a rank-complete unpenalized regression recovers.

        Unigram counts always sum to L (and bigram counts to L-1), so the raw
        weights are only determined up to those collinearities. This is the
        representative with the smallest non-intercept norm; it gives the same g.
        """
        return identifiable_weights(self.g_weights, self.vocab, FEATURE_ORDER)

    def to_dict(self):
        return {
            "vocab": self.vocab.to_dict(),
            "g_weights": [float(x) for x in self.g_weights],
            "noise_sd": float(self.noise_sd),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(Vocab.from_dict(d["vocab"]), np.array(d["g_weights"]), d["noise_sd"])


def potential_outcome(pop, texts, rng):
    """Draw Y(x) = g(x) + eps for each text; exactly g(x) when noise_sd is 0."""
    single = np.ndim(texts) == 1
    mean = pop.g(texts)
    if pop.noise_sd > 0:
        out = mean + pop.noise_sd * rng.standard_normal(mean.shape[0])
    else:
        out = mean
    return float(out[0]) if single else out


def true_value(policy, pop):
    """Exact V(f) = sum_x P^f(x) g(x) by enumeration."""
    if not pop.vocab.enumerable:
        raise EnumerationTooLarge("true value needs an enumerable text space")
    texts = enumerate_texts(pop.vocab)
    return float(np.dot(np.exp(policy.log_prob_batch(texts)), pop.g(texts)))


def max_value(pop):
    """Largest g over the text space (the value of the best point mass)."""
    return float(pop.g(enumerate_texts(pop.vocab)).max())


def argmax_text(pop):
    texts = enumerate_texts(pop.vocab)
    return tuple(int(t) for t in texts[int(np.argmax(pop.g(texts)))])


@dataclass(frozen=True)
class Provenance:
    """``kind`` is "randomized" (texts drawn from a known assignment policy) or
    "observational" (``source`` names the confounder)."""

    kind: str
    source: str

    @property
    def randomized(self):
        return self.kind == "randomized"

    def to_dict(self):
        return {"kind": self.kind, "source": self.source}


@dataclass
class LabeledDataset:
    vocab: Vocab
    texts: np.ndarray
    outcomes: np.ndarray
    provenance: Provenance
    assignment: object = field(default=None, repr=False)

    def __post_init__(self):
        self.texts = self.vocab.check_texts(self.texts)
        self.outcomes = np.ascontiguousarray(self.outcomes, dtype=np.float64)
        if self.texts.shape[0] == 0:
            raise ValueError("a dataset needs at least one sample")
        if self.outcomes.shape != (self.texts.shape[0],):
            raise ValueError("one outcome per text is required")

    def __len__(self):
        return self.texts.shape[0]

    def subset(self, idx):
        return LabeledDataset(
            self.vocab, self.texts[idx], self.outcomes[idx], self.provenance, self.assignment
        )

    def split(self, n_first):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    @property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.texts.tobytes())
        h.update(self.outcomes.tobytes())
        return h.hexdigest()

    def save(self, path):
        header = {"header": {"vocab": self.vocab.to_dict(), "provenance": self.provenance.to_dict(), "n": len(self)}}
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for text, y in zip(self.texts.tolist(), self.outcomes.tolist()):
                fh.write(json.dumps({"tokens": text, "outcome": y}) + "\n")

    @classmethod
    def load(cls, path, assignment=None):
        with open(path) as fh:
            header = json.loads(fh.readline())["header"]
            rows = [json.loads(line) for line in fh if line.strip()]
        vocab = Vocab.from_dict(header["vocab"])
        prov = Provenance(**header["provenance"])
        texts = np.array([r["tokens"] for r in rows], dtype=np.int64).reshape(-1, vocab.seq_len)
        outcomes = np.array([r["outcome"] for r in rows], dtype=np.float64)
        return cls(vocab, texts, outcomes, prov, assignment)


def run_experiment(pop, assignment, n, rng):
    """Randomized experiment: texts from ``assignment``, outcomes from the population."""
    if n < 1:
        raise ValueError("n must be >= 1")
    texts = assignment.sample(rng, n)
    outcomes = potential_outcome(pop, texts, rng)
    prov = Provenance("randomized", getattr(assignment, "name", "assignment"))
    return LabeledDataset(pop.vocab, texts, outcomes, prov, assignment)


@dataclass(frozen=True)
class ConfounderSpec:
    """``"negation"`` flips every outcome. ``"latent_shift"`` draws a latent u per
    reader that both shifts the outcome by ``strength * u`` and tilts which
    texts get read, with selection weight exp(selection_bias * u * z(text))."""

    kind: str = "negation"
    strength: float = 0.0
    selection_bias: float = 0.0

    def __post_init__(self):
        if self.kind not in ("negation", "latent_shift"):
            raise ValueError(f"unknown confounder kind {self.kind!r}")
        if not (np.isfinite(self.strength) and np.isfinite(self.selection_bias)):
            raise ValueError("confounder parameters must be finite")

    def to_dict(self):
        if self.kind == "negation":
            return {"kind": "negation"}
        return {"kind": self.kind, "strength": self.strength, "selection_bias": self.selection_bias}


def confound(ds, spec, pop, rng):
    """Turn a randomized dataset into a confounded observational one."""
    if not ds.provenance.randomized:
        raise AlreadyObservational(f"dataset is already observational ({ds.provenance.source})")
    if spec.kind == "negation":
        return LabeledDataset(ds.vocab, ds.texts.copy(), -ds.outcomes, Provenance("observational", "negation"))

    n = len(ds)
    g = pop.g(ds.texts)
    sd = g.std()
    z = (g - g.mean()) / sd if sd > 0 else np.zeros(n)
    u = rng.standard_normal(n)
    log_accept = spec.selection_bias * u * z
    p = np.exp(log_accept - log_accept.max())
    idx = rng.choice(n, size=n, replace=True, p=p / p.sum())
    outcomes = ds.outcomes[idx] + spec.strength * u[idx]
    return LabeledDataset(ds.vocab, ds.texts[idx], outcomes, Provenance("observational", "latent-shift"))
