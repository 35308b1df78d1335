"""Experiment configuration: YAML with line-numbered validation errors.

Every random stream is seeded as ``master_seed + SEED_OFFSETS[purpose]``.
New purposes get new offsets, so adding an experiment never shifts the seeds
of existing ones.
"""
import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .errors import ConfigError
from .estimators import WeightOptions
from .optimizer import TrainConfig
from .simulator import ConfounderSpec, Population
from .textspace import Vocab

SEED_OFFSETS = {
    "population": 1,
    "assignment": 2,
    "randomized": 3,
    "outcome_data": 4,
    "confound": 5,
    "propensity": 6,
    "evaluation_data": 7,
    "train.CPO": 11,
    "train.CPO-reseed": 12,
    "train.DRCPO": 13,
    "train.DRCPO-confounded": 14,
    "train.OORLHF": 15,
    "train.OORLHF-confounded": 16,
    "evaluate.win_rates": 21,
    "evaluate.reward_table": 22,
    "evaluate.impact": 23,
    "acceptance.ipw": 101,
    "acceptance.wrong_ghat": 102,
    "acceptance.estimated_pr": 103,
    "acceptance.variance": 104,
    "acceptance.gradients": 107,
    "acceptance.identities": 108,
}


def derive_seed(master, purpose):
    return int(master) + SEED_OFFSETS[purpose]


def default_config_path():
    return str(resources.files("causalpo") / "configs" / "default.yaml")


def _line_index(node, prefix=(), out=None):
    """Map key paths to 1-based source lines."""
    out = {} if out is None else out
    out[prefix] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            out[path] = key.start_mark.line + 1
            _line_index(value, path, out)
            out[path] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, prefix + (i,), out)
    return out


class _Reader:
    """Typed access into the parsed mapping; errors carry the source line."""

    def __init__(self, data, lines, path):
        self.data = data
        self.lines = lines
        self.path = path

    def fail(self, keys, message):
        keys = tuple(keys)
        line = None
        for cut in range(len(keys), -1, -1):
            if keys[:cut] in self.lines:
                line = self.lines[keys[:cut]]
                break
        raise ConfigError(f"{'.'.join(map(str, keys)) or '<root>'}: {message}", self.path, line)

    def get(self, keys, default=..., kind=None, check=None, what=""):
        node = self.data
        for i, k in enumerate(keys):
            if not isinstance(node, dict):
                self.fail(keys[:i], "expected a mapping")
            if k not in node:
                if default is ...:
                    self.fail(keys, "required key is missing")
                return default
            node = node[k]
        if node is None and default is not ...:
            return default
        if kind is not None:
            if kind is float and isinstance(node, int) and not isinstance(node, bool):
                node = float(node)
            if kind is int and isinstance(node, bool) or not isinstance(node, kind):
                self.fail(keys, f"expected {getattr(kind, '__name__', kind)}, got {node!r}")
        if check is not None and not check(node):
            self.fail(keys, what or f"invalid value {node!r}")
        return node


@dataclass
class ExperimentConfig:
    path: str
    text_hash: str
    seed: int
    vocab: Vocab
    population_spec: dict
    noise_sd: float
    assignment_kind: str
    assignment_order: int
    assignment_scale: float
    n: int
    n_outcome: int
    confounder: ConfounderSpec
    policy_order: int
    smoothing: float
    reference: str
    propensity: str
    feature_order: int
    ridge_lambda: float
    training: dict
    pairs: int
    eval_m: int
    interval: str
    acceptance: dict = field(default_factory=dict)

    def seed_for(self, purpose):
        return derive_seed(self.seed, purpose)

    def build_population(self):
        spec = self.population_spec
        if "random" in spec:
            rng = np.random.default_rng(self.seed_for("population"))
            r = spec["random"]
            return Population.random(self.vocab, rng, r.get("scale", 1.0), r.get("intercept", 0.0), self.noise_sd)
        bigram = {(int(a), int(b)): float(w) for a, b, w in spec.get("bigram", [])}
        return Population.from_terms(
            self.vocab, spec.get("intercept", 0.0), spec.get("unigram"), bigram, self.noise_sd
        )

    def train_config(self, objective, purpose):
        t = self.training
        return TrainConfig(
            objective=objective,
            steps=t["steps"],
            batch=t["batch"],
            learning_rate=t["learning_rate"],
            adam_betas=tuple(t["adam_betas"]),
            adam_eps=t["adam_eps"],
            weight_opts=WeightOptions(t["self_normalize"], t["clip_max"]),
            m_per_step=t["m_per_step"],
            seed=self.seed_for(purpose),
            optimizer=t["optimizer"],
            kl_weight=t["kl_weight"],
        )


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def load_config(path=None, seed=None):
    """Parse and validate a config file; ``seed`` overrides the master seed."""
    path = path or default_config_path()
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path) from None
    text = raw.decode("utf-8")
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", path,
                          mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path, 1)
    rd = _Reader(data, _line_index(node), path)

    master = rd.get(("seed",), kind=int) if seed is None else int(seed)
    size = rd.get(("vocab", "size"), kind=int, check=lambda v: v >= 2, what="must be >= 2")
    seq_len = rd.get(("vocab", "seq_len"), kind=int, check=_positive, what="must be >= 1")
    vocab = Vocab(size, seq_len)

    pop_spec = rd.get(("population",), kind=dict)
    noise_sd = rd.get(("population", "noise_sd"), 0.0, kind=float, check=_nonneg, what="must be >= 0")
    if "random" in pop_spec:
        rd.get(("population", "random"), kind=dict)
        rd.get(("population", "random", "scale"), 1.0, kind=float)
        rd.get(("population", "random", "intercept"), 0.0, kind=float)
    else:
        rd.get(("population", "intercept"), 0.0, kind=float)
        uni = rd.get(("population", "unigram"), None, kind=list)
        if uni is not None and len(uni) != size:
            rd.fail(("population", "unigram"), f"needs exactly {size} entries")
        for i, triple in enumerate(rd.get(("population", "bigram"), [], kind=list)):
            ok = (isinstance(triple, list) and len(triple) == 3
                  and all(isinstance(t, int) and 0 <= t < size for t in triple[:2]))
            if not ok:
                rd.fail(("population", "bigram", i), f"expected [a, b, weight] with tokens in [0, {size})")

    a_kind = rd.get(("assignment", "kind"), "uniform", kind=str,
                    check=lambda k: k in ("uniform", "random"), what="must be 'uniform' or 'random'")
    a_order = rd.get(("assignment", "order"), 1, kind=int, check=lambda k: k in (0, 1, 2), what="must be 0, 1 or 2")
    a_scale = rd.get(("assignment", "scale"), 0.5, kind=float)

    n = rd.get(("data", "n"), kind=int, check=_positive, what="must be >= 1")
    n_outcome = rd.get(("data", "n_outcome"), n, kind=int, check=_positive, what="must be >= 1")
    c_kind = rd.get(("data", "confounder", "kind"), "negation", kind=str,
                    check=lambda k: k in ("negation", "latent_shift"), what="must be 'negation' or 'latent_shift'")
    confounder = ConfounderSpec(
        c_kind,
        rd.get(("data", "confounder", "strength"), 0.0, kind=float),
        rd.get(("data", "confounder", "selection_bias"), 0.0, kind=float),
    )

    policy_order = rd.get(("policy", "order"), 1, kind=int, check=lambda k: k in (0, 1, 2), what="must be 0, 1 or 2")
    smoothing = rd.get(("policy", "smoothing"), 0.5, kind=float, check=_nonneg, what="must be >= 0")
    reference = rd.get(("reference",), "uniform", kind=str,
                       check=lambda k: k in ("uniform", "ft", "assignment"), what="must be uniform, ft or assignment")
    propensity = rd.get(("propensity",), "known", kind=str,
                        check=lambda k: k in ("known", "estimated"), what="must be 'known' or 'estimated'")
    feature_order = rd.get(("outcome_model", "feature_order"), 2, kind=int,
                           check=lambda k: k in (1, 2), what="must be 1 or 2")
    ridge_lambda = rd.get(("outcome_model", "ridge_lambda"), 1e-6, kind=float, check=_nonneg, what="must be >= 0")

    tr = ("training",)
    training = {
        "steps": rd.get(tr + ("steps",), 300, kind=int, check=_positive, what="must be >= 1"),
        "learning_rate": rd.get(tr + ("learning_rate",), 0.1, kind=float, check=_nonneg, what="must be >= 0"),
        "batch": rd.get(tr + ("batch",), None, kind=int, check=_positive, what="must be >= 1 or null"),
        "m_per_step": rd.get(tr + ("m_per_step",), 5000, kind=int, check=_positive, what="must be >= 1"),
        "self_normalize": rd.get(tr + ("self_normalize",), True, kind=bool),
        "clip_max": rd.get(tr + ("clip_max",), None, kind=float, check=_positive, what="must be > 0 or null"),
        "kl_weight": rd.get(tr + ("kl_weight",), 0.0, kind=float, check=_nonneg, what="must be >= 0"),
        "optimizer": rd.get(tr + ("optimizer",), "adam", kind=str,
                            check=lambda k: k in ("adam", "sgd"), what="must be 'adam' or 'sgd'"),
        "adam_betas": rd.get(tr + ("adam_betas",), [0.9, 0.999], kind=list,
                             check=lambda b: len(b) == 2 and all(0 <= x < 1 for x in b), what="needs two values in [0, 1)"),
        "adam_eps": rd.get(tr + ("adam_eps",), 1e-8, kind=float, check=_positive, what="must be > 0"),
    }

    pairs = rd.get(("evaluation", "pairs"), 2000, kind=int, check=_positive, what="must be >= 1")
    eval_m = rd.get(("evaluation", "m"), 100000, kind=int, check=_positive, what="must be >= 1")
    interval = rd.get(("evaluation", "interval"), "normal", kind=str,
                      check=lambda k: k in ("normal", "wilson"), what="must be 'normal' or 'wilson'")

    acc = rd.get(("acceptance",), {}, kind=dict)
    for key, value in acc.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            rd.fail(("acceptance", key), "must be a positive integer")

    h = hashlib.sha256(raw)
    h.update(f"seed={master}".encode())
    return ExperimentConfig(
        path=path, text_hash=h.hexdigest(), seed=master, vocab=vocab, population_spec=pop_spec,
        noise_sd=noise_sd, assignment_kind=a_kind, assignment_order=a_order, assignment_scale=a_scale,
        n=n, n_outcome=n_outcome, confounder=confounder, policy_order=policy_order,
        smoothing=smoothing, reference=reference, propensity=propensity,
        feature_order=feature_order, ridge_lambda=ridge_lambda, training=training,
        pairs=pairs, eval_m=eval_m, interval=interval, acceptance=acc,
    )
