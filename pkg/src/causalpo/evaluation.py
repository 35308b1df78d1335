"""Oracle-judged win rates, reward tables and Monte Carlo bias/variance studies."""
import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import outcome_model
from .estimators import CSV_FIELDS, WeightOptions, v_dr, v_ipw, v_out
from .policy import mle_fit, random_policy, uniform_policy
from .simulator import ConfounderSpec, Population, confound, run_experiment, true_value
from .textspace import Vocab, enumerate_texts

Z95 = 1.959963984540054
TIE_TOL = 1e-12


@dataclass
class WinRateResult:
    wins: int
    ties: int
    total: int
    rate: float
    ci_low: float
    ci_high: float

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high


def judge(texts_a, texts_b, pop, interval="normal"):
    """Score paired texts with the ground-truth mean outcome.

    A win goes to the higher g; |difference| <= 1e-12 is a tie worth half a
    win. The normal interval uses the per-pair score variance, which reduces
    to the binomial formula when there are no ties.
    """
    ga = pop.g(texts_a)
    gb = pop.g(texts_b)
    diff = ga - gb
    ties = np.abs(diff) <= TIE_TOL
    wins = (diff > TIE_TOL)
    total = ga.shape[0]
    scores = wins + 0.5 * ties
    rate = float(scores.mean())
    if interval == "wilson":
        z2 = Z95**2
        center = (rate + z2 / (2 * total)) / (1 + z2 / total)
        half = Z95 * math.sqrt(rate * (1 - rate) / total + z2 / (4 * total**2)) / (1 + z2 / total)
    elif interval == "normal":
        center = rate
        half = Z95 * math.sqrt(max(float(np.mean(scores**2)) - rate**2, 0.0) / total)
    else:
        raise ValueError(f"unknown interval {interval!r}")
    return WinRateResult(
        int(wins.sum()), int(ties.sum()), total, rate,
        max(0.0, center - half), min(1.0, center + half),
    )


def win_rate(policy_a, policy_b, pop, pairs, rng, interval="normal"):
    """Rate at which ``policy_a``'s text beats ``policy_b``'s under the oracle g."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    texts_a = policy_a.sample(rng, pairs)
    texts_b = policy_b.sample(rng, pairs)
    return judge(texts_a, texts_b, pop, interval)


@dataclass
class ImpactResult:
    method: str
    impact: float
    ci_low: float
    ci_high: float
    win_rate: WinRateResult

    @property
    def significant(self):
        return self.ci_high < 0 or self.ci_low > 0


def confounding_impact(method, trained_confounded, trained_clean, pop, pairs, rng):
    """Win rate of the confounded-model policy over the clean one, minus 1/2.

    Equal to half the difference between the two directions' win rates;
    negative means confounding hurt.
    """
    wr = win_rate(trained_confounded, trained_clean, pop, pairs, rng)
    return ImpactResult(method, wr.rate - 0.5, wr.ci_low - 0.5, wr.ci_high - 0.5, wr)


def reward_table(policies, ds, pR, ghat, f0, m, opts, seed, pop=None):
    """V-hat_DR, V-hat_IPW and V-hat_out for each named policy.

    Every policy sees the same reference draws (the rng is re-seeded per row),
    so identical policies give identical rows. ``true_value`` is included when
    ``pop`` is given.
    """
    rows = []
    for name, pol in policies.items():
        dr = v_dr(pol, ds, pR, ghat, f0, m, np.random.default_rng(seed), opts)
        ipw = v_ipw(pol, ds, pR, opts)
        out = v_out(pol, f0, ghat, m, np.random.default_rng(seed), opts)
        row = {
            "policy": name,
            "dr": dr.value, "dr_se": dr.std_error,
            "ipw": ipw.value, "ipw_se": ipw.std_error,
            "out": out.value, "out_se": out.std_error,
            "stabilization": opts.describe(),
        }
        if pop is not None:
            row["true_value"] = true_value(pol, pop)
        rows.append(row)
    return rows


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows, path_or_buf, fields=None):
    fields = fields or list(rows[0].keys())
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row.get(f, "")) for f in fields])
    finally:
        if own:
            fh.close()


def format_table(rows, fields=None, digits=4):
    """Aligned plain-text rendering of a list of row dicts."""
    fields = fields or list(rows[0].keys())

    def cell(v):
        return f"{v:.{digits}f}" if isinstance(v, float) else str(v)

    cells = [[cell(r.get(f, "")) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    out = io.StringIO()
    out.write("  ".join(f.ljust(w) for f, w in zip(fields, widths)).rstrip() + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for c in cells:
        out.write("  ".join(x.rjust(w) if i else x.ljust(w) for i, (x, w) in enumerate(zip(c, widths))).rstrip() + "\n")
    return out.getvalue()


def estimates_csv(estimates):
    buf = io.StringIO()
    write_csv([e.csv_row() for e in estimates], buf, list(CSV_FIELDS))
    return buf.getvalue()


# ---------------------------------------------------------------- Monte Carlo


@dataclass
class Scenario:
    """Everything a replicate needs: the truth, the data law and the nuisances."""

    name: str
    pop: Population
    policy: object
    assignment: object
    n: int
    m: int = 0
    pR: object = None  # density used in the weights; None means the true assignment
    ghat: object = None
    f0: object = None
    opts: WeightOptions = field(default_factory=WeightOptions)

    def expected_value(self, estimator):
        """Exact expectation of the estimator (by enumeration) for this scenario."""
        texts = enumerate_texts(self.pop.vocab)
        pf = np.exp(self.policy.log_prob_batch(texts))
        g = self.pop.g(texts)
        if estimator == "out":
            return float(np.dot(pf, self.ghat.predict(texts)))
        p_true = np.exp(self.assignment.log_prob_batch(texts))
        p_used = p_true if self.pR is None else np.exp(self.pR.log_prob_batch(texts))
        ratio = p_true / p_used
        if estimator == "ipw":
            return float(np.sum(pf * ratio * g))
        gh = self.ghat.predict(texts)
        return float(np.sum(pf * ratio * (g - gh)) + np.dot(pf, gh))


@dataclass
class BiasVarianceReport:
    estimator: str
    scenario: str
    replicates: int
    mean: float
    true_value: float
    bias: float
    se_mean: float
    variance: float

    def unbiased(self, k=3.0):
        return abs(self.bias) < k * self.se_mean

    def as_row(self):
        return asdict(self)


def _replicate(estimator, sc, seed, r):
    rng = np.random.default_rng([seed, r])
    ds = run_experiment(sc.pop, sc.assignment, sc.n, rng)
    if estimator == "ipw":
        return v_ipw(sc.policy, ds, sc.pR, sc.opts).value
    if estimator == "out":
        return v_out(sc.policy, sc.f0, sc.ghat, sc.m, rng, sc.opts).value
    if estimator == "dr":
        return v_dr(sc.policy, ds, sc.pR, sc.ghat, sc.f0, sc.m, rng, sc.opts).value
    raise ValueError(f"unknown estimator {estimator!r}")


def replicate_values(estimator, scenario, R, seed, threads=1):
    """One estimate per independently seeded replicate dataset; thread-count invariant."""
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            vals = list(ex.map(lambda r: _replicate(estimator, scenario, seed, r), range(R)))
    else:
        vals = [_replicate(estimator, scenario, seed, r) for r in range(R)]
    return np.array(vals)


def bias_variance_experiment(estimator, scenario, R, seed, threads=1):
    """Replicate mean, bias against the enumerated V(f), and replicate variance."""
    if R < 2:
        raise ValueError("R must be >= 2")
    vals = replicate_values(estimator, scenario, R, seed, threads)
    truth = true_value(scenario.policy, scenario.pop)
    mean = float(vals.mean())
    sd = float(vals.std(ddof=1))
    return BiasVarianceReport(
        estimator, scenario.name, R, mean, truth, mean - truth, sd / math.sqrt(R), sd**2
    )


def random_triple(seed, vocab=Vocab(3, 4), noise_sd=1.0, policy_scale=0.8, assignment_scale=0.4, intercept=2.0):
    """A random (policy, population, assignment) triple of order-1 policies."""
    rng = np.random.default_rng([seed, 7])
    pop = Population.random(vocab, rng, scale=1.0, intercept=intercept, noise_sd=noise_sd)
    policy = random_policy(vocab, rng, 1, policy_scale, "target")
    assignment = random_policy(vocab, rng, 1, assignment_scale, "assignment")
    return policy, pop, assignment


SCENARIOS = {}


def scenario(name):
    def register(fn):
        SCENARIOS[name] = fn
        return fn
    return register


def build_scenario(name, seed, **kw):
    """Look up a registered scenario builder by id and build it for ``seed``."""
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}") from None
    return builder(seed, **kw)


@scenario("ipw-known")
def _ipw_known(seed, n=2000, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    return Scenario("ipw-known", pop, policy, assignment, n)


def _separate_fit(pop, assignment, n_fit, seed, negate=False, feature_order=2):
    rng = np.random.default_rng([seed, 11])
    ds = run_experiment(pop, assignment, n_fit, rng)
    if negate:
        ds = confound(ds, ConfounderSpec("negation"), pop, rng)
    return outcome_model.fit(ds, feature_order)


@scenario("negated-ghat")
def _negated_ghat(seed, n=2000, m=2000, n_fit=2000, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    ghat = _separate_fit(pop, assignment, n_fit, seed, negate=True)
    return Scenario("negated-ghat", pop, policy, assignment, n, m, None, ghat, uniform_policy(pop.vocab, 1))


@scenario("misspecified-ghat")
def _misspecified_ghat(seed, n=2000, m=2000, n_fit=2000, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    ghat = _separate_fit(pop, assignment, n_fit, seed, feature_order=1)
    return Scenario("misspecified-ghat", pop, policy, assignment, n, m, None, ghat, uniform_policy(pop.vocab, 1))


@scenario("estimated-pr")
def _estimated_pr(seed, n=2000, m=2000, n_pr=50, smoothing=0.5, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    rng = np.random.default_rng([seed, 13])
    pr_hat = mle_fit(assignment.sample(rng, n_pr), pop.vocab, assignment.order, smoothing, "pr-hat")
    ghat = outcome_model.OutcomeModel.from_population(pop)
    return Scenario("estimated-pr", pop, policy, assignment, n, m, pr_hat, ghat, uniform_policy(pop.vocab, 1))


@scenario("variance")
def _variance(seed, n=500, m_factor=100, n_fit=2000, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    ghat = _separate_fit(pop, assignment, n_fit, seed)
    return Scenario("variance", pop, policy, assignment, n, m_factor * n, None, ghat, uniform_policy(pop.vocab, 1))


@scenario("noise-ghat")
def _noise_ghat(seed, n=500, m_factor=100, magnitude=20.0, **triple_kw):
    policy, pop, assignment = random_triple(seed, **triple_kw)
    rng = np.random.default_rng([seed, 17])
    w = magnitude * rng.standard_normal(pop.vocab.feature_dim(2))
    ghat = outcome_model.OutcomeModel(pop.vocab, w, 2, 0.0)
    return Scenario("noise-ghat", pop, policy, assignment, n, m_factor * n, None, ghat, uniform_policy(pop.vocab, 1))


@scenario("out-at-reference")
def _out_at_reference(seed, n=2000, m=2000, n_fit=2000, **triple_kw):
    _, pop, assignment = random_triple(seed, **triple_kw)
    ghat = _separate_fit(pop, assignment, n_fit, seed, negate=True)
    return Scenario("out-at-reference", pop, assignment, assignment, n, m, None, ghat, assignment)


def prediction_mse(ghat, pop, density):
    """E_{density}[(ghat - g)^2] and E_{density}[g^2], by enumeration."""
    texts = enumerate_texts(pop.vocab)
    p = np.exp(density.log_prob_batch(texts))
    g = pop.g(texts)
    return float(np.dot(p, (ghat.predict(texts) - g) ** 2)), float(np.dot(p, g**2))
