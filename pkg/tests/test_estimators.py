import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpo import outcome_model as om
from causalpo.errors import MissingInput, NonFiniteWeight, SampleSplittingWarning, ZeroSupport
from causalpo.estimators import CSV_FIELDS, WeightOptions, stabilize, v_dr, v_ipw, v_out
from causalpo.evaluation import Scenario, bias_variance_experiment, build_scenario, estimates_csv
from causalpo.policy import MIN_LOGIT, mle_fit, point_mass_policy, random_policy, uniform_policy
from causalpo.simulator import ConfounderSpec, LabeledDataset, Population, Provenance, confound, run_experiment, true_value
from causalpo.textspace import Vocab, enumerate_texts

OPTS = [
    WeightOptions(),
    WeightOptions(self_normalize=True),
    WeightOptions(clip_max=2.0),
    WeightOptions(self_normalize=True, clip_max=2.0),
]


def setup(seed=0, noise=1.0, n=300):
    rng = np.random.default_rng(seed)
    v = Vocab(3, 3)
    pop = Population.random(v, rng, noise_sd=noise)
    policy = random_policy(v, rng, 1, 0.8, "f")
    assignment = random_policy(v, rng, 1, 0.4, "assignment")
    ds = run_experiment(pop, assignment, n, rng)
    return v, pop, policy, assignment, ds


def test_stabilize_examples():
    assert stabilize(np.zeros(4)).tolist() == [1.0] * 4
    assert stabilize([0.0, 5.0], WeightOptions(clip_max=10)).tolist() == pytest.approx([1.0, 10.0])
    x = np.array([-1.0, 2.0, 0.3])
    assert np.array_equal(stabilize(x), np.exp(x))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=50))
def test_self_normalized_weights_have_unit_mean(log_ratios):
    w = stabilize(log_ratios, WeightOptions(self_normalize=True))
    assert abs(w.mean() - 1) < 1e-12


def test_weight_options_validation():
    with pytest.raises(ValueError):
        WeightOptions(clip_max=0.0)
    with pytest.raises(ValueError):
        WeightOptions(log_space=False)
    assert WeightOptions().describe() == "none"
    assert WeightOptions(True, 5.0).describe() == "clip(5)+self-normalized"


def test_ipw_formula_against_direct_ratio():
    v, pop, policy, assignment, ds = setup()
    ratio = np.exp(policy.log_prob_batch(ds.texts)) / np.exp(assignment.log_prob_batch(ds.texts))
    est = v_ipw(policy, ds, assignment)
    assert est.value == pytest.approx(np.mean(ratio * ds.outcomes), rel=1e-12)
    assert est.std_error == pytest.approx(np.std(ratio * ds.outcomes, ddof=1) / math.sqrt(len(ds)), rel=1e-10)
    assert est.value == float(np.mean(est.per_sample))


def test_ipw_at_assignment_is_sample_mean():
    _, _, _, assignment, ds = setup()
    for opts in OPTS:
        assert v_ipw(assignment, ds, None, opts).value == float(np.mean(ds.outcomes))


def test_self_normalized_ipw_of_constant_outcome():
    v, _, policy, assignment, _ = setup()
    ds = run_experiment(Population.from_terms(v, 3.0), assignment, 200, np.random.default_rng(0))
    assert v_ipw(policy, ds, assignment, WeightOptions(self_normalize=True)).value == pytest.approx(3.0, abs=1e-12)


def test_ipw_uses_dataset_assignment_or_requires_density():
    v, pop, policy, assignment, ds = setup()
    assert v_ipw(policy, ds).value == v_ipw(policy, ds, assignment).value
    bare = LabeledDataset(v, ds.texts, ds.outcomes, Provenance("observational", "negation"))
    with pytest.raises(MissingInput):
        v_ipw(policy, bare)
    assert v_ipw(policy, bare, assignment).value == v_ipw(policy, ds, assignment).value


def test_zero_support_raises():
    v = Vocab(2, 2)
    pop = Population.from_terms(v, 1.0)
    narrow = mle_fit([[0, 0]] * 3 + [[1, 1]], v, 1, 0.0)
    ds = run_experiment(pop, uniform_policy(v), 50, np.random.default_rng(0))
    with pytest.raises(ZeroSupport):
        v_ipw(uniform_policy(v), ds, narrow)
    assert narrow.log_prob([0, 1]) <= MIN_LOGIT


def test_non_finite_weight_and_clipping_rescue():
    v = Vocab(3, 4)
    pop = Population.from_terms(v, 1.0)
    assignment = uniform_policy(v)
    assignment.logits[:, 0] = -400.0  # token 0 nearly impossible but not zero-mass
    ds = LabeledDataset(v, [[0, 0, 0, 0], [1, 1, 1, 1]], [1.0, 1.0], Provenance("randomized", "a"), assignment)
    greedy = point_mass_policy(v, [0, 0, 0, 0], gap=400.0)
    with pytest.raises(NonFiniteWeight):
        v_ipw(greedy, ds)
    est = v_ipw(greedy, ds, None, WeightOptions(clip_max=100.0))
    assert np.isfinite(est.value) and est.stabilization == "clip(100)"


def test_log_space_survives_long_texts():
    """Raw probability products underflow here; log-space ratios do not."""
    v = Vocab(4, 600)
    pop = Population.from_terms(v, 0.0, [0, 1, 2, 3])
    f = random_policy(v, np.random.default_rng(0), 0, 0.05)
    assignment = uniform_policy(v, 0)
    ds = run_experiment(pop, assignment, 100, np.random.default_rng(1))
    assert np.all(np.exp(assignment.log_prob_batch(ds.texts)) == 0.0)
    est = v_ipw(f, ds)
    assert np.isfinite(est.value) and est.value > 0


def test_v_out_examples():
    v, pop, policy, assignment, _ = setup()
    ghat = om.OutcomeModel.from_population(pop)
    f0 = random_policy(v, np.random.default_rng(1), 1, 0.5)
    est = v_out(f0, f0, ghat, 500, np.random.default_rng(2))
    draws = f0.sample(np.random.default_rng(2), 500)
    assert est.value == pytest.approx(ghat.predict(draws).mean(), rel=1e-12)
    zero = om.OutcomeModel.constant(v, 0.0)
    assert v_out(policy, f0, zero, 100, np.random.default_rng(0)).value == 0.0
    with pytest.raises(ValueError):
        v_out(policy, f0, ghat, 0, np.random.default_rng(0))


def test_v_out_with_exact_g_is_consistent():
    v = Vocab(2, 2)
    rng = np.random.default_rng(0)
    pop = Population.random(v, rng)
    policy = random_policy(v, rng, 1)
    est = v_out(policy, uniform_policy(v), om.OutcomeModel.from_population(pop), 100_000, rng)
    assert abs(est.value - true_value(policy, pop)) < 3 * est.std_error


@pytest.mark.parametrize("opts", OPTS, ids=lambda o: o.describe())
def test_dr_degenerate_identities_bitwise(opts):
    v, pop, policy, assignment, ds = setup(3)
    f0 = random_policy(v, np.random.default_rng(1), 1, 0.5)
    zero = om.OutcomeModel.constant(v, 0.0)
    a = v_dr(policy, ds, assignment, zero, f0, 200, np.random.default_rng(5), opts)
    assert a.value == v_ipw(policy, ds, assignment, opts).value

    exact = Population(v, pop.g_weights, 0.0)
    ds0 = run_experiment(exact, assignment, 300, np.random.default_rng(6))
    g = om.OutcomeModel.from_population(exact)
    b = v_dr(policy, ds0, assignment, g, f0, 200, np.random.default_rng(7), opts)
    assert b.value == v_out(policy, f0, g, 200, np.random.default_rng(7), opts).value
    assert np.all(b.terms[0].contributions == 0.0)


def test_dr_components_and_std_error():
    v, pop, policy, assignment, ds = setup(4)
    f0 = uniform_policy(v)
    ghat = om.OutcomeModel(v, np.random.default_rng(0).standard_normal(v.feature_dim(2)))
    est = v_dr(policy, ds, assignment, ghat, f0, 400, np.random.default_rng(1))
    resid, out = est.terms
    assert len(resid) == len(ds) and len(out) == 400
    assert est.value == pytest.approx(resid.contributions.mean() + out.contributions.mean(), rel=1e-12)
    se = math.sqrt(resid.contributions.var(ddof=1) / len(ds) + out.contributions.var(ddof=1) / 400)
    assert est.std_error == pytest.approx(se, rel=1e-12)
    assert est.value == pytest.approx(est.per_sample.mean(), rel=1e-12)
    assert (est.n, est.m) == (len(ds), 400)


def test_dr_warns_without_sample_splitting():
    v, pop, policy, assignment, ds = setup(5)
    same = om.fit(ds)
    with pytest.warns(SampleSplittingWarning):
        v_dr(policy, ds, assignment, same, uniform_policy(v), 10, np.random.default_rng(0))
    other = om.fit(run_experiment(pop, assignment, 300, np.random.default_rng(9)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v_dr(policy, ds, assignment, other, uniform_policy(v), 10, np.random.default_rng(0))


def test_csv_rows():
    v, pop, policy, assignment, ds = setup()
    text = estimates_csv([v_ipw(policy, ds, assignment)])
    header, row = text.strip().splitlines()
    assert header.split(",") == list(CSV_FIELDS)
    assert row.startswith("ipw,")


# Monte Carlo checks; the exact expectation of each scenario is enumerated,
# so the unbiasedness claims are compared with an oracle, not with another
# estimator.


def test_scenario_expectations_match_truth_where_theory_says():
    for name in ("ipw-known", "negated-ghat", "misspecified-ghat", "estimated-pr"):
        sc = build_scenario(name, 1)
        truth = true_value(sc.policy, sc.pop)
        if name == "ipw-known":
            assert sc.expected_value("ipw") == pytest.approx(truth, abs=1e-10)
        else:
            assert sc.expected_value("dr") == pytest.approx(truth, abs=1e-10)
    sc = build_scenario("estimated-pr", 1)
    assert abs(sc.expected_value("ipw") - true_value(sc.policy, sc.pop)) > 0.05


def test_ipw_unbiased_small_space():
    v = Vocab(2, 2)
    rng = np.random.default_rng(0)
    pop = Population.random(v, rng, noise_sd=0.0)
    policy = random_policy(v, rng, 1, 1.0)
    sc = Scenario("tiny", pop, policy, uniform_policy(v), 2000)
    rep = bias_variance_experiment("ipw", sc, 1000, 11)
    assert rep.unbiased(3.0)


@pytest.mark.slow
def test_dr_unbiased_with_misspecified_ghat():
    sc = build_scenario("misspecified-ghat", 2)
    assert sc.ghat.feature_order == 1
    rep = bias_variance_experiment("dr", sc, 1000, 21)
    assert rep.unbiased(3.0)


@pytest.mark.slow
def test_out_at_reference_is_negated_truth():
    sc = build_scenario("out-at-reference", 3)
    rep = bias_variance_experiment("out", sc, 1000, 31)
    assert abs(rep.mean - sc.expected_value("out")) < 3 * rep.se_mean
    assert abs(rep.mean + rep.true_value) < 3 * rep.se_mean + abs(sc.expected_value("out") + rep.true_value)
    assert rep.bias == pytest.approx(-2 * rep.true_value, rel=0.05)
