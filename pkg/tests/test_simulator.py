import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from causalpo.errors import AlreadyObservational, EnumerationTooLarge
from causalpo.policy import point_mass_policy, random_policy, uniform_policy
from causalpo.simulator import (
    ConfounderSpec,
    LabeledDataset,
    Population,
    Provenance,
    argmax_text,
    confound,
    max_value,
    potential_outcome,
    run_experiment,
    true_value,
)
from causalpo.textspace import Vocab, enumerate_texts

from oracles import value as oracle_value


def test_potential_outcome_noiseless_examples(rng):
    v = Vocab(2, 4)
    pop = Population.from_terms(v, intercept=5.0)
    assert potential_outcome(pop, enumerate_texts(v), rng).tolist() == [5.0] * 16
    pop = Population.from_terms(v, unigram=[0, 1])
    assert potential_outcome(pop, np.array([[1, 1, 1, 1]]), rng).tolist() == [4.0]


def test_potential_outcome_noise_mean():
    v = Vocab(3, 2)
    pop = Population.from_terms(v, 1.0, [0.5, -1, 2], noise_sd=1.0)
    text = np.array([[2, 1]] * 100_000)
    y = potential_outcome(pop, text, np.random.default_rng(0))
    assert abs(y.mean() - pop.g(text[:1])[0]) < 3 / np.sqrt(1e5)


def test_noiseless_outcomes_consume_no_randomness():
    v = Vocab(2, 2)
    pop = Population.from_terms(v, 1.0)
    r = np.random.default_rng(0)
    potential_outcome(pop, enumerate_texts(v), r)
    assert r.random() == np.random.default_rng(0).random()


def test_true_value_examples():
    v = Vocab(2, 2)
    assert true_value(uniform_policy(v), Population.from_terms(v, 3.5)) == pytest.approx(3.5)
    assert true_value(uniform_policy(v), Population.from_terms(v, unigram=[0, 1])) == pytest.approx(1.0)
    v = Vocab(3, 3)
    pop = Population.random(v, np.random.default_rng(0))
    x = [2, 0, 1]
    assert true_value(point_mass_policy(v, x), pop) == pytest.approx(pop.g(np.array([x]))[0], abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_true_value_matches_oracle_and_max_bound(seed, order):
    rng = np.random.default_rng(seed)
    v = Vocab(3, 3)
    pol = random_policy(v, rng, order, 2.0)
    pop = Population.random(v, rng)
    tv = true_value(pol, pop)
    assert tv == pytest.approx(oracle_value(pol.logits, pop.g_weights, 3, 3, order), abs=1e-9)
    assert tv <= max_value(pop) + 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_true_value_linear_in_mixtures(seed, lam):
    rng = np.random.default_rng(seed)
    v = Vocab(2, 3)
    p, q = random_policy(v, rng), random_policy(v, rng)
    pop = Population.random(v, rng)
    mix = lam * p.distribution() + (1 - lam) * q.distribution()
    mixed_value = float(np.dot(mix, pop.g(enumerate_texts(v))))
    assert mixed_value == pytest.approx(lam * true_value(p, pop) + (1 - lam) * true_value(q, pop), abs=1e-9)


def test_true_value_requires_enumeration():
    v = Vocab(10, 8)
    with pytest.raises(EnumerationTooLarge):
        true_value(uniform_policy(v), Population.from_terms(v))


def test_argmax_text():
    v = Vocab(3, 4)
    pop = Population.from_terms(v, -11.0, [0, 1, 2], {(2, 2): 1.0})
    assert argmax_text(pop) == (2, 2, 2, 2)
    assert max_value(pop) == pytest.approx(0.0)


def test_run_experiment_examples(rng):
    v = Vocab(3, 3)
    pop = Population.from_terms(v, 1.0, [0, 1, 2])
    ds = run_experiment(pop, point_mass_policy(v, [0, 1, 2]), 100, rng)
    assert np.all(ds.texts == [0, 1, 2])
    assert np.array_equal(ds.outcomes, pop.g(ds.texts))
    assert ds.provenance.randomized


def test_run_experiment_uniform_frequencies():
    v = Vocab(2, 2)
    ds = run_experiment(Population.from_terms(v), uniform_policy(v), 10_000, np.random.default_rng(0))
    freq = np.bincount(ds.texts[:, 0] * 2 + ds.texts[:, 1], minlength=4) / 10_000
    assert np.all((freq > 0.23) & (freq < 0.27))


def test_negation_example_and_involution(rng):
    v = Vocab(2, 1)
    ds = LabeledDataset(v, [[0], [1], [0]], [3.0, -1.0, 0.0], Provenance("randomized", "a"))
    neg = confound(ds, ConfounderSpec("negation"), Population.from_terms(v), rng)
    assert neg.outcomes.tolist() == [-3.0, 1.0, -0.0]
    assert neg.provenance == Provenance("observational", "negation")
    assert np.array_equal(-neg.outcomes, ds.outcomes)
    with pytest.raises(AlreadyObservational):
        confound(neg, ConfounderSpec("negation"), Population.from_terms(v), rng)


def test_null_latent_shift_leaves_outcomes_in_distribution():
    v = Vocab(3, 3)
    pop = Population.random(v, np.random.default_rng(1), noise_sd=1.0)
    ds = run_experiment(pop, uniform_policy(v), 10_000, np.random.default_rng(2))
    out = confound(ds, ConfounderSpec("latent_shift", 0.0, 0.0), pop, np.random.default_rng(3))
    assert out.provenance.source == "latent-shift"
    assert ks_2samp(ds.outcomes, out.outcomes).pvalue > 0.01


def test_latent_shift_confounds():
    """Positive selection on u*z favors high-g texts read by high-u readers."""
    v = Vocab(3, 3)
    pop = Population.random(v, np.random.default_rng(1), noise_sd=0.0)
    ds = run_experiment(pop, uniform_policy(v), 20_000, np.random.default_rng(2))
    out = confound(ds, ConfounderSpec("latent_shift", 2.0, 2.0), pop, np.random.default_rng(3))
    resid = out.outcomes - pop.g(out.texts)
    z = (pop.g(out.texts) - pop.g(ds.texts).mean()) / pop.g(ds.texts).std()
    assert np.corrcoef(resid, z)[0, 1] > 0.2


def test_confounder_spec_validation():
    with pytest.raises(ValueError):
        ConfounderSpec("flip")
    with pytest.raises(ValueError):
        ConfounderSpec("latent_shift", np.inf, 0.0)


def test_noiseless_regression_recovers_g():
    from causalpo import outcome_model
    v = Vocab(3, 4)
    pop = Population.random(v, np.random.default_rng(4), noise_sd=0.0)
    ds = run_experiment(pop, uniform_policy(v), 3000, np.random.default_rng(5))
    model = outcome_model.fit(ds, 2, 0.0)
    assert np.allclose(model.weights, pop.g_weights, atol=1e-8)


def test_dataset_round_trip(tmp_path, rng):
    v = Vocab(3, 2)
    pop = Population.random(v, rng)
    assignment = random_policy(v, rng, 1, 1.0, "assign")
    ds = run_experiment(pop, assignment, 50, rng)
    path = tmp_path / "d.jsonl"
    ds.save(path)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])["header"]["provenance"] == {"kind": "randomized", "source": "assign"}
    assert set(json.loads(lines[1])) == {"tokens", "outcome"}
    back = LabeledDataset.load(path, assignment)
    assert np.array_equal(back.texts, ds.texts)
    assert np.array_equal(back.outcomes, ds.outcomes)
    assert back.fingerprint == ds.fingerprint


def test_dataset_validation():
    v = Vocab(2, 2)
    p = Provenance("randomized", "a")
    with pytest.raises(ValueError):
        LabeledDataset(v, np.zeros((0, 2)), [], p)
    with pytest.raises(ValueError):
        LabeledDataset(v, [[0, 1]], [1.0, 2.0], p)
    with pytest.raises(ValueError):
        run_experiment(Population.from_terms(v), uniform_policy(v), 0, np.random.default_rng(0))


def test_population_round_trip_and_identifiable_weights():
    v = Vocab(3, 3)
    pop = Population.random(v, np.random.default_rng(0), noise_sd=0.5)
    back = Population.from_dict(json.loads(json.dumps(pop.to_dict())))
    texts = enumerate_texts(v)
    assert np.array_equal(back.g(texts), pop.g(texts))
    assert np.allclose(Population(v, pop.identifiable_weights()).g(texts), pop.g(texts), atol=1e-10)
