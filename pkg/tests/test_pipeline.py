"""The experiment pipeline and the command-line interface."""
import json
import os

import numpy as np
import pytest

from causalpo import cli
from causalpo import experiment as ex
from causalpo.config import default_config_path, load_config
from causalpo.errors import MissingArtifact
from causalpo.policy import Policy, mle_fit
from causalpo.simulator import LabeledDataset

QUICK = default_config_path().replace("default", "quick")
TWO_TEXT = default_config_path().replace("default", "two_text")


def files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            full = os.path.join(dirpath, name)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("quick"))
    cfg = load_config(QUICK)
    ex.simulate(cfg, out)
    ex.fit_outcome(cfg, out)
    for method, variant in ex.ARMS.values():
        ex.train_arm(cfg, out, method, variant)
    results = ex.evaluate(cfg, out, plot=True)
    return cfg, out, results


def test_simulate_is_byte_identical(tmp_path):
    cfg = load_config(QUICK)
    ex.simulate(cfg, str(tmp_path / "a"))
    ex.simulate(cfg, str(tmp_path / "b"))
    assert files(tmp_path / "a") == files(tmp_path / "b")
    ex.simulate(load_config(QUICK, seed=8), str(tmp_path / "c"))
    a, c = files(tmp_path / "a"), files(tmp_path / "c")
    assert a[ex.D_R] != c[ex.D_R]


def test_negated_dataset_pairs_with_outcome_split(quick_run):
    cfg, out, _ = quick_run
    clean = LabeledDataset.load(os.path.join(out, ex.D_OUTCOME))
    neg = LabeledDataset.load(os.path.join(out, ex.D_CONFOUNDED))
    assert np.array_equal(neg.texts, clean.texts)
    assert np.array_equal(neg.outcomes, -clean.outcomes)
    assert neg.provenance.kind == "observational"


def test_frequency_check_at_ten_thousand(tmp_path):
    cfg = load_config(QUICK)
    cfg.n = 10_000
    ex.simulate(cfg, str(tmp_path))
    manifest = json.load(open(tmp_path / ex.MANIFEST))
    check = manifest["checks"]["text_frequencies"]
    assert check["n"] == 10_000 and check["texts"] == 27
    assert check["outside_99_simultaneous"] == 0
    assert manifest["files"][ex.FREQUENCIES]["seeds"] == {"randomized": cfg.seed_for("randomized")}


def test_ft_is_mle_of_randomized_texts(quick_run):
    cfg, out, _ = quick_run
    ds = LabeledDataset.load(os.path.join(out, ex.D_R))
    expected = mle_fit(ds.texts, cfg.vocab, cfg.policy_order, cfg.smoothing)
    assert np.array_equal(Policy.load(os.path.join(out, "policies/FT.json")).logits, expected.logits)


def test_cpo_with_zero_learning_rate_is_ft(quick_run, tmp_path):
    cfg, out, _ = quick_run
    cfg = load_config(QUICK)
    cfg.training["learning_rate"] = 0.0
    ex.simulate(cfg, str(tmp_path))
    ex.fit_outcome(cfg, str(tmp_path))
    ft, _ = ex.train_arm(cfg, str(tmp_path), "FT")
    cpo, _ = ex.train_arm(cfg, str(tmp_path), "CPO")
    assert np.array_equal(cpo.logits, ft.logits)


def test_two_text_pipeline_cpo_converges(tmp_path):
    assert cli.main(["train", "--config", TWO_TEXT, "--out-dir", str(tmp_path), "--method", "CPO", "--auto-build"]) == 0
    rows = open(tmp_path / "traces" / "CPO.csv").read().splitlines()
    assert len(rows) == 2001
    assert float(rows[-1].split(",")[2]) >= 0.99


def test_missing_artifacts_give_instructions(tmp_path):
    cfg = load_config(QUICK)
    with pytest.raises(MissingArtifact, match="causalpo simulate"):
        ex.train_arm(cfg, str(tmp_path), "CPO")
    with pytest.raises(MissingArtifact, match="causalpo train"):
        ex.evaluate(cfg, str(tmp_path))
    ex.simulate(cfg, str(tmp_path))
    with pytest.raises(MissingArtifact, match="fit-outcome"):
        ex.train_arm(cfg, str(tmp_path), "DRCPO")


def test_arm_names():
    assert ex.arm_name("DRCPO", "confounded") == "DRCPO-confounded"
    assert ex.arm_name("CPO", "reseed") == "CPO-reseed"
    for bad in (("FT", "reseed"), ("CPO", "confounded"), ("PPO", "clean"), ("CPO", "weird")):
        with pytest.raises(ValueError):
            ex.arm_name(*bad)


def test_evaluate_single_method(tmp_path):
    cfg = load_config(QUICK)
    out = str(tmp_path)
    ex.train_arm(cfg, out, "CPO", auto_build=True)
    res = ex.evaluate(cfg, out)
    (row,) = res["win_rates"]
    assert (row["policy_a"], row["policy_b"]) == ("CPO", "CPO")
    assert row["ci_low"] <= 0.5 <= row["ci_high"]
    assert res["confounding_impact"] == []
    assert not os.path.exists(os.path.join(out, "results/confounding_impact.csv"))


def test_full_matrix_and_tables(quick_run):
    cfg, out, res = quick_run
    arms = list(ex.ARMS)
    assert [(r["policy_a"], r["policy_b"]) for r in res["win_rates"]] == [(a, b) for a in arms for b in arms]
    truth = {r["policy"]: r["true_value"] for r in res["reward_table"]}
    for good in ("CPO", "DRCPO"):
        assert truth[good] > truth["FT"] and truth[good] > truth["OORLHF-confounded"]
    assert {r["propensity"] for r in res["reward_table"]} == {"known", "estimated"}
    assert {r["stabilization"] for r in res["reward_table"]} == {"none", "self-normalized"}
    assert [r["method"] for r in res["confounding_impact"]] == ["CPO", "DRCPO", "OORLHF"]
    header = open(os.path.join(out, "results/win_rates.csv")).readline().strip()
    assert header == ",".join(ex.WIN_FIELDS)
    assert open(os.path.join(out, "results/plot_true_value.csv")).readline().strip() == "x,y"


def test_evaluate_rerun_is_byte_identical(quick_run):
    cfg, out, _ = quick_run
    before = {k: v for k, v in files(out).items() if k.startswith("results/")}
    ex.evaluate(cfg, out, plot=True)
    after = {k: v for k, v in files(out).items() if k.startswith("results/")}
    assert before == after


def test_every_file_has_a_manifest_entry(quick_run):
    cfg, out, _ = quick_run
    manifest = json.load(open(os.path.join(out, ex.MANIFEST)))
    assert manifest["config_hash"] == cfg.text_hash and manifest["master_seed"] == cfg.seed
    emitted = set(files(out)) - {ex.MANIFEST}
    assert emitted == set(manifest["files"])
    for entry in manifest["files"].values():
        assert {"command", "seeds", "config_hash", "sha256"} <= set(entry)
    assert manifest["files"]["policies/CPO.json"]["seeds"] == {"train.CPO": cfg.seed_for("train.CPO")}


def test_cli_commands(tmp_path, capsys):
    out = str(tmp_path)
    base = ["--config", QUICK, "--out-dir", out]
    assert cli.main(["simulate", *base]) == 0
    assert cli.main(["fit-outcome", *base]) == 0
    assert cli.main(["train", *base, "--method", "FT"]) == 0
    assert cli.main(["train", *base, "--method", "OORLHF", "--variant", "confounded"]) == 0
    assert cli.main(["evaluate", *base]) == 0
    text = capsys.readouterr().out
    assert "trained OORLHF-confounded" in text and "win_rates:" in text


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nvocab:\n  size: 1\n  seq_len: 2\n")
    assert cli.main(["simulate", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "bad.yaml:3:" in capsys.readouterr().err
    assert cli.main(["train", "--config", QUICK, "--out-dir", str(tmp_path / "x"), "--method", "CPO"]) == 2
    assert "causalpo simulate" in capsys.readouterr().err
    assert cli.main(["train", "--config", QUICK, "--out-dir", str(tmp_path), "--method", "CPO",
                     "--variant", "confounded"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["train", "--method", "PPO"])


def test_reproduce_all_report(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["reproduce-all", "--config", QUICK, "--out-dir", a, "--skip-determinism"]) == 0
    assert cli.main(["reproduce-all", "--config", QUICK, "--out-dir", b, "--skip-determinism", "--threads", "2"]) == 0
    report = open(os.path.join(a, "report.md")).read()
    for n in range(1, 9):
        assert f"| {n} | " in report
    assert report.count("| PASS |") == 8
    status = [line for line in capsys.readouterr().out.splitlines() if " criterion " in line]
    assert len(status) == 16
    assert files(a) == files(b)


def test_reproduce_all_survives_failed_steps(tmp_path, monkeypatch):
    from causalpo import acceptance

    def broken(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(ex, "fit_outcome", broken)
    cfg = load_config(QUICK)
    res = acceptance.reproduce_all(cfg, str(tmp_path), check_determinism=False)
    failed = [step for step, _ in res.failures]
    assert "fit-outcome" in failed and "train DRCPO" in failed and "train CPO" not in failed
    verdict = {c.number: c.passed for c in res.criteria}
    assert verdict[1] and verdict[7] and verdict[8]
    assert not verdict[6]
    assert "disk on fire" in open(res.report_path).read()
